"""Joint atlas-guided segmentation, bias correction and deformable registration."""

from segreg.core import ClassGrouping, FieldError, Kernel, box_kernel, gaussian_kernel
from segreg.joint import JointConfig, JointResult, joint_solve, run_ablation
from segreg.registration import RegConfig, register
from segreg.segmentation import SegConfig, lgmm_solve

__version__ = "0.1.0"

__all__ = [
    "ClassGrouping",
    "FieldError",
    "JointConfig",
    "JointResult",
    "Kernel",
    "RegConfig",
    "SegConfig",
    "box_kernel",
    "gaussian_kernel",
    "joint_solve",
    "lgmm_solve",
    "register",
    "run_ablation",
]
