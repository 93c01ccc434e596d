"""Seeded synthetic image pairs with ground truth.

The moving image is a clean piecewise-constant rendering. The fixed image
is the moving image pulled back through a smooth random displacement,
with optional boundary breaks, multiplied by a smooth bias field and
corrupted with Gaussian noise.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from segreg.core import convolve, gaussian_kernel, normalize_intensity
from segreg.registration import warp, warp_nearest

logger = logging.getLogger(__name__)

MAX_RETRIES = 10


@dataclass
class PhantomSpec:
    """Phantom layout and corruption levels.

    ``layout`` is ``"star_heart"`` (background, star, heart) or ``"thigh"``
    (two touching gray objects inside a bright ring on a dark background;
    classes object A, object B, ring, background).
    ``intensities`` lists the clean intensity of every class in label order.
    """

    shape: tuple = (96, 96)
    seed: int = 0
    layout: str = "star_heart"
    intensities: tuple = (0.1, 0.6, 0.65)
    deform_amplitude: float = 4.0
    deform_sigma: float = 4.0
    bias_amplitude: float = 0.3
    bias_sigma: float = 40.0
    noise_std: float = 0.05
    n_breaks: int = 1
    break_width: int = 5

    def __post_init__(self):
        self.shape = tuple(int(n) for n in self.shape)
        self.intensities = tuple(float(v) for v in self.intensities)
        if len(set(self.intensities)) != len(self.intensities):
            raise ValueError("class intensities must be distinct")
        for name in ("deform_amplitude", "deform_sigma", "bias_amplitude", "bias_sigma",
                     "noise_std", "n_breaks", "break_width"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        expected = {"star_heart": 3, "thigh": 4}.get(self.layout)
        if expected is None:
            raise ValueError(f"unknown layout {self.layout!r}")
        if len(self.intensities) != expected:
            raise ValueError(f"layout {self.layout!r} needs {expected} intensities")

    @property
    def n_classes(self) -> int:
        return len(self.intensities)

    @classmethod
    def shapes(cls, seed: int = 0, **kw) -> "PhantomSpec":
        return cls(seed=seed, **kw)

    @classmethod
    def biased(cls, seed: int = 0, **kw) -> "PhantomSpec":
        base = dict(intensities=(0.3, 0.55, 0.6), deform_amplitude=0.0, bias_amplitude=0.2,
                    noise_std=0.07, n_breaks=0)
        base.update(kw)
        return cls(seed=seed, **base)

    @classmethod
    def thigh(cls, seed: int = 0, **kw) -> "PhantomSpec":
        base = dict(layout="thigh", intensities=(0.5, 0.5 + 1e-3, 0.9, 0.1), n_breaks=0)
        base.update(kw)
        return cls(seed=seed, **base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shape"] = list(self.shape)
        d["intensities"] = list(self.intensities)
        return d


@dataclass
class PhantomPair:
    moving: np.ndarray
    fixed: np.ndarray
    gt_moving: np.ndarray
    gt_fixed: np.ndarray
    true_T: np.ndarray
    true_beta: np.ndarray
    spec: PhantomSpec = field(repr=False, default=None)


def _coords(shape):
    return np.meshgrid(*[np.arange(n, dtype=float) for n in shape], indexing="ij")


def _star(shape, center, radius, points=5, depth=0.35, phase=0.0):
    y, x = _coords(shape)
    dy, dx = y - center[0], x - center[1]
    r = np.hypot(dy, dx)
    th = np.arctan2(dy, dx)
    return r <= radius * (1.0 - depth * 0.5 * (1 - np.cos(points * th + phase)))


def _heart(shape, center, size):
    y, x = _coords(shape)
    # classic (x^2 + y^2 - 1)^3 - x^2 y^3 <= 0, y pointing up
    X = (x - center[1]) / size
    Y = -(y - center[0]) / size + 0.1
    return (X * X + Y * Y - 1.0) ** 3 - X * X * Y**3 <= 0


def render_labels(spec: PhantomSpec) -> np.ndarray:
    shape = spec.shape[:2]
    h, w = shape
    s = min(h, w)
    lab = np.zeros(shape, dtype=np.int64)
    if spec.layout == "star_heart":
        star = _star(shape, (0.5 * h, 0.28 * w), 0.2 * s)
        heart = _heart(shape, (0.5 * h, 0.72 * w), 0.16 * s)
        lab[star] = 1
        lab[heart & ~star] = 2
    else:
        y, x = _coords(shape)
        cy, cx = 0.5 * h, 0.5 * w
        body = ((y - cy) / (0.44 * h)) ** 2 + ((x - cx) / (0.44 * w)) ** 2 <= 1
        inner = ((y - cy) / (0.34 * h)) ** 2 + ((x - cx) / (0.36 * w)) ** 2 <= 1
        split = (x - cx) + 0.3 * (y - cy) < 0
        lab[:] = 3
        lab[body] = 2
        lab[inner & split] = 0
        lab[inner & ~split] = 1
    if len(spec.shape) == 3:
        lab = np.repeat(lab[..., np.newaxis], spec.shape[2], axis=2)
    return lab


def smooth_random_field(rng, shape, sigma, amplitude, channels):
    """Gaussian-smoothed white noise scaled to max vector norm ``amplitude``."""
    if amplitude == 0:
        return np.zeros((channels,) + tuple(shape))
    g = gaussian_kernel(max(sigma, 1e-6))
    v = np.stack([convolve(rng.standard_normal(shape), g) for _ in range(channels)])
    norm = np.sqrt((v * v).sum(axis=0)).max()
    return v * (amplitude / norm)


def _objects_separated(lab, spec) -> bool:
    if spec.layout != "star_heart":
        return True
    a = ndimage.binary_dilation(lab == 1, iterations=2)
    return not np.any(a & (lab == 2))


def _volumes_close(gm, gf, n) -> bool:
    for k in range(n):
        vm, vf = np.sum(gm == k), np.sum(gf == k)
        if vm and abs(vf - vm) >= 0.2 * vm:
            return False
    return True


def make_pair(spec: PhantomSpec | None = None) -> PhantomPair:
    """Generate a moving/fixed pair with ground truth, deterministic in ``spec.seed``."""
    spec = spec or PhantomSpec()
    rng = np.random.default_rng(spec.seed)
    shape = spec.shape
    gt_moving = render_labels(spec)
    lut = np.asarray(spec.intensities)
    clean = lut[gt_moving]
    d = len(shape)
    for attempt in range(MAX_RETRIES):
        T = smooth_random_field(rng, shape, spec.deform_sigma, spec.deform_amplitude, d)
        gt_fixed = warp_nearest(gt_moving, T)
        if _objects_separated(gt_fixed, spec) and _volumes_close(gt_moving, gt_fixed, spec.n_classes):
            break
        logger.warning("phantom deformation rejected (attempt %d), regenerating", attempt + 1)
    fixed_clean = warp(clean, T)
    bg = int(np.argmin(lut)) if spec.layout == "thigh" else 0
    for _ in range(spec.n_breaks):
        fg = gt_fixed != bg
        edge = fg & ~ndimage.binary_erosion(fg)
        pts = np.argwhere(edge)
        if len(pts) == 0:
            break
        c = pts[rng.integers(len(pts))]
        r = spec.break_width // 2
        sl = tuple(slice(max(ci - r, 0), ci - r + spec.break_width) for ci in c)
        fixed_clean[sl] = lut[bg]
    beta = 1.0 + smooth_random_field(rng, shape, spec.bias_sigma, spec.bias_amplitude, 1)[0]
    noise = spec.noise_std * rng.standard_normal(shape) if spec.noise_std > 0 else 0.0
    fixed = fixed_clean * beta + noise
    return PhantomPair(
        moving=normalize_intensity(clean),
        fixed=normalize_intensity(fixed),
        gt_moving=gt_moving,
        gt_fixed=gt_fixed,
        true_T=T,
        true_beta=beta,
        spec=spec,
    )
