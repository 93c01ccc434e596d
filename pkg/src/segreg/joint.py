"""Alternating joint segmentation and registration."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import linear_sum_assignment

from segreg.core import (
    ClassGrouping,
    FieldError,
    argmax_label,
    check_field,
    check_soft,
    one_hot,
)
from segreg.registration import (
    ControlGrid,
    EnergyBreakdown,
    RegConfig,
    joint_T_energy_grad,
    register,
    warp,
    warp_channels,
)
from segreg.segmentation import (
    MixtureParams,
    SegConfig,
    kmeans_init,
    lgmm_solve,
    segmentation_energy,
    update_mixture_params,
)

logger = logging.getLogger(__name__)

MODES = ("joint", "seg_only", "reg_only")


class GroupingError(ValueError):
    pass


class DivergenceError(RuntimeError):
    """Outer energy rose by more than the allowed fraction; ``result`` holds the trace."""

    def __init__(self, message, result):
        super().__init__(message)
        self.result = result


@dataclass
class JointConfig:
    seg: SegConfig = field(default_factory=SegConfig)
    reg: RegConfig = field(default_factory=RegConfig)
    max_iter: int = 10
    tol: float = 1e-5
    grouping: ClassGrouping | None = None
    seed: int = 0
    divergence: float = 0.10

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.tol < 0 or self.divergence < 0:
            raise ValueError("tol and divergence must be >= 0")
        if self.seg.zeta != self.reg.zeta:
            raise ValueError("segmentation and registration zeta must agree")

    @property
    def xi(self) -> float:
        return self.reg.xi


@dataclass
class JointResult:
    u: np.ndarray
    params: MixtureParams | None
    beta: np.ndarray
    T: np.ndarray
    grid: ControlGrid
    labels_u: np.ndarray
    labels_atlas: np.ndarray
    labels: np.ndarray
    warped_moving: np.ndarray
    trace: list = field(default_factory=list)
    seg_traces: list = field(default_factory=list)
    reg_traces: list = field(default_factory=list)
    status: str = "max_iter"
    n_iter: int = 0
    mode: str = "joint"


def grouped_cross_entropy(u, warped_atlas, grouping: ClassGrouping, xi: float, floor: float = 1e-8):
    """Grouped cross entropy ``-xi * sum_x sum_g P_g log Q_g`` and the per-class prior.

    ``P_g`` sums the memberships of segmentation group ``g``; ``Q_g`` is the
    share of the (floored) warped atlas mass in its atlas group. The prior
    returned has one channel per segmentation class, each equal to its
    group's ``Q_g``.
    """
    u = np.asarray(u, dtype=float)
    S = np.asarray(warped_atlas, dtype=float)
    if u.shape[0] != grouping.n_seg or S.shape[0] != grouping.n_atlas:
        raise GroupingError(
            f"grouping expects {grouping.n_seg} seg / {grouping.n_atlas} atlas channels, "
            f"got {u.shape[0]} / {S.shape[0]}"
        )
    for g, (_, atl) in enumerate(grouping.pairs):
        if not np.any(S[list(atl)] > 0):
            raise GroupingError(f"atlas group {g} has zero mass everywhere")
    S = np.maximum(S, floor)
    Z = S.sum(axis=0)
    prior = np.empty_like(u)
    value = 0.0
    for seg, atl in grouping.pairs:
        q = S[list(atl)].sum(axis=0) / Z
        p = u[list(seg)].sum(axis=0)
        value -= float(np.sum(p * np.log(q)))
        prior[list(seg)] = q
    return xi * value, prior


def align_to_atlas(u0, atlas):
    """Permute the channels of ``u0`` to best overlap the atlas argmax labels."""
    k = u0.shape[0]
    a = argmax_label(atlas)
    b = argmax_label(u0)
    overlap = np.array([[np.sum((b == i) & (a == j)) for j in range(k)] for i in range(k)])
    rows, cols = linear_sum_assignment(-overlap)
    out = np.empty_like(u0)
    out[cols] = u0[rows]
    return out


def _check_inputs(fixed, moving, atlas):
    fixed = check_field(fixed, "fixed")
    moving = check_field(moving, "moving")
    atlas = check_soft(atlas, "atlas", atol=1e-6)
    if fixed.shape != moving.shape or atlas.shape[1:] != fixed.shape:
        raise FieldError("fixed, moving and atlas must share one grid")
    for name, img in (("fixed", fixed), ("moving", moving)):
        if img.min() < -1e-6 or img.max() > 1 + 1e-6:
            raise FieldError(f"{name} image must be normalized to [0, 1]")
    return fixed, moving, atlas


def _total_energy(fixed, moving, u, params, beta, D, atlas_floored, cfg, grouping, xi):
    T = control_to_field_of(D, fixed.shape, cfg.reg.spacing)
    S = warp_channels(atlas_floored, T)
    ce, prior = grouped_cross_entropy(u, S, grouping, xi, cfg.reg.atlas_floor)
    seg = segmentation_energy(fixed, u, params, beta, cfg.seg)
    e_reg, _ = joint_T_energy_grad(D, fixed / beta, moving, None, None, replace(cfg.reg, xi=0.0))
    return EnergyBreakdown(seg.e_seg, ce, e_reg.e_reg_fidelity, e_reg.e_reg_tikhonov), prior, S


def control_to_field_of(D, shape, spacing):
    return ControlGrid(D, tuple(shape), spacing).field()


def joint_solve(fixed, moving, atlas, cfg: JointConfig | None = None, mode: str = "joint") -> JointResult:
    """Alternate segmentation (mixture, bias, memberships) and registration.

    Parameters
    ----------
    fixed, moving : array
        Images normalized to ``[0, 1]``.
    atlas : array, shape (K_a, *shape)
        Probability maps of the moving image.
    cfg : JointConfig
    mode : {"joint", "seg_only", "reg_only"}
        ``seg_only`` drops the cross entropy and the registration fidelity
        and never registers; ``reg_only`` registers intensities only and
        labels with the warped atlas.

    Raises
    ------
    DivergenceError
        When the total energy rises by more than ``cfg.divergence`` between
        outer iterations.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    cfg = cfg or JointConfig()
    fixed, moving, atlas = _check_inputs(fixed, moving, atlas)
    if mode == "seg_only":
        cfg = replace(cfg, seg=replace(cfg.seg, zeta=0.0), reg=replace(cfg.reg, xi=0.0, zeta=0.0))
    if mode == "reg_only":
        return _reg_only(fixed, moving, atlas, replace(cfg.reg, xi=0.0), cfg)

    n_seg, n_atlas = cfg.seg.n_classes, atlas.shape[0]
    grouping = cfg.grouping or ClassGrouping.identity(n_atlas)
    if grouping.n_seg != n_seg or grouping.n_atlas != n_atlas:
        raise GroupingError("grouping does not match the class counts")
    xi = cfg.xi
    atlas_f = np.maximum(atlas, cfg.reg.atlas_floor)
    couple_fid = cfg.seg.zeta > 0

    u = kmeans_init(fixed, n_seg, cfg.seed)
    if grouping.is_identity:
        u = align_to_atlas(u, atlas)
    beta = np.ones_like(fixed)
    grid = ControlGrid.zeros(fixed.shape, cfg.reg.spacing)
    params, _ = update_mixture_params(fixed, u, beta, None, replace(cfg.seg, update_bias=False))
    e, prior, S = _total_energy(fixed, moving, u, params, beta, grid.D, atlas_f, cfg, grouping, xi)
    res = JointResult(
        u, params, beta, grid.field(), grid, argmax_label(u), argmax_label(S),
        argmax_label(u), moving.copy(), trace=[e], mode=mode,
    )
    status = "max_iter"
    for t in range(cfg.max_iter):
        T = grid.field()
        wm = warp(moving, T)
        lg = lgmm_solve(
            fixed, u, beta, cfg.seg,
            prior=prior if xi > 0 else None,
            warped_moving=wm if couple_fid else None,
            xi=xi, params0=params,
        )
        u, params, beta = lg.u, lg.params, lg.beta
        res.seg_traces.append(lg.trace)

        if mode == "joint":
            rr = register(fixed / beta, moving, atlas, u, cfg.reg, grouping, T_init=T)
            res.reg_traces.append(rr.trace)
            old, _ = joint_T_energy_grad(grid.D, fixed / beta, moving, atlas_f, u, cfg.reg, grouping)
            if rr.energy.total <= old.total:
                grid = rr.grid
            else:
                logger.info("outer %d: registration did not lower its energy; keeping T", t)

        e_prev = e.total
        e, prior, S = _total_energy(fixed, moving, u, params, beta, grid.D, atlas_f, cfg, grouping, xi)
        res.trace.append(e)
        res.n_iter = t + 1
        if not math.isfinite(e.total):
            status = "non_finite"
            break
        if e.total - e_prev > cfg.divergence * abs(e_prev):
            res.status = "diverged"
            _finish(res, u, params, beta, grid, moving, S, n_seg, n_atlas)
            raise DivergenceError(
                f"energy rose from {e_prev:.6g} to {e.total:.6g} at outer iteration {t + 1}", res
            )
        if e_prev != 0 and (e.total - e_prev) ** 2 / e_prev**2 < cfg.tol:
            status = "converged"
            break
    res.status = status
    _finish(res, u, params, beta, grid, moving, S, n_seg, n_atlas)
    return res


def _finish(res, u, params, beta, grid, moving, S, n_seg, n_atlas):
    res.u, res.params, res.beta, res.grid = u, params, beta, grid
    res.T = grid.field()
    res.warped_moving = warp(moving, res.T)
    res.labels_u = argmax_label(u)
    res.labels_atlas = argmax_label(S)
    res.labels = res.labels_atlas if n_seg != n_atlas else res.labels_u


def _reg_only(fixed, moving, atlas, reg_cfg: RegConfig, cfg: JointConfig) -> JointResult:
    rr = register(fixed, moving, None, None, reg_cfg)
    S = warp_channels(np.maximum(atlas, reg_cfg.atlas_floor), rr.T)
    u = S / S.sum(axis=0, keepdims=True)
    lab = argmax_label(S)
    return JointResult(
        u=u, params=None, beta=np.ones_like(fixed), T=rr.T, grid=rr.grid,
        labels_u=lab, labels_atlas=lab, labels=lab, warped_moving=warp(moving, rr.T),
        trace=[rr.energy], reg_traces=[rr.trace], status="converged", n_iter=1, mode="reg_only",
    )


def run_ablation(fixed, moving, atlas, cfg: JointConfig | None = None, mode: str = "joint") -> JointResult:
    """Run one of the three ablation modes; all return a :class:`JointResult`."""
    return joint_solve(fixed, moving, atlas, cfg, mode=mode)


def atlas_from_labels(labels, n_classes: int | None = None) -> np.ndarray:
    return one_hot(labels, n_classes)
