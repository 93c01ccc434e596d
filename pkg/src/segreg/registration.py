"""Parametric coarse-to-fine registration.

Displacements are in pixel units of the grid they live on and follow the
pull-back convention ``warped(x) = f(x + T(x))``. ``T`` is the multilinear
interpolant of displacements ``D`` stored on knots spaced ``N`` pixels
apart, with knot ``j`` at pixel ``j * N`` along each axis.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from itertools import product

import numpy as np

from segreg.core import ClassGrouping, FieldError, check_field, convolve, gaussian_kernel
from segreg.lbfgs import LBFGSOptions, lbfgs_minimize

logger = logging.getLogger(__name__)

MIN_LEVEL_SIDE = 4


@dataclass
class RegConfig:
    zeta: float = 1.0
    eta: float = 0.05
    xi: float = 0.7
    levels: int = 8
    factor: float = 0.7
    spacing: int = 4
    max_iter: int = 100
    memory: int = 10
    gtol: float = 1e-5
    ftol: float = 1e-8
    atlas_floor: float = 1e-8

    def __post_init__(self):
        if not 0 < self.factor < 1:
            raise ValueError("pyramid factor must lie in (0, 1)")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.spacing < 1:
            raise ValueError("knot spacing must be >= 1")
        for name in ("zeta", "eta", "xi", "gtol", "ftol", "atlas_floor"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def lbfgs(self) -> LBFGSOptions:
        return LBFGSOptions(
            max_iter=self.max_iter, memory=self.memory, gtol=self.gtol, ftol=self.ftol
        )


@dataclass
class EnergyBreakdown:
    e_seg: float = 0.0
    e_ce: float = 0.0
    e_reg_fidelity: float = 0.0
    e_reg_tikhonov: float = 0.0

    @property
    def total(self) -> float:
        return self.e_seg + self.e_ce + self.e_reg_fidelity + self.e_reg_tikhonov

    def as_row(self) -> dict:
        return {
            "e_seg": self.e_seg,
            "e_ce": self.e_ce,
            "e_reg_fidelity": self.e_reg_fidelity,
            "e_reg_tikhonov": self.e_reg_tikhonov,
            "total": self.total,
        }


@dataclass
class ControlGrid:
    """Knot displacements ``D`` of shape ``(d, *lattice)`` for an image ``shape``."""

    D: np.ndarray
    shape: tuple
    spacing: int = 4

    @classmethod
    def zeros(cls, shape, spacing: int = 4) -> "ControlGrid":
        lat = lattice_shape(shape, spacing)
        return cls(np.zeros((len(shape),) + lat), tuple(shape), spacing)

    def field(self) -> np.ndarray:
        return control_to_field(self.D, self.shape, self.spacing)


def lattice_shape(shape, spacing: int) -> tuple:
    return tuple(int(math.ceil((n - 1) / spacing)) + 1 for n in shape)


def interp_matrix(n_src: int, coords) -> np.ndarray:
    """Linear interpolation weights from ``n_src`` samples at integer positions
    to ``coords`` (clamped to ``[0, n_src - 1]``)."""
    coords = np.clip(np.asarray(coords, dtype=float), 0.0, n_src - 1)
    M = np.zeros((len(coords), n_src))
    if n_src == 1:
        M[:, 0] = 1.0
        return M
    i0 = np.minimum(np.floor(coords).astype(int), n_src - 2)
    t = coords - i0
    rows = np.arange(len(coords))
    M[rows, i0] = 1.0 - t
    M[rows, i0 + 1] += t
    return M


def _apply_axis(A: np.ndarray, M: np.ndarray, axis: int) -> np.ndarray:
    return np.moveaxis(np.tensordot(M, A, axes=(1, axis)), 0, axis)


def _knot_matrices(shape, spacing):
    lat = lattice_shape(shape, spacing)
    return [interp_matrix(m, np.arange(n) / spacing) for n, m in zip(shape, lat)]


def control_to_field(D, shape, spacing: int = 4) -> np.ndarray:
    """Dense displacement ``(d, *shape)`` interpolated from knots ``D``."""
    D = np.asarray(D, dtype=float)
    shape = tuple(shape)
    if D.shape != (len(shape),) + lattice_shape(shape, spacing):
        raise FieldError(f"knot array {D.shape} does not cover image shape {shape}")
    T = D
    for axis, M in enumerate(_knot_matrices(shape, spacing)):
        T = _apply_axis(T, M, axis + 1)
    return T


def control_to_field_adjoint(G, shape, spacing: int = 4) -> np.ndarray:
    """Scatter a dense field gradient ``(d, *shape)`` back onto the knots."""
    out = np.asarray(G, dtype=float)
    for axis, M in enumerate(_knot_matrices(shape, spacing)):
        out = _apply_axis(out, M.T, axis + 1)
    return out


class Sampler:
    """Multilinear sampling of images at ``x + T(x)`` with clamped coordinates.

    ``grad`` gives the derivative of the sampled value with respect to the
    sample position; it is the exact derivative of the interpolant and is
    zero along axes where the position is clamped.
    """

    def __init__(self, T: np.ndarray):
        T = np.asarray(T, dtype=float)
        shape = T.shape[1:]
        d = len(shape)
        grids = np.meshgrid(*[np.arange(n, dtype=float) for n in shape], indexing="ij")
        self.shape = shape
        self.idx0 = []
        self.frac = []
        self.inside = []
        for a in range(d):
            p = grids[a] + T[a]
            n = shape[a]
            c = np.clip(p, 0.0, n - 1)
            self.inside.append((p >= 0) & (p <= n - 1))
            if n == 1:
                self.idx0.append(np.zeros(shape, dtype=int))
                self.frac.append(np.zeros(shape))
                continue
            i0 = np.minimum(np.floor(c).astype(int), n - 2)
            self.idx0.append(i0)
            self.frac.append(c - i0)
        self.corners = []
        for bits in product((0, 1), repeat=d):
            idx = tuple(
                np.minimum(self.idx0[a] + b, shape[a] - 1) for a, b in enumerate(bits)
            )
            w = np.ones(shape)
            for a, b in enumerate(bits):
                w = w * (self.frac[a] if b else 1.0 - self.frac[a])
            dw = []
            for a in range(d):
                g = np.ones(shape) if bits[a] else -np.ones(shape)
                for o, b in enumerate(bits):
                    if o != a:
                        g = g * (self.frac[o] if b else 1.0 - self.frac[o])
                dw.append(g * self.inside[a])
            self.corners.append((idx, w, dw))

    def value(self, f: np.ndarray) -> np.ndarray:
        out = np.zeros(self.shape)
        for idx, w, _ in self.corners:
            out += w * f[idx]
        return out

    def grad(self, f: np.ndarray) -> np.ndarray:
        out = np.zeros((len(self.shape),) + self.shape)
        for idx, _, dw in self.corners:
            v = f[idx]
            for a, g in enumerate(dw):
                out[a] += g * v
        return out

    def cells(self) -> tuple:
        """Cell index and clamp state per axis; piecewise-smooth regions."""
        return tuple(
            np.where(ins, i0, np.where(fr > 0.5, -2, -1))
            for i0, fr, ins in zip(self.idx0, self.frac, self.inside)
        )


def warp(f, T) -> np.ndarray:
    """``f(x + T(x))`` by multilinear interpolation with clamped coordinates."""
    f = check_field(f)
    T = np.asarray(T, dtype=float)
    if T.shape != (f.ndim,) + f.shape:
        raise FieldError(f"displacement {T.shape} does not match image {f.shape}")
    if not np.any(T):
        return f.copy()
    return Sampler(T).value(f)


def warp_channels(u, T) -> np.ndarray:
    s = Sampler(T)
    return np.stack([s.value(c) for c in u])


def warp_nearest(labels, T) -> np.ndarray:
    """Nearest-neighbour pull-back of an integer label map."""
    labels = np.asarray(labels)
    shape = labels.shape
    grids = np.meshgrid(*[np.arange(n, dtype=float) for n in shape], indexing="ij")
    idx = tuple(
        np.clip(np.floor(g + t + 0.5).astype(int), 0, n - 1)
        for g, t, n in zip(grids, T, shape)
    )
    return labels[idx]


def level_shapes(shape, levels: int, factor: float) -> list:
    out = []
    for j in range(levels):
        s = tuple(int(math.ceil(n * factor**j - 1e-9)) for n in shape)
        if min(s) < MIN_LEVEL_SIDE:
            logger.warning(
                "pyramid reduced from %d to %d levels (coarsest side >= %d)",
                levels, j, MIN_LEVEL_SIDE,
            )
            break
        out.append(s)
    if not out:
        out.append(tuple(shape))
    return out


def pyramid_sigma(factor: float) -> float:
    return 0.5 * math.sqrt(1.0 / factor**2 - 1.0)


def resample(f: np.ndarray, new_shape) -> np.ndarray:
    """Pixel-centre aligned multilinear resampling."""
    out = f
    for axis, (n_old, n_new) in enumerate(zip(f.shape, new_shape)):
        coords = (np.arange(n_new) + 0.5) * (n_old / n_new) - 0.5
        out = _apply_axis(out, interp_matrix(n_old, coords), axis)
    return out


def build_pyramid(f, levels: int, factor: float) -> list:
    """Gaussian pyramid, finest first.

    Level ``j`` has shape ``ceil(shape * factor**j)`` and is obtained from
    level ``j - 1`` by Gaussian smoothing with
    ``sigma = 0.5 * sqrt(1 / factor**2 - 1)`` followed by resampling.
    """
    f = check_field(f)
    shapes = level_shapes(f.shape, levels, factor)
    g = gaussian_kernel(pyramid_sigma(factor))
    out = [f]
    for s in shapes[1:]:
        out.append(resample(convolve(out[-1], g), s))
    return out


def build_prob_pyramid(u, levels: int, factor: float, floor: float = 0.0) -> list:
    """Pyramid of a probability stack, renormalized onto the simplex per level."""
    chans = [build_pyramid(c, levels, factor) for c in u]
    out = []
    for j in range(len(chans[0])):
        st = np.maximum(np.stack([c[j] for c in chans]), floor)
        out.append(st / st.sum(axis=0, keepdims=True))
    return out


def tikhonov(D, spacing: int):
    """Sum of squared knot forward differences scaled by ``spacing**(d - 2)``, and its gradient."""
    D = np.asarray(D, dtype=float)
    d = D.ndim - 1
    scale = float(spacing) ** (d - 2)
    e = 0.0
    g = np.zeros_like(D)
    for axis in range(1, D.ndim):
        diff = np.diff(D, axis=axis)
        e += float(np.sum(diff * diff))
        lo = [slice(None)] * D.ndim
        hi = [slice(None)] * D.ndim
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        g[tuple(hi)] += 2.0 * diff
        g[tuple(lo)] -= 2.0 * diff
    return scale * e, scale * g


def _check(name, value):
    if not np.all(np.isfinite(value)):
        raise FloatingPointError(f"non-finite value in registration term {name!r}")


def joint_T_energy_grad(
    D,
    fixed_corrected,
    moving,
    atlas,
    u,
    cfg: RegConfig,
    grouping: ClassGrouping | None = None,
    return_sampler: bool = False,
):
    """Energy and knot gradient of the registration subproblem.

    Energy is::

        -xi * sum_x sum_g P_g log(Q_g / Z)
        + zeta / 2 * sum_x (F - I_m(x + T))^2
        + eta / 2 * tikhonov(D)

    with ``P_g`` the summed memberships of segmentation group ``g``,
    ``Q_g`` the summed warped atlas channels of its atlas group and ``Z``
    the sum of all warped atlas channels. The identity grouping gives the
    per-class cross entropy.

    Returns
    -------
    EnergyBreakdown, ndarray of the same shape as ``D``
    """
    D = np.asarray(D, dtype=float)
    F = np.asarray(fixed_corrected, dtype=float)
    shape = F.shape
    T = control_to_field(D, shape, cfg.spacing)
    smp = Sampler(T)
    gT = np.zeros((len(shape),) + shape)
    out = EnergyBreakdown()

    if cfg.zeta > 0:
        J = smp.value(moving)
        r = J - F
        out.e_reg_fidelity = 0.5 * cfg.zeta * float(np.sum(r * r))
        _check("fidelity", out.e_reg_fidelity)
        gT += cfg.zeta * r * smp.grad(moving)

    if cfg.xi > 0 and atlas is not None and u is not None:
        atlas = np.asarray(atlas, dtype=float)
        u = np.asarray(u, dtype=float)
        grouping = grouping or ClassGrouping.identity(atlas.shape[0])
        S = np.stack([smp.value(c) for c in atlas])
        dS = np.stack([smp.grad(c) for c in atlas])
        Z = S.sum(axis=0)
        dZ = dS.sum(axis=0)
        e = 0.0
        for seg_ids, atl_ids in grouping.pairs:
            P = u[list(seg_ids)].sum(axis=0)
            Q = S[list(atl_ids)].sum(axis=0)
            dQ = dS[list(atl_ids)].sum(axis=0)
            e -= float(np.sum(P * (np.log(Q) - np.log(Z))))
            gT -= cfg.xi * P * (dQ / Q - dZ / Z)
        out.e_ce = cfg.xi * e
        _check("cross_entropy", out.e_ce)

    gD = control_to_field_adjoint(gT, shape, cfg.spacing)
    if cfg.eta > 0:
        tk, tg = tikhonov(D, cfg.spacing)
        out.e_reg_tikhonov = 0.5 * cfg.eta * tk
        gD += 0.5 * cfg.eta * tg
        _check("tikhonov", out.e_reg_tikhonov)
    _check("gradient", gD)
    if return_sampler:
        return out, gD, smp
    return out, gD


def _knot_coords(shape, spacing):
    return [np.arange(m) * spacing for m in lattice_shape(shape, spacing)]


def upsample_knots(D, src_shape, dst_shape, spacing: int) -> np.ndarray:
    """Evaluate the displacement of a ``src_shape`` grid at the knots of a
    ``dst_shape`` grid and rescale vectors to the destination pixel units."""
    D = np.asarray(D, dtype=float)
    src_lat = lattice_shape(src_shape, spacing)
    out = D
    for axis, (ns, nd, pk) in enumerate(
        zip(src_shape, dst_shape, _knot_coords(dst_shape, spacing))
    ):
        src_pix = (pk + 0.5) * (ns / nd) - 0.5
        out = _apply_axis(out, interp_matrix(src_lat[axis], src_pix / spacing), axis + 1)
    ratio = np.array([nd / ns for ns, nd in zip(src_shape, dst_shape)])
    return out * ratio.reshape((-1,) + (1,) * len(dst_shape))


def field_to_knots(T, dst_shape, spacing: int) -> np.ndarray:
    """Sample a dense field at the knots of a ``dst_shape`` grid (rescaled)."""
    T = np.asarray(T, dtype=float)
    src_shape = T.shape[1:]
    out = T
    for axis, (ns, nd, pk) in enumerate(
        zip(src_shape, dst_shape, _knot_coords(dst_shape, spacing))
    ):
        src_pix = (pk + 0.5) * (ns / nd) - 0.5
        out = _apply_axis(out, interp_matrix(ns, src_pix), axis + 1)
    ratio = np.array([nd / ns for ns, nd in zip(src_shape, dst_shape)])
    return out * ratio.reshape((-1,) + (1,) * len(dst_shape))


@dataclass
class RegResult:
    T: np.ndarray
    grid: ControlGrid
    energy: EnergyBreakdown
    trace: list = field(default_factory=list)


def register(
    fixed_corrected,
    moving,
    atlas=None,
    u=None,
    cfg: RegConfig | None = None,
    grouping: ClassGrouping | None = None,
    T_init=None,
    level_callback=None,
) -> RegResult:
    """Coarse-to-fine solve of the registration subproblem.

    Every input is reduced with a Gaussian pyramid; probability stacks are
    renormalized per level. The coarsest knot grid is seeded from
    ``T_init`` (zero by default) and each solution is upsampled to seed the
    next finer level. ``trace`` holds one record per level.
    """
    cfg = cfg or RegConfig()
    F = check_field(fixed_corrected, "fixed")
    Im = check_field(moving, "moving")
    if F.shape != Im.shape:
        raise FieldError("fixed and moving images differ in shape")
    use_ce = cfg.xi > 0 and atlas is not None and u is not None
    shapes = level_shapes(F.shape, cfg.levels, cfg.factor)
    n_lev = len(shapes)
    pf = build_pyramid(F, n_lev, cfg.factor)
    pm = build_pyramid(Im, n_lev, cfg.factor)
    if use_ce:
        atlas = np.maximum(np.asarray(atlas, dtype=float), cfg.atlas_floor)
        ps = build_prob_pyramid(atlas, n_lev, cfg.factor, cfg.atlas_floor)
        pu = build_prob_pyramid(u, n_lev, cfg.factor)
    trace = []
    D = None
    prev_shape = None
    for j in reversed(range(n_lev)):
        shape = shapes[j]
        if D is None:
            if T_init is None:
                D = np.zeros((len(shape),) + lattice_shape(shape, cfg.spacing))
            else:
                D = field_to_knots(T_init, shape, cfg.spacing)
        else:
            D = upsample_knots(D, prev_shape, shape, cfg.spacing)
        lvl_atlas = ps[j] if use_ce else None
        lvl_u = pu[j] if use_ce else None

        def fun(x, _F=pf[j], _M=pm[j], _s=lvl_atlas, _u=lvl_u, _shape=D.shape):
            e, g = joint_T_energy_grad(x.reshape(_shape), _F, _M, _s, _u, cfg, grouping)
            return e.total, g.ravel()

        res = lbfgs_minimize(fun, D.ravel(), cfg.lbfgs)
        D = res.x.reshape(D.shape)
        e, _ = joint_T_energy_grad(D, pf[j], pm[j], lvl_atlas, lvl_u, cfg, grouping)
        trace.append(
            {"level": j, "shape": shape, "n_iter": res.n_iter, "status": res.status, **e.as_row()}
        )
        if level_callback is not None:
            level_callback(j, D, shape)
        prev_shape = shape
    grid = ControlGrid(D, tuple(F.shape), cfg.spacing)
    final, _ = joint_T_energy_grad(
        D, F, Im, atlas if use_ce else None, u if use_ce else None, cfg, grouping
    )
    return RegResult(grid.field(), grid, final, trace)
