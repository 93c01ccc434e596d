"""Bias-corrected local Gaussian-mixture segmentation.

The discrete energy minimized here is::

    E(theta, u) = sum_x sum_y W[y, x] sum_k u_k(x) d_k(x, y)
                  + eps * sum_x sum_k u_k log u_k
                  + lam * sum_x sum_k u_k (omega * (1 - u_k))
                  - xi * sum_x sum_k u_k log prior_k          (optional)
                  + zeta / 2 * sum_x (I / beta - J)^2          (optional)

with ``d_k(x, y) = (I(x) / beta(y) - c_k)^2 / (2 var_k) - log gamma_k
+ log sqrt(2 pi var_k) + log beta(y)``. ``W`` is the Gaussian smoothing
operator, ``J`` the warped moving image. Every update below is the exact
minimizer of its block, so the energy never increases.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from segreg.core import (
    FieldError,
    Kernel,
    box_kernel,
    check_field,
    check_soft,
    convolve,
    gaussian_kernel,
    one_hot,
    softmax,
)

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


class DegenerateInputError(ValueError):
    """Raised when an image cannot support the requested number of classes."""


@dataclass
class SegConfig:
    n_classes: int = 3
    sigma: float = 20.0
    epsilon: float = 1.0
    lam: float = 0.5
    omega_side: int = 7
    zeta: float = 1.0
    max_iter: int = 100
    tol: float = 1e-5
    var_floor: float = 1e-6
    weight_floor: float = 1e-8
    bias_floor: float = 1e-3
    prior_floor: float = 1e-8
    update_bias: bool = True

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        for name in ("lam", "zeta", "tol", "var_floor", "weight_floor", "bias_floor", "prior_floor"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        box_kernel(self.omega_side)

    @property
    def g_kernel(self) -> Kernel:
        return gaussian_kernel(self.sigma)

    @property
    def omega(self) -> Kernel:
        return box_kernel(self.omega_side)


@dataclass
class MixtureParams:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    @property
    def n_classes(self) -> int:
        return len(self.weights)

    def copy(self) -> "MixtureParams":
        return MixtureParams(self.weights.copy(), self.means.copy(), self.variances.copy())


@dataclass
class SegEnergy:
    """Terms of the segmentation-step energy."""

    data: float
    entropy: float
    reg: float
    ce: float = 0.0
    fidelity: float = 0.0

    @property
    def e_seg(self) -> float:
        return self.data + self.entropy + self.reg

    @property
    def total(self) -> float:
        return self.data + self.entropy + self.reg + self.ce + self.fidelity


@dataclass
class LGMMResult:
    u: np.ndarray
    params: MixtureParams
    beta: np.ndarray
    trace: list = field(default_factory=list)
    n_iter: int = 0
    converged: bool = False


def kmeans_init(image, n_classes: int, seed: int = 0, max_iter: int = 1000) -> np.ndarray:
    """Hard memberships from 1-D k-means on the intensities.

    Centers start at the ``(i + 1/2) / K`` intensity quantiles; the returned
    classes are ordered by ascending center.
    """
    image = check_field(image, "image")
    x = image.ravel()
    distinct = np.unique(x)
    if len(distinct) < n_classes:
        raise DegenerateInputError(
            f"image has {len(distinct)} distinct intensities, need {n_classes}"
        )
    centers = kmeans_centers_init(x, n_classes, seed)
    labels = _assign(x, centers)
    for _ in range(max_iter):
        for k in range(n_classes):
            sel = labels == k
            if sel.any():
                centers[k] = x[sel].mean()
        order = np.argsort(centers, kind="stable")
        centers = centers[order]
        new = _assign(x, centers)
        if np.array_equal(new, labels):
            break
        labels = new
    return one_hot(labels.reshape(image.shape), n_classes)


def kmeans_centers_init(x: np.ndarray, n_classes: int, seed: int = 0) -> np.ndarray:
    """Evenly spaced quantiles; duplicates replaced by seeded distinct draws."""
    q = (np.arange(n_classes) + 0.5) / n_classes
    centers = np.quantile(x, q)
    uniq, first = np.unique(centers, return_index=True)
    if len(uniq) < n_classes:
        rng = np.random.default_rng(seed)
        pool = np.setdiff1d(np.unique(x), uniq)
        extra = rng.choice(pool, n_classes - len(uniq), replace=False)
        centers = np.concatenate([uniq, extra])
    return np.sort(centers)


def _assign(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # centers sorted; a value exactly on a midpoint goes to the lower class
    mids = 0.5 * (centers[1:] + centers[:-1])
    return np.searchsorted(mids, x, side="left")


def _inverse_moments(beta: np.ndarray, g: Kernel):
    """``W(1/beta)`` and ``W(1/beta^2)``."""
    inv = 1.0 / beta
    return convolve(inv, g), convolve(inv * inv, g)


def _local_sq_dev(image, m1, m2, c):
    """``sum_y W[y, x] (I(x) / beta(y) - c)^2`` per pixel."""
    return image * image * m2 - 2.0 * c * image * m1 + c * c


def update_mixture_params(
    image,
    u,
    beta_prev,
    warped_moving=None,
    cfg: SegConfig | None = None,
    prev: MixtureParams | None = None,
):
    """Closed-form mixture-parameter and bias update.

    Weights, means and variances are the exact minimizers given ``u`` and
    ``beta_prev``; the bias is then the exact minimizer given the new
    parameters, i.e. the positive root of
    ``beta^2 + (s + p) beta - (v + zeta I^2) = 0``.

    Parameters
    ----------
    image : array
        Observed fixed image ``I_f``.
    u : array, shape (K, *shape)
    beta_prev : array
        Current bias field, strictly positive.
    warped_moving : array, optional
        ``I_m(x + T(x))``. When given, the registration fidelity term
        (weight ``cfg.zeta``) enters the bias update.
    cfg : SegConfig
    prev : MixtureParams, optional
        Parameters kept for a class whose membership mass vanishes.

    Returns
    -------
    params : MixtureParams
    beta : array
    """
    cfg = cfg or SegConfig(n_classes=np.asarray(u).shape[0])
    image = check_field(image, "image")
    u = np.asarray(u, dtype=float)
    beta_prev = np.asarray(beta_prev, dtype=float)
    if np.any(beta_prev <= 0):
        raise FieldError("bias field must be strictly positive")
    g = cfg.g_kernel
    n_pix = image.size
    n_classes = u.shape[0]
    m1, m2 = _inverse_moments(beta_prev, g)

    mass = u.reshape(n_classes, -1).sum(axis=1)
    flat_u = u.reshape(n_classes, -1)
    a = (image * m1).ravel()
    b = (image * image * m2).ravel()
    weights = mass / n_pix
    means = np.empty(n_classes)
    variances = np.empty(n_classes)
    for k in range(n_classes):
        if mass[k] <= 1e-12 * n_pix:
            logger.warning("class %d is empty; keeping previous parameters", k)
            if prev is not None:
                means[k], variances[k] = prev.means[k], prev.variances[k]
            else:
                means[k], variances[k] = float(a.mean()), max(float(image.var()), cfg.var_floor)
            weights[k] = cfg.weight_floor
            continue
        c = flat_u[k] @ a / mass[k]
        means[k] = c
        variances[k] = (flat_u[k] @ b - 2.0 * c * (flat_u[k] @ a)) / mass[k] + c * c
    variances = np.maximum(variances, cfg.var_floor)
    weights = np.maximum(weights, cfg.weight_floor)
    weights = weights / weights.sum()
    params = MixtureParams(weights, means, variances)

    if not cfg.update_bias:
        return params, beta_prev.copy()
    beta = solve_bias(image, u, params, cfg, warped_moving)
    return params, beta


def solve_bias(image, u, params: MixtureParams, cfg: SegConfig, warped_moving=None):
    g = cfg.g_kernel
    ck = (params.means / params.variances).reshape((-1,) + (1,) * image.ndim)
    ik = (1.0 / params.variances).reshape((-1,) + (1,) * image.ndim)
    s = convolve(image * (ck * u).sum(axis=0), g)
    v = convolve(image * image * (ik * u).sum(axis=0), g)
    if warped_moving is not None and cfg.zeta > 0:
        p = cfg.zeta * image * np.asarray(warped_moving, dtype=float)
        v = v + cfg.zeta * image * image
        s = s + p
    disc = np.sqrt(s * s + 4.0 * v)
    # both branches are the "+sqrt" root; the split avoids cancellation
    with np.errstate(divide="ignore", invalid="ignore"):
        beta = np.where(s >= 0, 2.0 * v / (s + disc), 0.5 * (disc - s))
    beta = np.where(np.isfinite(beta), beta, 0.0)
    return np.maximum(beta, cfg.bias_floor)


def data_costs(image, params: MixtureParams, beta, g: Kernel) -> np.ndarray:
    """Per-class data cost ``sum_y W[y, x] d_k(x, y)`` without the ``log beta`` part."""
    m1, m2 = _inverse_moments(beta, g)
    out = np.empty((params.n_classes,) + image.shape)
    for k in range(params.n_classes):
        var = params.variances[k]
        out[k] = (
            _local_sq_dev(image, m1, m2, params.means[k]) / (2.0 * var)
            - math.log(params.weights[k])
            + 0.5 * (math.log(var) + LOG_2PI)
        )
    return out


def update_memberships(
    image,
    params: MixtureParams,
    beta,
    u_prev,
    prior=None,
    cfg: SegConfig | None = None,
    xi: float = 0.0,
) -> np.ndarray:
    """Closed-form membership update with the regularizer linearized at ``u_prev``.

    ``u_k`` is proportional to::

        (gamma_k / sigma_k)^(1/eps) * prior_k^(xi/eps)
        * exp(-local_dev_k / (2 eps var_k) - lam/eps * omega * (1 - 2 u_prev_k))

    and is evaluated as a max-subtracted softmax in log space.
    """
    cfg = cfg or SegConfig(n_classes=params.n_classes)
    image = check_field(image, "image")
    u_prev = np.asarray(u_prev, dtype=float)
    cost = data_costs(image, params, np.asarray(beta, dtype=float), cfg.g_kernel)
    if cfg.lam > 0:
        om = cfg.omega
        cost += cfg.lam * np.stack([convolve(1.0 - 2.0 * uk, om) for uk in u_prev])
    if prior is not None and xi > 0:
        cost -= xi * np.log(np.maximum(np.asarray(prior, dtype=float), cfg.prior_floor))
    return softmax(-cost / cfg.epsilon, axis=0)


def threshold_dynamics(u, omega: Kernel) -> float:
    """Exact regularizer ``sum_x sum_k u_k (omega * (1 - u_k))``."""
    return float(sum(np.sum(uk * convolve(1.0 - uk, omega)) for uk in u))


def entropy(u) -> float:
    u = np.asarray(u, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(u > 0, u * np.log(u), 0.0)
    return float(t.sum())


def segmentation_energy(
    image,
    u,
    params: MixtureParams,
    beta,
    cfg: SegConfig,
    prior=None,
    xi: float = 0.0,
    warped_moving=None,
) -> SegEnergy:
    """Evaluate the segmentation-step energy with the exact (quadratic) regularizer."""
    image = check_field(image, "image")
    u = np.asarray(u, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if u.shape[1:] != image.shape or beta.shape != image.shape:
        raise FieldError("inconsistent shapes between image, u and beta")
    g = cfg.g_kernel
    cost = data_costs(image, params, beta, g)
    log_beta = convolve(np.log(beta), g)
    data = float(np.sum(u * cost) + np.sum(u.sum(axis=0) * log_beta))
    ent = cfg.epsilon * entropy(u)
    reg = cfg.lam * threshold_dynamics(u, cfg.omega) if cfg.lam > 0 else 0.0
    ce = 0.0
    if prior is not None and xi > 0:
        lp = np.log(np.maximum(np.asarray(prior, dtype=float), cfg.prior_floor))
        ce = -xi * float(np.sum(u * lp))
    fid = 0.0
    if warped_moving is not None and cfg.zeta > 0:
        fid = 0.5 * cfg.zeta * float(np.sum((image / beta - warped_moving) ** 2))
    return SegEnergy(data, ent, reg, ce, fid)


def lgmm_solve(
    image,
    u0,
    beta0=None,
    cfg: SegConfig | None = None,
    prior=None,
    warped_moving=None,
    xi: float = 0.0,
    params0: MixtureParams | None = None,
) -> LGMMResult:
    """Alternate the parameter and membership updates.

    Stops after ``cfg.max_iter`` alternations or when the relative energy
    change drops below ``cfg.tol``. ``trace`` holds the energy after every
    alternation.
    """
    u = check_soft(u0, "u0").copy()
    cfg = cfg or SegConfig(n_classes=u.shape[0])
    image = check_field(image, "image")
    beta = np.ones_like(image) if beta0 is None else np.asarray(beta0, dtype=float).copy()
    params = params0
    res = LGMMResult(u, params, beta)
    prev_e = None
    for it in range(cfg.max_iter):
        params, beta = update_mixture_params(image, u, beta, warped_moving, cfg, prev=params)
        u = update_memberships(image, params, beta, u, prior, cfg, xi)
        e = segmentation_energy(image, u, params, beta, cfg, prior, xi, warped_moving)
        if not math.isfinite(e.total):
            raise FloatingPointError(f"segmentation energy became non-finite at iteration {it}")
        res.trace.append(e)
        res.n_iter = it + 1
        if prev_e is not None and abs(prev_e - e.total) <= cfg.tol * abs(prev_e):
            res.converged = True
            break
        prev_e = e.total
    res.u, res.params, res.beta = u, params, beta
    return res
