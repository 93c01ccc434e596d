"""Grid containers, kernels, convolution and simplex helpers.

Scalar fields are plain ``numpy`` arrays of shape ``(n0, n1[, n2])``. Soft
segmentations are arrays of shape ``(K, n0, n1[, n2])`` whose channels sum to
one at every pixel. Label maps are integer arrays with the image shape.

All convolutions extend the grid by half-sample mirror reflection
(``d c b a | a b c d | d c b a``). With a symmetric, normalized kernel this
makes the discrete operator symmetric and doubly stochastic, which the
closed-form segmentation updates rely on.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import fft as sp_fft
from scipy import ndimage

logger = logging.getLogger(__name__)

SIMPLEX_ATOL = 1e-9


class FieldError(ValueError):
    """Raised for malformed or non-finite field data."""


@dataclass(frozen=True)
class Kernel:
    """Separable, isotropic, normalized smoothing kernel.

    The same 1-D ``taps`` are applied along every axis, so the d-dimensional
    weights are the outer product of ``taps`` with itself.
    """

    kind: str
    param: float
    taps: np.ndarray

    @property
    def radius(self) -> int:
        return (len(self.taps) - 1) // 2

    def weights(self, ndim: int) -> np.ndarray:
        w = self.taps
        for _ in range(ndim - 1):
            w = np.multiply.outer(w, self.taps)
        return w


def gaussian_kernel(sigma: float) -> Kernel:
    """Gaussian kernel truncated at radius ``ceil(3 sigma)`` and renormalized."""
    if not sigma > 0:
        raise ValueError(f"gaussian sigma must be positive, got {sigma}")
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=float)
    taps = np.exp(-0.5 * (x / sigma) ** 2)
    taps /= taps.sum()
    return Kernel("gaussian", float(sigma), taps)


def box_kernel(side: int) -> Kernel:
    """Equal-weight kernel of odd ``side`` pixels per axis."""
    side = int(side)
    if side < 1 or side % 2 == 0:
        raise ValueError(f"box side must be a positive odd integer, got {side}")
    return Kernel("box", float(side), np.full(side, 1.0 / side))


def check_field(f, name: str = "field") -> np.ndarray:
    f = np.asarray(f, dtype=float)
    if f.ndim not in (2, 3):
        raise FieldError(f"{name}: expected a 2-D or 3-D grid, got shape {f.shape}")
    if not np.all(np.isfinite(f)):
        raise FieldError(f"{name}: contains non-finite values")
    return f


def check_soft(u, name: str = "segmentation", atol: float = SIMPLEX_ATOL) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.ndim not in (3, 4) or u.shape[0] < 2:
        raise FieldError(f"{name}: expected (K>=2, *shape), got {u.shape}")
    if not np.all(np.isfinite(u)):
        raise FieldError(f"{name}: contains non-finite values")
    if u.min() < -atol or u.max() > 1 + atol:
        raise FieldError(f"{name}: values outside [0, 1]")
    if np.abs(u.sum(axis=0) - 1.0).max() > atol:
        raise FieldError(f"{name}: channels do not sum to one")
    return u


def convolve(f, kernel: Kernel, method: str = "spatial") -> np.ndarray:
    """Smooth ``f`` with ``kernel`` under mirror-reflected boundaries.

    Parameters
    ----------
    f : array, shape (n0, n1[, n2])
    kernel : Kernel
    method : {"spatial", "fft"}
        ``spatial`` runs separable 1-D passes; ``fft`` pads the grid by
        reflection and multiplies spectra. Both give the same operator.
    """
    f = check_field(f)
    if method == "spatial":
        out = f
        for axis in range(f.ndim):
            out = ndimage.correlate1d(out, kernel.taps, axis=axis, mode="reflect")
        return out
    if method == "fft":
        r = kernel.radius
        padded = np.pad(f, r, mode="symmetric")
        w = kernel.weights(f.ndim)
        shape = [p + s - 1 for p, s in zip(padded.shape, w.shape)]
        spec = sp_fft.rfftn(padded, shape) * sp_fft.rfftn(w, shape)
        full = sp_fft.irfftn(spec, shape)
        sl = tuple(slice(2 * r, 2 * r + n) for n in f.shape)
        return full[sl]
    raise ValueError(f"unknown convolution method {method!r}")


def convolve_channels(u: np.ndarray, kernel: Kernel) -> np.ndarray:
    """Apply :func:`convolve` to each channel of a ``(K, *shape)`` stack."""
    return np.stack([convolve(c, kernel) for c in u])


def normalize_intensity(f) -> np.ndarray:
    """Affine map of ``f`` onto ``[0, 1]`` (min to 0, max to 1)."""
    f = check_field(f)
    lo, hi = f.min(), f.max()
    if hi - lo <= 0:
        logger.warning("normalize_intensity: constant input, returning zeros")
        return np.zeros_like(f)
    return (f - lo) / (hi - lo)


def argmax_label(u) -> np.ndarray:
    """Per-pixel index of the largest channel; ties go to the lowest index."""
    return np.argmax(np.asarray(u), axis=0).astype(np.int64)


def one_hot(labels, n_classes: int | None = None) -> np.ndarray:
    labels = np.asarray(labels)
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(labels == np.round(labels)):
            raise FieldError("label map contains non-integer values")
        labels = labels.astype(np.int64)
    if labels.size and labels.min() < 0:
        raise FieldError("label map contains negative ids")
    k = int(labels.max()) + 1 if n_classes is None else int(n_classes)
    if labels.size and labels.max() >= k:
        raise FieldError(f"label id {labels.max()} out of range for {k} classes")
    return (np.arange(k).reshape((k,) + (1,) * labels.ndim) == labels).astype(float)


def renormalize(u: np.ndarray, floor: float = 0.0) -> np.ndarray:
    """Clamp channels at ``floor`` and rescale them onto the simplex."""
    u = np.maximum(u, floor)
    return u / u.sum(axis=0, keepdims=True)


def softmax(logits: np.ndarray, axis: int = 0) -> np.ndarray:
    """Max-subtracted softmax; never overflows or returns NaN for finite input."""
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def smooth_max(z, eps: float = 1.0, axis: int = 0):
    """``eps * log(sum_k exp(z_k / eps))``.

    This is the maximum over the simplex of ``<z, u> - eps * sum_k u_k log u_k``;
    the maximizer is ``softmax(z / eps)``.
    """
    z = np.asarray(z, dtype=float)
    m = z.max(axis=axis, keepdims=True)
    out = m + eps * np.log(np.exp((z - m) / eps).sum(axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


@dataclass(frozen=True)
class ClassGrouping:
    """Pairs of (segmentation class ids, atlas class ids) coupled as groups.

    The segmentation groups partition ``range(n_seg)`` and the atlas groups
    partition ``range(n_atlas)``.
    """

    n_seg: int
    n_atlas: int
    pairs: tuple

    def __post_init__(self):
        pairs = tuple((tuple(sorted(a)), tuple(sorted(b))) for a, b in self.pairs)
        object.__setattr__(self, "pairs", pairs)
        if len(pairs) < 2:
            raise ValueError("a grouping needs at least two groups")
        seg = [i for a, _ in pairs for i in a]
        atl = [i for _, b in pairs for i in b]
        if sorted(seg) != list(range(self.n_seg)):
            raise ValueError(f"segmentation groups do not partition range({self.n_seg})")
        if sorted(atl) != list(range(self.n_atlas)):
            raise ValueError(f"atlas groups do not partition range({self.n_atlas})")

    @classmethod
    def identity(cls, n: int) -> "ClassGrouping":
        return cls(n, n, tuple(((k,), (k,)) for k in range(n)))

    @classmethod
    def parse(cls, text: str, n_seg: int, n_atlas: int) -> "ClassGrouping":
        """Parse ``"1:0,1,2;0,2:3"`` (seg ids ``:`` atlas ids, groups ``;``-separated)."""
        pairs = []
        for part in text.split(";"):
            lhs, rhs = part.split(":")
            pairs.append(
                (tuple(int(s) for s in lhs.split(",")), tuple(int(s) for s in rhs.split(",")))
            )
        return cls(n_seg, n_atlas, tuple(pairs))

    def format(self) -> str:
        return ";".join(
            ",".join(map(str, a)) + ":" + ",".join(map(str, b)) for a, b in self.pairs
        )

    @property
    def is_identity(self) -> bool:
        return self.n_seg == self.n_atlas and all(
            a == b and len(a) == 1 for a, b in self.pairs
        )

    def class_to_group(self) -> np.ndarray:
        out = np.empty(self.n_seg, dtype=int)
        for g, (a, _) in enumerate(self.pairs):
            out[list(a)] = g
        return out
