"""Overlap and surface-distance metrics for label maps."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree


def _pair(X, Y):
    X = np.asarray(X, dtype=bool)
    Y = np.asarray(Y, dtype=bool)
    if X.shape != Y.shape:
        raise ValueError(f"mask shapes differ: {X.shape} vs {Y.shape}")
    return X, Y


def modified_jaccard(X, Y) -> float:
    """``|X & Y| / (|X| + |Y| - |X & Y|)``; two empty masks score 1."""
    X, Y = _pair(X, Y)
    inter = int(np.count_nonzero(X & Y))
    denom = int(np.count_nonzero(X)) + int(np.count_nonzero(Y)) - inter
    return 1.0 if denom == 0 else inter / denom


def dice(X, Y) -> float:
    """``2 |X & Y| / (|X| + |Y|)``; two empty masks score 1."""
    X, Y = _pair(X, Y)
    inter = int(np.count_nonzero(X & Y))
    denom = int(np.count_nonzero(X)) + int(np.count_nonzero(Y))
    return 1.0 if denom == 0 else 2.0 * inter / denom


def boundary(mask) -> np.ndarray:
    """Mask pixels with a face neighbour outside the mask (or outside the grid)."""
    mask = np.asarray(mask, dtype=bool)
    st = ndimage.generate_binary_structure(mask.ndim, 1)
    return mask & ~ndimage.binary_erosion(mask, structure=st, border_value=0)


def average_surface_distance(X, Y) -> float:
    """Symmetric mean nearest-neighbour distance between the two boundaries, in pixels."""
    X, Y = _pair(X, Y)
    bx = np.argwhere(boundary(X)).astype(float)
    by = np.argwhere(boundary(Y)).astype(float)
    if len(bx) == 0:
        raise ValueError("average_surface_distance: first mask has an empty boundary")
    if len(by) == 0:
        raise ValueError("average_surface_distance: second mask has an empty boundary")
    dxy, _ = cKDTree(by).query(bx)
    dyx, _ = cKDTree(bx).query(by)
    return float((dxy.sum() + dyx.sum()) / (len(bx) + len(by)))


@dataclass
class MetricReport:
    classes: list
    mj: list
    dsc: list
    asd: list
    extra: dict = field(default_factory=dict)

    def mean_std(self, name: str):
        v = np.asarray(getattr(self, name), dtype=float)
        v = v[np.isfinite(v)]
        if len(v) == 0:
            return float("nan"), float("nan")
        return float(v.mean()), float(v.std())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "mJ", "DSC", "ASD"])
        for c, a, b, d in zip(self.classes, self.mj, self.dsc, self.asd):
            w.writerow([c, f"{a:.6f}", f"{b:.6f}", f"{d:.6f}"])
        cells = []
        for name in ("mj", "dsc", "asd"):
            m, s = self.mean_std(name)
            cells.append(f"{m:.6f}+-{s:.6f}")
        w.writerow(["mean+-std", *cells])
        return buf.getvalue()


def class_report(pred, truth, classes=None) -> MetricReport:
    """Per-class mJ / DSC / ASD of ``pred`` against ``truth``.

    ASD is ``nan`` for a class whose boundary is empty in either map.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if classes is None:
        classes = sorted(set(np.unique(truth).tolist()))
    mj, dsc, asd = [], [], []
    for k in classes:
        X, Y = pred == k, truth == k
        mj.append(modified_jaccard(X, Y))
        dsc.append(dice(X, Y))
        try:
            asd.append(average_surface_distance(X, Y))
        except ValueError:
            asd.append(float("nan"))
    return MetricReport(list(classes), mj, dsc, asd)


def best_label_permutation(pred, truth, n_pred: int, n_truth: int) -> np.ndarray:
    """Relabel ``pred`` to maximize total Dice against ``truth`` (Hungarian matching).

    Unmatched predicted classes map to ``-1``.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    score = np.zeros((n_pred, n_truth))
    for i in range(n_pred):
        for j in range(n_truth):
            score[i, j] = dice(pred == i, truth == j)
    rows, cols = linear_sum_assignment(-score)
    lut = np.full(n_pred, -1, dtype=np.int64)
    lut[rows] = cols
    return lut[pred]
