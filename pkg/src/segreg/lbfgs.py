"""Limited-memory BFGS with backtracking Armijo line search."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np


@dataclass
class LBFGSOptions:
    max_iter: int = 100
    memory: int = 10
    gtol: float = 1e-5
    ftol: float = 1e-8
    c1: float = 1e-4
    max_halvings: int = 40


@dataclass
class LBFGSResult:
    x: np.ndarray
    f: float
    grad: np.ndarray
    n_iter: int
    n_eval: int
    status: str
    history: list = field(default_factory=list)

    @property
    def success(self) -> bool:
        return self.status in ("gtol", "ftol")


def _two_loop(g, pairs):
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    if pairs:
        s, y, _ = pairs[-1]
        q *= (s @ y) / (y @ y)
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return -q


def lbfgs_minimize(fun, x0, opts: LBFGSOptions | None = None) -> LBFGSResult:
    """Minimize ``fun`` where ``fun(x)`` returns ``(value, gradient)``.

    Stops when the gradient max-norm falls below ``gtol`` (status ``"gtol"``),
    when the relative decrease falls below ``ftol`` (``"ftol"``), after
    ``max_iter`` iterations (``"max_iter"``), or when the line search fails
    to decrease the objective in ``max_halvings`` halvings
    (``"line_search_failed"``). Accepted iterates never increase ``fun``.
    """
    opts = opts or LBFGSOptions()
    x = np.array(x0, dtype=float).ravel()
    f, g = fun(x)
    g = np.asarray(g, dtype=float).ravel()
    n_eval = 1
    history = [float(f)]
    pairs: deque = deque(maxlen=opts.memory)
    status = "max_iter"
    it = 0
    if np.max(np.abs(g), initial=0.0) < opts.gtol:
        return LBFGSResult(x, float(f), g, 0, n_eval, "gtol", history)
    while it < opts.max_iter:
        d = _two_loop(g, pairs)
        slope = g @ d
        if not slope < 0:
            pairs.clear()
            d = -g
            slope = g @ d
        # first step without curvature information is capped at unit length
        step = 1.0 if pairs else min(1.0, 1.0 / np.max(np.abs(d)))
        accepted = False
        for _ in range(opts.max_halvings):
            x_new = x + step * d
            f_new, g_new = fun(x_new)
            n_eval += 1
            if np.isfinite(f_new) and f_new <= f + opts.c1 * step * slope:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            status = "line_search_failed"
            break
        g_new = np.asarray(g_new, dtype=float).ravel()
        s = x_new - x
        y = g_new - g
        sy = s @ y
        if sy > 1e-12 * np.sqrt((s @ s) * (y @ y)):
            pairs.append((s, y, 1.0 / sy))
        f_old = f
        x, f, g = x_new, f_new, g_new
        it += 1
        history.append(float(f))
        if np.max(np.abs(g)) < opts.gtol:
            status = "gtol"
            break
        if abs(f_old - f) <= opts.ftol * max(1.0, abs(f_old)):
            status = "ftol"
            break
    return LBFGSResult(x, float(f), g, it, n_eval, status, history)
