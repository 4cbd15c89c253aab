"""Exact minimization of a convex quadratic along a bound-projected path.

The path is ``(x + a*dx, clip(y + a*dy, lower, upper))`` for ``a >= 0``. It
is piecewise linear with a kink whenever a ``y`` component reaches its bound,
so the objective along it is piecewise quadratic. Breakpoints are visited in
increasing order and the first local minimizer is returned.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvariantViolation
from .qp_core import DisjointQP, Point, evaluate_gradient

__all__ = ["PathSearchResult", "breakpoints", "minimize_along_path", "path_point"]


@dataclass
class PathSearchResult:
    alpha: float
    point: Point
    segments: int
    hit: np.ndarray   # indices that reached a bound at or before ``alpha``


def breakpoints(y, dy, lower, upper=None) -> np.ndarray:
    """Step length at which each component of ``y + a*dy`` meets a bound.

    Components that never meet a bound get ``inf``. Negative values (from
    slightly infeasible input) are clipped to zero.
    """
    t = np.full(y.shape, np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        down = (dy < 0) & np.isfinite(lower)
        t[down] = (lower[down] - y[down]) / dy[down]
        if upper is not None:
            up = (dy > 0) & np.isfinite(upper)
            t[up] = (upper[up] - y[up]) / dy[up]
    return np.maximum(t, 0.0)


def path_point(pt: Point, dx, dy, alpha: float, lower, upper=None, t=None) -> Point:
    """Point on the projected path; components past their breakpoint sit exactly on the bound."""
    if t is None:
        t = breakpoints(pt.y, dy, lower, upper)
    y = pt.y + alpha * dy
    hit = t <= alpha
    low_hit = hit & (dy < 0)
    y[low_hit] = lower[low_hit]
    if upper is not None:
        up_hit = hit & (dy > 0)
        y[up_hit] = upper[up_hit]
    return Point(pt.x + alpha * dx, y)


def minimize_along_path(qp: DisjointQP, pt: Point, dx: np.ndarray, dy: np.ndarray,
                        grad=None) -> PathSearchResult:
    """First local minimizer of ``J`` along the projected path.

    Each segment costs one column update of ``P d`` per component that
    leaves the direction, so a search over ``k`` breakpoints costs
    ``O((n+p)^2 + k(n+p))`` after the initial product.
    """
    n = qp.n
    dx = np.asarray(dx, dtype=float)
    dy = np.asarray(dy, dtype=float).copy()
    upper = qp.upper
    t = breakpoints(pt.y, dy, qp.lower, upper)

    gx, gy = evaluate_gradient(qp, pt) if grad is None else grad
    if qp.m:
        # dx lies in null(A); dropping the range(A') part of gx leaves every
        # slope unchanged but avoids cancellation against a large A'w
        A = qp.A
        gx = gx - A.T @ np.linalg.solve(A @ A.T, A @ gx)
    g = np.concatenate([gx, gy])
    d = np.concatenate([dx, dy])
    Pd = qp.P @ d

    def drop(idx):
        cols = n + idx
        Pd[:] -= qp.P[:, cols] @ d[cols]
        d[cols] = 0.0

    dnorm0 = float(np.linalg.norm(d))
    # components already on a bound and pointing outwards never move
    drop(np.flatnonzero(t == 0.0))
    stops = np.unique(t[np.isfinite(t) & (t > 0.0)])
    start = 0.0
    segments = 0
    for bp in np.append(stops, np.inf):
        segments += 1
        if np.linalg.norm(d) <= 1e-14 * dnorm0:
            # what is left of the direction is rounding noise
            alpha = start
            break
        slope = float(g @ d)
        curv = float(d @ Pd)
        if slope >= 0.0:
            alpha = start
            break
        if curv > 0.0 and start - slope / curv <= bp:
            alpha = start - slope / curv
            break
        if not np.isfinite(bp):
            raise InvariantViolation(
                "objective decreases without bound along the projected path")
        g = g + (bp - start) * Pd
        drop(np.flatnonzero(t == bp))
        start = bp

    new = path_point(pt, dx, dy, alpha, qp.lower, upper, t)
    return PathSearchResult(float(alpha), new, segments, np.flatnonzero(t <= alpha))
