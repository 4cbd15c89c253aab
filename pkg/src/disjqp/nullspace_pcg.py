"""Nullspace-projected gradient-projection / conjugate-gradient method.

The equality constraints are eliminated by projecting every x-displacement
onto the nullspace of ``A``, which turns the problem into a bound-constrained
QP. Each outer iteration computes the generalized Cauchy point along the
projected steepest-descent arc and then runs conjugate gradients on faces
of decreasing dimension, fixing new bounds whenever CG runs into them.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg

from .errors import (ConvergenceError, DimensionError, InfeasibleStartError,
                     InvariantViolation, RankDeficientError)
from .pathsearch import minimize_along_path
from .qp_core import (DisjointQP, IterationRecord, Point, SolveTrace, at_lower,
                      at_upper, check_feasibility, evaluate_gradient,
                      evaluate_objective)

logger = logging.getLogger(__name__)

__all__ = [
    "NullspaceProjection",
    "Alg2Settings",
    "FaceState",
    "CGResult",
    "build_projection",
    "reduced_gradient",
    "cauchy_point",
    "cg_on_face",
    "solve_alg2",
]


class NullspaceProjection:
    """Orthogonal projector ``Z`` onto ``null(A)``.

    A single row ``a`` is handled as ``Z = I - a a' / |a|^2``; more rows go
    through an orthonormal basis ``Q`` of ``range(A')`` from a QR factorization,
    ``Z = I - Q Q'``.
    """

    def __init__(self, A: np.ndarray):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        m, n = A.shape
        self.n = n
        self.m = m
        self._A = A
        if m == 0:
            self._row = None
            self._Q = np.zeros((n, 0))
            return
        if m == 1:
            norm2 = float(A[0] @ A[0])
            if norm2 == 0.0:
                raise RankDeficientError("A is the zero row")
            self._row = A[0].copy()
            self._inv_norm2 = 1.0 / norm2
            self._Q = None
            return
        Q, R = np.linalg.qr(A.T)
        diag = np.abs(np.diag(R))
        if diag.min() <= max(m, n) * np.finfo(float).eps * diag.max():
            raise RankDeficientError("A does not have full row rank")
        self._row = None
        self._Q = Q

    def apply(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.shape[0] != self.n:
            raise DimensionError("projection input", (self.n,), v.shape)
        if self._row is not None:
            return v - np.multiply.outer(self._row, self._row @ v) * self._inv_norm2
        return v - self._Q @ (self._Q.T @ v)

    # Z is symmetric
    apply_transpose = apply
    __call__ = apply

    def matrix(self) -> np.ndarray:
        return self.apply(np.eye(self.n))

    def basis(self) -> np.ndarray:
        """Orthonormal basis of ``null(A)``, shape ``(n, n - m)``."""
        if self.m == 0:
            return np.eye(self.n)
        return scipy.linalg.null_space(self._A)


def build_projection(A) -> NullspaceProjection:
    return NullspaceProjection(A)


@dataclass(frozen=True)
class Alg2Settings:
    epsilon: float = 1e-8
    max_outer: int = 200
    max_cg_per_outer: Optional[int] = None
    cg_tol: float = 1e-10
    stop_on_single_face: bool = False
    max_cg_per_face: Optional[int] = None
    feasibility_tol: float = 1e-10
    preconditioner: Optional[Callable[[np.ndarray], np.ndarray]] = field(
        default=None, compare=False)

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.max_outer < 1:
            raise ValueError("max_outer must be >= 1")
        if self.max_cg_per_outer is not None and self.max_cg_per_outer < 1:
            raise ValueError("max_cg_per_outer must be >= 1 or None")


@dataclass
class FaceState:
    """Working face inside one outer iteration.

    ``free`` is the mask of y-indices still allowed to move; ``cauchy_active``
    holds the indices fixed at the Cauchy point, which stay fixed.
    """

    free: np.ndarray
    cauchy_active: np.ndarray
    cg_iters: int = 0
    faces: int = 0

    @property
    def size(self) -> int:
        return int(self.free.sum())


def reduced_gradient(qp: DisjointQP, Z: NullspaceProjection, pt: Point):
    gx, gy = evaluate_gradient(qp, pt)
    return Z.apply(gx), gy


def _bound_mask(qp: DisjointQP, y) -> np.ndarray:
    return at_lower(qp, y) | at_upper(qp, y)


def cauchy_point(qp: DisjointQP, Z: NullspaceProjection, pt: Point, grad=None):
    """Generalized Cauchy point along ``(x - a Z gx, P[y - a gy])``.

    Returns ``(cauchy_point, active_mask, alpha)``; a zero reduced gradient
    gives back ``pt`` with ``alpha = 0``.
    """
    gxt, gy = reduced_gradient(qp, Z, pt) if grad is None else grad
    if not (np.any(gxt) or np.any(gy)):
        return pt.copy(), _bound_mask(qp, pt.y), 0.0
    gx_full, _ = evaluate_gradient(qp, pt)
    res = minimize_along_path(qp, pt, -gxt, -gy, (gx_full, gy))
    new = Point(pt.x + res.alpha * -gxt, res.point.y)
    return new, _bound_mask(qp, new.y), res.alpha


@dataclass
class CGResult:
    point: Point
    iterations: int
    hit: np.ndarray
    reason: str          # "bound", "converged" or "budget"


def _identity(v):
    return v


def cg_on_face(qp: DisjointQP, Z: NullspaceProjection, pt: Point, free: np.ndarray,
               cg_tol: float = 1e-10, budget: Optional[int] = None,
               preconditioner=None) -> CGResult:
    """Conjugate gradients on the face where y-indices outside ``free`` are fixed.

    x-components of every direction are passed through ``Z``, so ``A x`` never
    changes. The run stops at the first bound encountered (the step is cut
    there and the indices reaching it are returned in ``hit``), when the
    residual falls below ``cg_tol`` times its initial norm, or after
    ``budget`` iterations.
    """
    n = qp.n
    M = preconditioner or _identity
    free = np.asarray(free, dtype=bool)
    lower, upper = qp.lower, qp.upper

    def project(vec):
        out = vec.copy()
        out[:n] = Z.apply(vec[:n])
        out[n:][~free] = 0.0
        return out

    x, y = pt.x.copy(), pt.y.copy()
    gx, gy = evaluate_gradient(qp, pt)
    r = -project(np.concatenate([gx, gy]))
    zvec = project(M(r))
    p = zvec.copy()
    rz = float(r @ zvec)
    r0 = float(np.linalg.norm(r))
    # below this the projected residual is rounding noise of the full gradient
    floor = 64 * np.finfo(float).eps * (1.0 + np.linalg.norm(gx) + np.linalg.norm(gy))
    tol = max(cg_tol * r0, floor)
    limit = budget if budget is not None else 10 * (n + qp.p) + 100
    it = 0
    if r0 <= floor:
        return CGResult(Point(x, y), 0, np.zeros(0, dtype=int), "converged")

    while True:
        if np.linalg.norm(r) <= tol:
            reason = "converged"
            break
        if it >= limit:
            reason = "budget"
            break
        q = qp.P @ p
        curv = float(p @ q)
        if curv <= 0.0:
            raise InvariantViolation(f"non-positive curvature {curv:.3e} in CG")
        a = rz / curv
        py = p[n:]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.full(qp.p, np.inf)
            down = free & (py < 0) & np.isfinite(lower)
            t[down] = (lower[down] - y[down]) / py[down]
            if upper is not None:
                up = free & (py > 0) & np.isfinite(upper)
                t[up] = (upper[up] - y[up]) / py[up]
        t = np.maximum(t, 0.0)
        tmin = float(t.min()) if qp.p else np.inf
        it += 1
        if tmin < a:
            hit = np.flatnonzero(t <= tmin * (1.0 + 1e-12))
            x = x + tmin * p[:n]
            y = y + tmin * py
            for i in hit:
                y[i] = lower[i] if py[i] < 0 else upper[i]
            return CGResult(Point(x, y), it, hit, "bound")
        x = x + a * p[:n]
        y = y + a * py
        r = r - a * project(q)
        zvec = project(M(r))
        rz_new = float(r @ zvec)
        p = zvec + (rz_new / rz) * p
        rz = rz_new

    return CGResult(Point(x, y), it, np.zeros(0, dtype=int), reason)


def _alg2_stationarity(qp, Z, pt, eps):
    gxt, gy = reduced_gradient(qp, Z, pt)
    lo = at_lower(qp, pt.y)
    up = at_upper(qp, pt.y) & ~lo
    bound = lo | up
    gnorm_y = float(np.linalg.norm(gy[~bound]))
    gnorm_x = float(np.linalg.norm(gxt))
    dual_ok = bool(np.all(gy[lo] >= -eps) and np.all(gy[up] <= eps))
    return gxt, gy, bound, gnorm_y, gnorm_x, dual_ok


def solve_alg2(qp: DisjointQP, start: Point, settings: Alg2Settings = Alg2Settings(),
               keep_iterates: bool = True):
    """Run the projected algorithm from a feasible ``start``.

    Terminates when the free y-gradient and the projected x-gradient are both
    below ``epsilon`` and every fixed bound has a multiplier of the right sign.
    With ``stop_on_single_face`` the run also ends after an outer iteration in
    which CG never met a bound. Returns ``(solution, trace)``.
    """
    feas = check_feasibility(qp, start, settings.feasibility_tol)
    if not feas.feasible:
        raise InfeasibleStartError(
            f"start is infeasible: |Ax-b|={feas.equality_residual:.3e}, "
            f"bound margin={feas.bound_margin:.3e}")
    eps = settings.epsilon
    Z = build_projection(qp.A)
    trace = SolveTrace("alg2")
    pt = start.copy()
    J = evaluate_objective(qp, pt)
    budget_total = settings.max_cg_per_outer

    for k in range(settings.max_outer + 1):
        gxt, gy, bound, gny, gnx, dual_ok = _alg2_stationarity(qp, Z, pt, eps)
        if gny <= eps and gnx <= eps and dual_ok:
            trace.status = "converged"
            return pt, trace
        if k == settings.max_outer:
            break

        cp, active_c, alpha = cauchy_point(qp, Z, pt, (gxt, gy))
        face = FaceState(free=~active_c, cauchy_active=active_c.copy())
        cur = cp
        while True:
            remaining = None if budget_total is None else budget_total - face.cg_iters
            if remaining is not None and remaining <= 0:
                break
            if settings.max_cg_per_face is not None:
                remaining = settings.max_cg_per_face if remaining is None else \
                    min(remaining, settings.max_cg_per_face)
            res = cg_on_face(qp, Z, cur, face.free, settings.cg_tol, remaining,
                             settings.preconditioner)
            face.faces += 1
            face.cg_iters += res.iterations
            cur = res.point
            if res.reason != "bound":
                break
            face.free[res.hit] = False

        J_new = evaluate_objective(qp, cur)
        if J_new > J + 1e-14 * abs(J):
            raise InvariantViolation(f"objective increased: {J!r} -> {J_new!r}")
        pt, J = cur, J_new

        _, gy1 = evaluate_gradient(qp, pt)
        free1 = ~_bound_mask(qp, pt.y)
        trace.append(IterationRecord(
            iteration=k + 1, objective=J, complement_size=int(free1.sum()),
            reduced_grad_norm=float(np.linalg.norm(gy1[free1])), alpha=alpha,
            cg_iters=face.cg_iters, faces=face.faces,
            x=pt.x.copy() if keep_iterates else None,
            y=pt.y.copy() if keep_iterates else None))

        if settings.stop_on_single_face and face.faces == 1:
            trace.status = "single_face"
            return pt, trace

    trace.status = "max_outer"
    raise ConvergenceError(
        f"alg2 did not converge in {settings.max_outer} outer iterations", trace, pt)
