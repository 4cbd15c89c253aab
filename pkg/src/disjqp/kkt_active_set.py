"""Active-set method with exact KKT search directions.

Each outer iteration freezes the bound indices that sit on their bound with
a gradient pointing outwards, solves the saddle-point system for a Newton
step on the remaining variables (keeping ``A s = 0``), and then minimizes
exactly along the bound-projected step.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.linalg import lapack

from .errors import (ConvergenceError, InfeasibleStartError, InvariantViolation,
                     RankDeficientError, SingularKKTError)
from .pathsearch import minimize_along_path
from .qp_core import (ActiveSet, DisjointQP, IterationRecord, Point, SolveTrace,
                      build_active_set, check_feasibility, evaluate_gradient,
                      evaluate_objective)

logger = logging.getLogger(__name__)

__all__ = [
    "Alg1Settings",
    "KKTSystem",
    "KKTSolution",
    "assemble_kkt",
    "solve_kkt",
    "projected_line_search",
    "find_feasible_start",
    "solve_alg1",
]

EPS = np.finfo(float).eps


@dataclass(frozen=True)
class Alg1Settings:
    epsilon: float = 1e-8
    max_outer: int = 50
    bound_tol: float | None = None
    equality_refine: bool = True
    feasibility_tol: float = 1e-10

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.max_outer < 1:
            raise ValueError("max_outer must be >= 1")


@dataclass(frozen=True, eq=False)
class KKTSystem:
    matrix: np.ndarray
    rhs: np.ndarray
    n: int
    k: int      # number of free y components
    m: int


@dataclass(frozen=True, eq=False)
class KKTSolution:
    s: np.ndarray
    v: np.ndarray      # full length p, zero on active indices
    w: np.ndarray
    residual: float    # |K sol - rhs|_inf after refinement
    rcond: float


def assemble_kkt(qp: DisjointQP, aset: ActiveSet, grad_x, grad_y,
                 eq_residual=None) -> KKTSystem:
    """Saddle-point matrix and right-hand side on the free y-indices.

    The last block row asks for ``A s = eq_residual`` (zero by default, which
    keeps a feasible iterate feasible).
    """
    free = aset.complement
    n, m, k = qp.n, qp.m, free.size
    Pxy = qp.P_xy[:, free]
    K = np.zeros((n + k + m, n + k + m))
    K[:n, :n] = qp.P_xx
    K[:n, n:n + k] = Pxy
    K[n:n + k, :n] = Pxy.T
    K[n:n + k, n:n + k] = qp.P_yy[np.ix_(free, free)]
    K[:n, n + k:] = qp.A.T
    K[n + k:, :n] = qp.A
    r = np.zeros(m) if eq_residual is None else np.asarray(eq_residual, dtype=float)
    rhs = np.concatenate([-np.asarray(grad_x), -np.asarray(grad_y)[free], r])
    return KKTSystem(K, rhs, n, k, m)


def _project_out(A, s, target=None):
    """Correct ``s`` along range(A') so that ``A s`` equals ``target`` to roundoff."""
    if A.shape[0] == 0:
        return s
    defect = A @ s if target is None else A @ s - target
    return s - A.T @ np.linalg.solve(A @ A.T, defect)


def solve_kkt(qp: DisjointQP, aset: ActiveSet, grad_x, grad_y,
              refine: bool = True, eq_residual=None) -> KKTSolution:
    """Solve the saddle-point system with a pivoted LU factorization.

    One step of iterative refinement follows the solve, and the x-part is
    finally corrected so that ``A s = eq_residual`` (default 0) holds to
    working precision.
    """
    system = assemble_kkt(qp, aset, grad_x, grad_y, eq_residual)
    K, rhs = system.matrix, system.rhs
    lu, piv = scipy.linalg.lu_factor(K, check_finite=False)
    anorm = np.abs(K).sum(axis=0).max()
    rcond, info = lapack.dgecon(lu, anorm, norm="1")
    if info != 0 or not rcond > EPS:
        raise SingularKKTError(float(rcond))
    sol = scipy.linalg.lu_solve((lu, piv), rhs, check_finite=False)
    if refine:
        sol = sol + scipy.linalg.lu_solve((lu, piv), rhs - K @ sol, check_finite=False)
    residual = float(np.abs(K @ sol - rhs).max()) if rhs.size else 0.0

    n, k = system.n, system.k
    s = sol[:n]
    if refine:
        s = _project_out(qp.A, s, eq_residual)
    v = np.zeros(qp.p)
    v[aset.complement] = sol[n:n + k]
    return KKTSolution(s, v, sol[n + k:], residual, float(rcond))


def projected_line_search(qp: DisjointQP, pt: Point, s, v, grad=None):
    """First minimizer of ``a -> J(x + a s, max(y + a v, lower))``.

    Returns ``(alpha, new_point)``.
    """
    s = np.asarray(s, dtype=float)
    v = np.asarray(v, dtype=float)
    if not (np.any(s) or np.any(v)):
        raise ValueError("search direction is zero")
    res = minimize_along_path(qp, pt, s, v, grad)
    return res.alpha, res.point


def find_feasible_start(qp: DisjointQP) -> Point:
    """Minimum-norm solution of ``Ax = b`` and ``y = max(0, lower)`` (capped by ``upper``)."""
    if qp.m:
        if np.linalg.matrix_rank(qp.A) < qp.m:
            raise RankDeficientError("A does not have full row rank")
        x = np.linalg.lstsq(qp.A, qp.b, rcond=None)[0]
    else:
        x = np.zeros(qp.n)
    y = np.maximum(0.0, qp.lower)
    if qp.upper is not None:
        y = np.minimum(y, qp.upper)
    return Point(x, y)


def _reduced_norm(grad_y, aset: ActiveSet) -> float:
    return float(np.linalg.norm(grad_y[aset.complement]))


def solve_alg1(qp: DisjointQP, start: Point, settings: Alg1Settings = Alg1Settings(),
               keep_iterates: bool = True):
    """Run the active-set method from a feasible ``start``.

    Convergence needs the reduced y-gradient below ``epsilon`` and, in
    addition, a negligible KKT step, so that a point stationary in ``y``
    but not in ``x`` is not accepted.

    Returns ``(solution, trace)``; raises :class:`ConvergenceError` (with the
    trace attached) when ``max_outer`` steps do not suffice.
    """
    feas = check_feasibility(qp, start, settings.feasibility_tol)
    if not feas.feasible:
        raise InfeasibleStartError(
            f"start is infeasible: |Ax-b|={feas.equality_residual:.3e}, "
            f"bound margin={feas.bound_margin:.3e}")
    eps = settings.epsilon
    trace = SolveTrace("alg1")
    pt = start.copy()
    J = evaluate_objective(qp, pt)

    for k in range(settings.max_outer + 1):
        gx, gy = evaluate_gradient(qp, pt)
        aset = build_active_set(qp, pt, gy, settings.bound_tol)
        gnorm = _reduced_norm(gy, aset)
        step = solve_kkt(qp, aset, gx, gy, settings.equality_refine)
        step_size = max(np.abs(step.s).max(initial=0.0), np.abs(step.v).max(initial=0.0))
        if gnorm <= eps and step_size <= eps * (1.0 + np.abs(pt.z).max(initial=0.0)):
            trace.status = "converged"
            logger.info("alg1 converged after %d iterations", trace.iterations)
            return pt, trace
        if k == settings.max_outer:
            break
        if step_size == 0.0:
            # exact stationarity in the reduced space but gnorm > eps cannot happen
            raise InvariantViolation("zero KKT step at a non-stationary point")

        alpha, new = projected_line_search(qp, pt, step.s, step.v, (gx, gy))
        J_new = evaluate_objective(qp, new)
        if J_new > J + 1e-14 * abs(J):
            raise InvariantViolation(f"objective increased: {J!r} -> {J_new!r}")
        pt, J = new, J_new

        gx1, gy1 = evaluate_gradient(qp, pt)
        aset1 = build_active_set(qp, pt, gy1, settings.bound_tol)
        trace.append(IterationRecord(
            iteration=k + 1, objective=J, complement_size=aset1.complement.size,
            reduced_grad_norm=_reduced_norm(gy1, aset1), alpha=alpha,
            x=pt.x.copy() if keep_iterates else None,
            y=pt.y.copy() if keep_iterates else None))

    trace.status = "max_outer"
    raise ConvergenceError(
        f"alg1 did not converge in {settings.max_outer} outer iterations", trace, pt)
