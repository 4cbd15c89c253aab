"""Reference solvers for small instances.

``enumerate_solve`` tries every assignment of the bound indices to
{free, at lower, at upper}, solves the resulting equality-constrained QP
densely and keeps the best KKT point. ``projected_gradient_solve`` is a plain
gradient-projection method. Neither shares code with the main solvers
beyond the problem type.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, DisjointQPError
from .qp_core import DisjointQP, Point

__all__ = ["OracleResult", "enumerate_solve", "projected_gradient_solve", "random_qp"]

MAX_ENUM_P = 20


@dataclass
class OracleResult:
    point: Point
    objective: float
    lower_active: np.ndarray
    upper_active: np.ndarray
    w: np.ndarray          # equality multipliers (grad_x + A'w = 0)
    lam: np.ndarray        # bound multipliers, >= 0, length p
    enumerated: int
    degenerate: bool       # some active bound has a near-zero multiplier


def _objective(P, g, z):
    return float(g @ z + 0.5 * z @ (P @ z))


def enumerate_solve(qp: DisjointQP, tol: float = 1e-9) -> OracleResult:
    """Global minimizer by exhaustive active-set enumeration.

    Subsets are visited in lexicographic order of their state tuples
    (0 free, 1 lower, 2 upper); among candidates with equal objective the
    first one wins.
    """
    p, n, m = qp.p, qp.n, qp.m
    if p > MAX_ENUM_P:
        raise DisjointQPError(f"enumeration needs p <= {MAX_ENUM_P}, got {p}")
    P = np.block([[qp.P_xx, qp.P_xy], [qp.P_xy.T, qp.P_yy]])
    g = np.concatenate([qp.g_x, qp.g_y])
    lower = qp.lower
    upper = np.full(p, np.inf) if qp.upper is None else qp.upper
    choices = []
    for i in range(p):
        c = [0]
        if np.isfinite(lower[i]):
            c.append(1)
        if np.isfinite(upper[i]):
            c.append(2)
        choices.append(c)

    best = None
    count = 0
    for states in itertools.product(*choices):
        count += 1
        states = np.array(states, dtype=int)
        fixed = np.flatnonzero(states > 0)
        free = np.flatnonzero(states == 0)
        yfix = np.where(states == 1, lower, upper)[fixed]
        vars_ = np.concatenate([np.arange(n), n + free])
        fixed_cols = n + fixed
        k = vars_.size
        # equality-constrained QP in (x, y_free) with y_fixed frozen
        H = P[np.ix_(vars_, vars_)]
        c = g[vars_] + P[np.ix_(vars_, fixed_cols)] @ yfix
        E = np.zeros((m, k))
        E[:, :n] = qp.A
        K = np.block([[H, E.T], [E, np.zeros((m, m))]])
        rhs = np.concatenate([-c, qp.b])
        try:
            sol = np.linalg.solve(K, rhs)
        except np.linalg.LinAlgError:
            continue
        z = np.empty(n + p)
        z[vars_] = sol[:k]
        z[fixed_cols] = yfix
        y = z[n:]
        scale = 1.0 + np.abs(y).max(initial=0.0)
        if np.any(y < lower - tol * scale) or np.any(y > upper + tol * scale):
            continue
        grad = g + P @ z
        gy = grad[n:]
        lam = np.zeros(p)
        lam[states == 1] = gy[states == 1]
        lam[states == 2] = -gy[states == 2]
        gscale = 1.0 + np.abs(grad).max()
        if np.any(lam < -tol * gscale):
            continue
        J = _objective(P, g, z)
        if best is None or J < best[0] - 1e-12 * (1.0 + abs(best[0])):
            best = (J, z.copy(), states.copy(), sol[k:].copy(), lam)

    if best is None:
        raise DisjointQPError("no KKT point found; is the problem feasible and convex?")
    J, z, states, w, lam = best
    active = states > 0
    degenerate = bool(np.any(lam[active] < 1e-8))
    return OracleResult(
        point=Point(z[:n], z[n:]), objective=J,
        lower_active=np.flatnonzero(states == 1),
        upper_active=np.flatnonzero(states == 2),
        w=w, lam=lam, enumerated=count, degenerate=degenerate)


def projected_gradient_solve(qp: DisjointQP, start: Point, tol: float = 1e-10,
                             max_iters: int = 200_000) -> Point:
    """Gradient projection with a fixed trial step and exact segment search.

    Each iteration projects ``z - t grad`` onto the feasible set (x through
    the nullspace of ``A``, y by clipping) and minimizes the quadratic exactly
    on the segment towards that projected point.
    """
    n = qp.n
    P = np.block([[qp.P_xx, qp.P_xy], [qp.P_xy.T, qp.P_yy]])
    g = np.concatenate([qp.g_x, qp.g_y])
    lower = qp.lower
    upper = np.full(qp.p, np.inf) if qp.upper is None else qp.upper
    if qp.m:
        # orthogonal projector onto null(A) via the pseudo-inverse
        A_pinv = np.linalg.pinv(qp.A)
        Z = np.eye(n) - A_pinv @ qp.A
    else:
        A_pinv = np.zeros((n, 0))
        Z = np.eye(n)
    step = 1.0 / np.linalg.eigvalsh(P).max()
    z = np.concatenate([start.x, start.y])
    for _ in range(max_iters):
        grad = g + P @ z
        zg = Z @ grad[:n]
        dx = -step * zg
        dy = np.clip(z[n:] - step * grad[n:], lower, upper) - z[n:]
        d = np.concatenate([dx, dy])
        if np.linalg.norm(d) / step <= tol:
            return Point(z[:n], z[n:])
        # slope through the projected gradient: grad_x itself carries a large
        # range(A') component that would cancel catastrophically
        slope = zg @ dx + grad[n:] @ dy
        curv = d @ (P @ d)
        a = 1.0 if curv <= 0 else min(1.0, max(0.0, -slope / curv))
        z = z + a * d
        z[n:] = np.clip(z[n:], lower, upper)
        # pull x back onto Ax = b so rounding drift cannot accumulate
        z[:n] -= A_pinv @ (qp.A @ z[:n] - qp.b)
    raise ConvergenceError(f"projected gradient did not reach tol={tol} in {max_iters} iterations",
                           point=Point(z[:n], z[n:]))


def random_qp(seed: int, n_max: int = 8, p_max: int = 6, m_max: int = 2,
              upper: bool = False, max_cond: float = 1e4) -> DisjointQP:
    """Seeded random strictly convex instance with P = M'M + 0.1 I.

    Sizes are drawn with ``1 <= m <= min(m_max, n)``; lower bounds are
    zero-centered so that a fair share of them end up active. Draws whose
    Hessian condition number exceeds ``max_cond`` are rejected.
    """
    rng = np.random.default_rng(seed)
    while True:
        n = int(rng.integers(1, n_max + 1))
        p = int(rng.integers(1, p_max + 1))
        m = int(rng.integers(1, min(m_max, n) + 1))
        N = n + p
        M = rng.normal(size=(N, N)) / np.sqrt(N)
        P = M.T @ M + 0.1 * np.eye(N)
        if np.linalg.cond(P) > max_cond:
            continue
        A = rng.normal(size=(m, n))
        if np.linalg.matrix_rank(A) < m:
            continue
        g = rng.normal(size=N) * 2.0
        b = rng.normal(size=m)
        lo = rng.normal(size=p) * 0.5
        up = lo + rng.uniform(0.5, 2.0, size=p) if upper else None
        return DisjointQP(g[:n], g[n:], P[:n, :n], P[:n, n:], P[n:, n:], A, b, lo, up)
