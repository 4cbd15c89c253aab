import numpy as np
import pytest

from disjqp.errors import ConvergenceError, InfeasibleStartError, RankDeficientError
from disjqp.kkt_active_set import find_feasible_start, solve_alg1, solve_kkt
from disjqp.nullspace_pcg import (Alg2Settings, NullspaceProjection, build_projection,
                                  cauchy_point, cg_on_face, reduced_gradient, solve_alg2)
from disjqp.oracle import random_qp
from disjqp.qp_core import (ActiveSet, DisjointQP, Point, check_feasibility,
                            evaluate_gradient, evaluate_objective)

from test_kkt_active_set import arc_values, first_local_min_on_grid


class TestProjection:
    def test_rank_one_matrix(self):
        Z = build_projection(np.array([[1.0, 1.0]]))
        np.testing.assert_allclose(Z.matrix(), [[0.5, -0.5], [-0.5, 0.5]], atol=1e-16)
        np.testing.assert_allclose(Z(np.array([1.0, 1.0])), [0.0, 0.0], atol=1e-16)
        np.testing.assert_allclose(Z(np.array([1.0, -1.0])), [1.0, -1.0], atol=1e-16)

    def test_mass_row(self):
        N = 250
        A = np.zeros((1, 2 * N))
        A[0, N:] = 1.0
        Z = build_projection(A)
        v = np.random.default_rng(0).normal(size=2 * N)
        out = Z(v)
        np.testing.assert_array_equal(out[:N], v[:N])
        np.testing.assert_allclose(out[N:], v[N:] - v[N:].mean(), atol=1e-14)

    @pytest.mark.parametrize("m", [1, 2, 3])
    def test_projector_identities(self, m):
        rng = np.random.default_rng(m)
        A = rng.normal(size=(m, 6))
        Z = NullspaceProjection(A)
        M = Z.matrix()
        v = rng.normal(size=6)
        assert np.abs(A @ Z(v)).max() <= 1e-12 * np.linalg.norm(A) * np.linalg.norm(v)
        np.testing.assert_allclose(M @ M, M, atol=1e-14)
        np.testing.assert_allclose(M, M.T, atol=1e-15)

    def test_basis_is_orthonormal_nullspace(self):
        A = np.random.default_rng(1).normal(size=(2, 5))
        Q = NullspaceProjection(A).basis()
        assert Q.shape == (5, 3)
        np.testing.assert_allclose(Q.T @ Q, np.eye(3), atol=1e-14)
        np.testing.assert_allclose(Q @ Q.T, NullspaceProjection(A).matrix(), atol=1e-14)

    def test_rank_deficient(self):
        with pytest.raises(RankDeficientError):
            NullspaceProjection(np.array([[1.0, 2.0], [2.0, 4.0]]))
        with pytest.raises(RankDeficientError):
            NullspaceProjection(np.zeros((1, 3)))


class TestReducedGradient:
    def test_parallel_to_rows_vanishes(self, qp_a):
        # at the solution the x-gradient is -A'w
        Z = build_projection(qp_a.A)
        gxt, _ = reduced_gradient(qp_a, Z, Point(np.array([0.5, 0.5]), np.array([1.0])))
        np.testing.assert_allclose(gxt, 0.0, atol=1e-15)

    def test_in_nullspace_unchanged(self, qp_a):
        Z = build_projection(qp_a.A)
        pt = Point(np.array([1.5, 0.5]), np.array([1.0]))
        gx, _ = evaluate_gradient(qp_a, pt)
        gxt, _ = reduced_gradient(qp_a, Z, pt)
        assert np.abs(qp_a.A @ gx).max() < 1e-15
        np.testing.assert_allclose(gxt, gx)

    @pytest.mark.parametrize("seed", range(10))
    def test_directional_finite_difference(self, seed):
        qp = random_qp(seed)
        Z = build_projection(qp.A)
        rng = np.random.default_rng(seed)
        pt = Point(rng.normal(size=qp.n), rng.normal(size=qp.p))
        d = Z(rng.normal(size=qp.n))
        h = 1e-6
        fd = (evaluate_objective(qp, Point(pt.x + h * d, pt.y))
              - evaluate_objective(qp, Point(pt.x - h * d, pt.y))) / (2 * h)
        gxt, _ = reduced_gradient(qp, Z, pt)
        assert fd == pytest.approx(gxt @ d, rel=1e-6, abs=1e-7)


class TestCauchyPoint:
    def test_textbook_step(self):
        # J = 1/2 |z|^2 + g'z with no bound reached: alpha = |g|^2 / g'Pg = 1
        qp = DisjointQP(np.array([1.0, -1.0]), np.array([-1.0]), np.eye(2), np.zeros((2, 1)),
                        np.eye(1), np.array([[1.0, 1.0]]), np.zeros(1), np.array([-100.0]))
        Z = build_projection(qp.A)
        pt = Point(np.zeros(2), np.zeros(1))
        gxt, gy = reduced_gradient(qp, Z, pt)
        g = np.concatenate([gxt, gy])
        _, _, alpha = cauchy_point(qp, Z, pt)
        assert alpha == pytest.approx(g @ g / (g @ g), rel=1e-14)

    def test_zero_gradient(self, qp_a):
        Z = build_projection(qp_a.A)
        pt = Point(np.array([0.5, 0.5]), np.array([1.0]))
        new, active, alpha = cauchy_point(qp_a, Z, pt)
        assert alpha == 0.0 and np.array_equal(new.z, pt.z) and not active.any()

    def test_arc_bends_at_bound(self):
        # y starts at 0.3 and is pushed below 0 before x reaches its minimum
        qp = DisjointQP(np.array([-1.0, 1.0]), np.array([1.0]), np.eye(2), np.zeros((2, 1)),
                        np.eye(1), np.array([[1.0, 1.0]]), np.zeros(1), np.zeros(1))
        Z = build_projection(qp.A)
        pt = Point(np.zeros(2), np.array([0.3]))
        new, active, alpha = cauchy_point(qp, Z, pt)
        gxt, gy = reduced_gradient(qp, Z, pt)
        alphas = np.linspace(0, 3, 300_001)
        a_grid = first_local_min_on_grid(arc_values(qp, pt, -gxt, -gy, alphas), alphas)
        assert alpha > 0.3 / gy[0]
        assert abs(alpha - a_grid) <= 2e-5
        assert active.tolist() == [True] and new.y[0] == 0.0

    @pytest.mark.parametrize("seed", range(20))
    def test_grid_scan_random(self, seed):
        qp = random_qp(seed, upper=bool(seed % 2))
        Z = build_projection(qp.A)
        rng = np.random.default_rng(seed)
        start = find_feasible_start(qp)
        pt = Point(start.x, np.clip(qp.lower + rng.uniform(0, 0.3, qp.p), qp.lower, qp.upper_or_inf))
        new, _, alpha = cauchy_point(qp, Z, pt)
        gxt, gy = reduced_gradient(qp, Z, pt)
        hi = 4 * max(alpha, 1e-3)
        alphas = np.linspace(0, hi, 200_001)
        a_grid = first_local_min_on_grid(arc_values(qp, pt, -gxt, -gy, alphas), alphas)
        assert abs(alpha - a_grid) <= 2 * (alphas[1] - alphas[0])
        assert np.abs(qp.A @ new.x - qp.b).max() <= 1e-12 * (1 + np.abs(qp.b).max())


class TestCGOnFace:
    def test_identity_hessian_one_iteration(self):
        qp = DisjointQP(np.zeros(1), np.array([-1.0, -2.0, -3.0]), np.eye(1), np.zeros((1, 3)),
                        np.eye(3), np.ones((1, 1)), np.zeros(1), np.full(3, -10.0))
        Z = build_projection(qp.A)
        res = cg_on_face(qp, Z, Point(np.zeros(1), np.zeros(3)), np.ones(3, dtype=bool))
        assert res.iterations == 1 and res.reason == "converged"
        np.testing.assert_allclose(res.point.y, [1.0, 2.0, 3.0], atol=1e-15)

    def test_truncated_at_bound(self):
        qp = DisjointQP(np.zeros(1), np.array([1.0, -1.0]), np.eye(1), np.zeros((1, 2)),
                        np.eye(2), np.ones((1, 1)), np.zeros(1), np.array([0.0, -5.0]))
        Z = build_projection(qp.A)
        res = cg_on_face(qp, Z, Point(np.zeros(1), np.array([0.5, 0.0])), np.ones(2, dtype=bool))
        assert res.reason == "bound"
        assert res.hit.tolist() == [0]
        assert res.point.y[0] == 0.0
        assert 0 < res.point.y[1] < 1.0

    def test_budget(self):
        qp = random_qp(5)
        Z = build_projection(qp.A)
        start = find_feasible_start(qp)
        res = cg_on_face(qp, Z, Point(start.x, start.y + 10.0), np.ones(qp.p, dtype=bool), budget=1)
        assert res.iterations <= 1

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_kkt_solve_on_face(self, seed):
        qp = random_qp(seed)
        qp = DisjointQP(qp.g_x, qp.g_y, qp.P_xx, qp.P_xy, qp.P_yy, qp.A, qp.b,
                        np.full(qp.p, -1e6))
        Z = build_projection(qp.A)
        rng = np.random.default_rng(seed)
        free = rng.uniform(size=qp.p) < 0.6
        start = find_feasible_start(qp)
        pt = Point(start.x, rng.normal(size=qp.p))
        res = cg_on_face(qp, Z, pt, free, cg_tol=1e-13)
        assert res.reason == "converged"
        gx, gy = evaluate_gradient(qp, pt)
        sol = solve_kkt(qp, ActiveSet.from_mask(~free), gx, gy)
        np.testing.assert_allclose(res.point.x, pt.x + sol.s, atol=1e-9)
        np.testing.assert_allclose(res.point.y, pt.y + sol.v, atol=1e-9)


class TestAlg2:
    def test_qp_a_agrees_with_alg1(self, qp_a):
        start = find_feasible_start(qp_a)
        p1, _ = solve_alg1(qp_a, start)
        p2, trace = solve_alg2(qp_a, start)
        np.testing.assert_allclose(p2.z, p1.z, rtol=1e-10, atol=1e-12)
        assert trace.status == "converged"

    def test_infeasible_start(self, qp_a):
        with pytest.raises(InfeasibleStartError):
            solve_alg2(qp_a, Point(np.zeros(2), np.zeros(1)))

    @pytest.mark.parametrize("seed", range(30))
    def test_trace_invariants(self, seed):
        qp = random_qp(seed, upper=bool(seed % 3 == 0))
        pt, trace = solve_alg2(qp, find_feasible_start(qp), Alg2Settings(max_cg_per_outer=2))
        J = trace.column("J")
        assert np.all(np.diff(J) <= 1e-14 * np.abs(J[:-1]))
        for r in trace:
            assert r.cg_iters <= 2 and r.faces >= 1
            rep = check_feasibility(qp, Point(r.x, r.y))
            assert rep.equality_residual <= 1e-10 * (1 + np.abs(qp.b).max())
            assert np.all(r.y >= qp.lower)

    def test_single_face_stop(self):
        qp = random_qp(2)
        _, trace = solve_alg2(qp, find_feasible_start(qp), Alg2Settings(stop_on_single_face=True))
        assert trace.status in ("single_face", "converged")
        if trace.status == "single_face":
            assert trace.records[-1].faces == 1

    def test_max_outer(self):
        qp = random_qp(8)
        with pytest.raises(ConvergenceError) as info:
            solve_alg2(qp, find_feasible_start(qp), Alg2Settings(max_outer=1, max_cg_per_outer=1,
                                                                  epsilon=1e-300))
        assert info.value.trace.iterations == 1

    def test_preconditioner_hook(self):
        qp = random_qp(6)
        calls = []

        def ident(v):
            calls.append(1)
            return v

        start = find_feasible_start(qp)
        p_default, _ = solve_alg2(qp, start)
        p_hook, _ = solve_alg2(qp, start, Alg2Settings(preconditioner=ident))
        assert calls
        np.testing.assert_allclose(p_hook.z, p_default.z, rtol=1e-12, atol=1e-14)

    def test_settings_validation(self):
        with pytest.raises(ValueError):
            Alg2Settings(max_cg_per_outer=0)
        with pytest.raises(ValueError):
            Alg2Settings(epsilon=-1.0)
