import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nscbf.qp_solver import MAX_ROWS, QPProblem, QPSolution, solve_qp, solve_qp_batch, verify_kkt
from oracles import dual_projected_gradient, pad_instances, random_qp_instances


def single_row():
    return QPProblem([1.0, 0.0], [([1.0, 0.0], 0.5)])


def check_farkas(A, b, y, tol=1e-9):
    assert np.all(y >= -tol)
    assert np.linalg.norm(A.T @ y) <= tol * max(1.0, np.abs(y).sum())
    assert b @ y < 0


class TestExamples:
    def test_no_rows(self):
        s = solve_qp(QPProblem([0.3, -2.0]))
        assert s.optimal and s.active_rows == ()
        np.testing.assert_array_equal(s.u_star, [0.3, -2.0])

    def test_single_row_projection(self):
        s = solve_qp(single_row())
        np.testing.assert_allclose(s.u_star, [0.5, 0.0], atol=1e-15)
        assert s.active_rows == (0,)
        # 2 (u - u_ref) + lambda a = 0 gives lambda = 2 (a^T u_ref - b) / ||a||^2
        np.testing.assert_allclose(s.multipliers, [1.0], atol=1e-15)

    def test_two_separable_rows(self):
        s = solve_qp(QPProblem([1.0, 1.0], [([1, 0], 0.0), ([0, 1], 0.0)]))
        np.testing.assert_allclose(s.u_star, [0, 0], atol=1e-15)
        assert sorted(s.active_rows) == [0, 1]

    def test_infeasible_pair(self):
        p = QPProblem([0.0, 0.0], [([1, 0], -1.0), ([-1, 0], -1.0)])
        s = solve_qp(p)
        assert s.status == "infeasible"
        assert np.all(np.isnan(s.u_star))
        check_farkas(*p.constraints(), s.certificate)

    def test_strictly_satisfied_rows_return_reference(self):
        s = solve_qp(QPProblem([0.1, 0.2], [([1, 1], 5.0), ([-1, 0], 3.0)]))
        np.testing.assert_array_equal(s.u_star, [0.1, 0.2])
        assert s.active_rows == ()

    def test_degenerate_rows(self):
        s = solve_qp(QPProblem([1.0], [([0.0], 0.0), ([1.0], 0.5)]))
        np.testing.assert_allclose(s.u_star, [0.5])
        s = solve_qp(QPProblem([1.0], [([0.0], -1e-3)]))
        assert s.status == "infeasible"

    def test_box_bounds(self):
        p = QPProblem([2.0, -3.0], [([1, 1], 10.0)], lower=[-1, -1], upper=[1, 1])
        s = solve_qp(p)
        np.testing.assert_allclose(s.u_star, [1, -1])
        assert verify_kkt(p, s)

    def test_row_limit(self):
        rows = [([1.0], 1.0)] * (MAX_ROWS + 1)
        with pytest.raises(ValueError):
            solve_qp(QPProblem([0.0], rows))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            QPProblem([0.0, 0.0], [([1.0], 0.0)])

    def test_equal_rows_are_handled(self):
        p = QPProblem([1.0, 1.0], [([1, 1], 0.0), ([1, 1], 0.0), ([2, 2], 0.0)])
        s = solve_qp(p)
        np.testing.assert_allclose(s.u_star, [0, 0], atol=1e-14)
        assert verify_kkt(p, s)


class TestVerifyKKT:
    def test_analytic_solution_passes(self):
        p = single_row()
        assert verify_kkt(p, solve_qp(p), tol=1e-8)

    def test_perturbed_solution_fails(self):
        p = single_row()
        s = solve_qp(p)
        # moving along -a stays feasible but breaks stationarity
        bad = QPSolution(s.u_star - np.array([1e-3, 0.0]), s.active_rows, s.multipliers, s.status)
        assert not verify_kkt(p, bad, tol=1e-8)

    def test_unconstrained_empty_multipliers(self):
        p = QPProblem([1.0, 2.0])
        assert verify_kkt(p, QPSolution(np.array([1.0, 2.0]), (), np.zeros(0), "optimal"))

    def test_negative_multiplier_fails(self):
        p = single_row()
        bad = QPSolution(np.array([0.5, 0.0]), (0,), np.array([-1.0]), "optimal")
        assert not verify_kkt(p, bad)

    def test_infeasible_never_passes(self):
        p = QPProblem([0.0], [([1.0], -1.0), ([-1.0], -1.0)])
        assert not verify_kkt(p, solve_qp(p))


def test_oracle_agreement_small_sample():
    instances = random_qp_instances(150, seed=1)
    A, b, u = pad_instances(instances)
    u_or, cert = dual_projected_gradient(A, b, u, iters=100_000)
    assert cert.sum() > 100
    for i, (Ai, bi, ui) in enumerate(instances):
        p = QPProblem(ui, list(zip(Ai, bi)))
        s = solve_qp(p)
        if s.optimal:
            assert verify_kkt(p, s, tol=1e-8)
        else:
            check_farkas(Ai, bi, s.certificate)
        if cert[i]:
            assert s.optimal
            np.testing.assert_allclose(s.u_star, u_or[i, :ui.size], atol=1e-5)


def test_batch_matches_scalar():
    instances = random_qp_instances(400, seed=2)
    A, b, u = pad_instances(instances)
    usable = np.zeros(b.shape, dtype=bool)
    for i, (Ai, _, _) in enumerate(instances):
        usable[i, :Ai.shape[0]] = True
    ub, lam, work, infeasible = solve_qp_batch(A, b, u, usable)
    for i, (Ai, bi, ui) in enumerate(instances):
        s = solve_qp(QPProblem(ui, list(zip(Ai, bi))))
        assert infeasible[i] == (not s.optimal)
        if s.optimal:
            m = ui.size
            np.testing.assert_allclose(ub[i, :m], s.u_star, rtol=0, atol=1e-12)
            assert sorted(np.flatnonzero(work[i]).tolist()) == sorted(s.active_rows)
            np.testing.assert_allclose(lam[i, list(s.active_rows)], s.multipliers, atol=1e-10)


def test_batch_result_independent_of_companions():
    instances = random_qp_instances(60, seed=3)
    A, b, u = pad_instances(instances)
    full, _, _, inf_full = solve_qp_batch(A, b, u)
    for i in range(0, 60, 7):
        alone, _, _, inf_alone = solve_qp_batch(A[i:i + 1], b[i:i + 1], u[i:i + 1])
        assert inf_alone[0] == inf_full[i]
        if not inf_full[i]:
            np.testing.assert_array_equal(alone[0], full[i])


coef = st.floats(-2, 2, allow_nan=False)


@st.composite
def qp_instances(draw, max_dim=5, max_rows=4):
    m = draw(st.integers(1, max_dim))
    k = draw(st.integers(0, max_rows))
    A = np.array(draw(st.lists(st.lists(coef, min_size=m, max_size=m), min_size=k, max_size=k))).reshape(k, m)
    b = np.array(draw(st.lists(coef, min_size=k, max_size=k)))
    u = np.array(draw(st.lists(coef, min_size=m, max_size=m)))
    return A, b, u


@given(inst=qp_instances(), seed=st.integers(0, 2**31))
def test_no_feasible_point_is_closer(inst, seed):
    A, b, u_ref = inst
    s = solve_qp(QPProblem(u_ref, list(zip(A, b))))
    if not s.optimal:
        check_farkas(A, b, s.certificate)
        return
    best = np.linalg.norm(s.u_star - u_ref)
    rng = np.random.default_rng(seed)
    cand = s.u_star + rng.normal(scale=0.5, size=(400, u_ref.size))
    cand = np.vstack([cand, s.u_star + 1e-4 * rng.normal(size=(200, u_ref.size))])
    feasible = np.all(cand @ A.T <= b + 1e-12, axis=1) if A.size else np.ones(len(cand), bool)
    dists = np.linalg.norm(cand[feasible] - u_ref, axis=1)
    assert np.all(dists >= best - 1e-10)


@given(inst=qp_instances(), scales=st.lists(st.floats(0.01, 100), min_size=4, max_size=4))
def test_row_scaling_leaves_minimizer_unchanged(inst, scales):
    A, b, u_ref = inst
    s1 = solve_qp(QPProblem(u_ref, list(zip(A, b))))
    c = np.array(scales[:len(b)])
    s2 = solve_qp(QPProblem(u_ref, list(zip(A * c[:, None], b * c))))
    assert s1.status == s2.status
    if s1.optimal:
        np.testing.assert_allclose(s1.u_star, s2.u_star, atol=1e-9)


@given(inst=qp_instances(max_dim=8, max_rows=6))
def test_kkt_on_random_instances(inst):
    A, b, u_ref = inst
    p = QPProblem(u_ref, list(zip(A, b)))
    s = solve_qp(p)
    if s.optimal:
        assert verify_kkt(p, s, tol=1e-8)
    else:
        check_farkas(A, b, s.certificate)
