import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from nscbf.barrier_tree import BarrierTree, KeepOutDisk, Leaf, reciprocal_barrier
from nscbf.dynamics import ConstantMap, SDEModel, single_integrator
from nscbf.errors import BarrierSingularityError, InfeasibleQPError
from nscbf.qp_solver import QPProblem, verify_kkt
from nscbf.safety_filter import (Box, ClassK, SafetyFilter, constraint_row, constraint_rows_batch,
                                 filter_control, solve_filter)
from nscbf.scenarios import multi_agent_swap, single_agent_tree
from oracles import disk_value, generator_row, pair_value

coord = st.floats(-2, 3, allow_nan=False)
point = st.tuples(coord, coord).map(np.array)
control = st.tuples(st.floats(-5, 5), st.floats(-5, 5)).map(np.array)


def obstacle_tree():
    return BarrierTree(Leaf(KeepOutDisk([1.2, 0.4], 0.6)))


def noiseless(dim=2):
    return SDEModel(dim, dim, dim, ConstantMap(np.zeros(dim)), ConstantMap(np.eye(dim)),
                    ConstantMap(np.zeros((dim, dim))))


class TestConstraintRow:
    def test_worked_example(self):
        row = constraint_row(single_integrator(0.025), obstacle_tree(), 0, [2.2, 0.4])
        np.testing.assert_allclose(row.a, [-6.25, 0.0], atol=1e-12)
        assert row.b == pytest.approx(0.3921875, abs=1e-12)

    def test_worked_example_against_generator_oracle(self):
        h = lambda y: disk_value(y, np.array([1.2, 0.4]), 0.6, False)  # noqa: E731
        a, b = generator_row(h, [2.2, 0.4], 0.025 * np.eye(2))
        np.testing.assert_allclose(a, [-6.25, 0], atol=1e-6)
        assert b == pytest.approx(0.3921875, abs=1e-7)

    def test_zero_diffusion_is_deterministic_row(self):
        x = np.array([0.3, -0.2])
        row = constraint_row(noiseless(), single_agent_tree(), 1, x)
        leaf = single_agent_tree().leaves[1]
        _, grad_b, _ = reciprocal_barrier(leaf.value(x), leaf.gradient(x), leaf.hessian(x))
        assert row.b == pytest.approx(leaf.value(x), abs=1e-15)
        np.testing.assert_allclose(row.a, grad_b, atol=0)

    def test_a_is_grad_b_for_single_integrator(self):
        x = np.array([-0.4, 0.3])
        tree = single_agent_tree()
        for j, leaf in enumerate(tree.leaves):
            if leaf.value(x) <= 0:
                continue
            row = constraint_row(single_integrator(0.1), tree, j, x)
            _, grad_b, _ = reciprocal_barrier(leaf.value(x), leaf.gradient(x), leaf.hessian(x))
            np.testing.assert_allclose(row.a, grad_b, rtol=1e-15)

    def test_random_points_against_generator_oracle(self):
        rng = np.random.default_rng(21)
        tree = single_agent_tree()
        checked = 0
        while checked < 60:
            x = rng.uniform(-2, 3, 2)
            sigma = rng.uniform(0.01, 0.3)
            j = int(rng.integers(3))
            leaf = tree.leaves[j]
            if not 0.1 < leaf.value(x) < 3:
                continue
            row = constraint_row(single_integrator(sigma), tree, j, x, alpha3=ClassK.linear(2.0))
            a, b = generator_row(lambda y: leaf.value(np.asarray(y)), x, sigma * np.eye(2), alpha=lambda s: 2 * s)
            np.testing.assert_allclose(row.a, a, rtol=1e-5, atol=1e-6)
            assert row.b == pytest.approx(b, rel=1e-5, abs=1e-6)
            checked += 1

    def test_pairwise_row_against_generator_oracle(self):
        sc = multi_agent_swap(3, sigma=0.2)
        rng = np.random.default_rng(4)
        for _ in range(10):
            x = sc.x0 + rng.normal(scale=0.1, size=6)
            for j, leaf in enumerate(sc.tree.leaves):
                row = constraint_row(sc.model, sc.tree, j, x)
                ref = lambda y: pair_value(y, leaf.agent_i, leaf.agent_j, leaf.min_distance)  # noqa: E731
                a, b = generator_row(ref, x, 0.2 * np.eye(6))
                np.testing.assert_allclose(row.a, a, rtol=1e-5, atol=1e-6)
                assert row.b == pytest.approx(b, rel=1e-5, abs=1e-6)

    def test_singular_leaf(self):
        with pytest.raises(BarrierSingularityError):
            constraint_row(single_integrator(0.1), obstacle_tree(), 0, [1.8, 0.4])

    def test_batch_rows_match_scalar(self):
        rng = np.random.default_rng(8)
        for sc_tree, model, X in [
            (single_agent_tree(), single_integrator(0.05), rng.uniform(-1, 0.5, (40, 2))),
            (multi_agent_swap(4).tree, multi_agent_swap(4).model, multi_agent_swap(4).x0 + rng.normal(0, .05, (10, 8))),
        ]:
            A, b, values, _ = constraint_rows_batch(model, sc_tree, X, ClassK.power(0.5, 3.0))
            for n, x in enumerate(X):
                for j in range(len(sc_tree)):
                    if values[n, j] <= 0:
                        continue
                    row = constraint_row(model, sc_tree, j, x, ClassK.power(0.5, 3.0))
                    np.testing.assert_allclose(A[n, j], row.a, rtol=1e-12, atol=1e-12)
                    assert b[n, j] == pytest.approx(row.b, rel=1e-11, abs=1e-11)


class TestClassK:
    def test_identity(self):
        assert ClassK.identity()(0.3) == 0.3

    def test_power_odd_extension(self):
        k = ClassK.power(2.0, gain=3.0)
        assert k(0.5) == pytest.approx(0.75)
        assert k(-0.5) == pytest.approx(-0.75)
        np.testing.assert_allclose(k(np.array([-2.0, 2.0])), [-12.0, 12.0])

    @pytest.mark.parametrize("args", [dict(kind="cubic"), dict(kind="linear", gain=0.0),
                                      dict(kind="identity", gain=2.0)])
    def test_invalid(self, args):
        with pytest.raises(ValueError):
            ClassK(**args)


class TestFilter:
    def test_single_active_row_projection(self):
        x = np.array([2.2, 0.4])
        u = filter_control(single_integrator(0.025), obstacle_tree(), x, np.array([-1.0, 0.0]), epsilon=0.0)
        # -6.25 u1 <= 0.3921875 forces u1 >= -0.06275
        np.testing.assert_allclose(u, [-0.06275, 0.0], atol=1e-12)

    def test_two_row_example(self):
        # two rows from leaves chosen so that a1 = [1, 0] b1 = 0 and a2 = [0, 1] b2 = 0 after scaling
        p = QPProblem([1.0, 1.0], [([1, 0], 0.0), ([0, 1], 0.0)])
        from nscbf.qp_solver import solve_qp
        np.testing.assert_allclose(solve_qp(p).u_star, [0, 0], atol=1e-15)

    @given(x=point, u_ref=control)
    def test_idempotent_on_safe_reference(self, x, u_ref):
        tree, model = single_agent_tree(), single_integrator(0.025)
        assume(tree.value(x) > 0.05)
        out = solve_filter(model, tree, x, u_ref, epsilon=0.05)
        if all(r.a @ u_ref <= r.b for r in out.rows):
            np.testing.assert_array_equal(out.u, u_ref)

    @given(x=point, u_ref=control)
    def test_kkt_and_barrier_condition(self, x, u_ref):
        tree, model = single_agent_tree(), single_integrator(0.025)
        assume(tree.value(x) > 0.01)
        out = solve_filter(model, tree, x, u_ref, epsilon=0.05)
        p = QPProblem(u_ref, [(r.a, r.b) for r in out.rows])
        assert verify_kkt(p, out.solution, tol=1e-8)
        active = tree.active_leaf(x)
        row = constraint_row(model, tree, active, x)
        # left side of the Itô condition at the active leaf stays below alpha3(h)
        assert row.a @ out.u <= row.b + 1e-8 * max(1.0, abs(row.b))

    @given(x=point, u_ref=control, e1=st.floats(0, 1), e2=st.floats(0, 1))
    def test_larger_epsilon_moves_further(self, x, u_ref, e1, e2):
        tree, model = single_agent_tree(), single_integrator(0.025)
        assume(tree.value(x) > 0.01)
        lo, hi = sorted((e1, e2))
        u_lo = filter_control(model, tree, x, u_ref, epsilon=lo)
        u_hi = filter_control(model, tree, x, u_ref, epsilon=hi)
        assert np.linalg.norm(u_hi - u_ref) >= np.linalg.norm(u_lo - u_ref) - 1e-9

    def test_non_positive_losing_branch_is_skipped(self):
        tree = single_agent_tree()
        x = np.array([-0.3, 0.2])
        values = tree.leaf_values(x)
        assert values[2] < 0 < tree.value(x)
        out = solve_filter(single_integrator(0.025), tree, x, np.zeros(2), epsilon=3.0)
        assert [r.leaf_index for r in out.rows] == [0, 1]

    def test_infeasible_raises(self):
        tree = single_agent_tree()
        x = np.array([-0.3, 0.2])
        with pytest.raises(InfeasibleQPError) as info:
            filter_control(single_integrator(0.025), tree, x, np.array([5.0, 5.0]),
                           bounds=Box(lower=[1.0, 1.0], upper=[2.0, 2.0]), epsilon=3.0)
        assert info.value.certificate is not None

    def test_slack_restores_feasibility(self):
        tree = single_agent_tree()
        x = np.array([-0.3, 0.2])
        out = solve_filter(single_integrator(0.025), tree, x, np.array([5.0, 5.0]), epsilon=3.0,
                           bounds=Box(lower=[1.0, 1.0], upper=[2.0, 2.0]), slack_penalty=1e6)
        assert np.all(out.u >= 1.0 - 1e-9) and np.all(out.u <= 2.0 + 1e-9)
        assert out.slack > 0

    def test_slack_unused_when_feasible(self):
        x = np.array([2.2, 0.4])
        out = solve_filter(single_integrator(0.025), obstacle_tree(), x, np.array([-1.0, 0.0]),
                           epsilon=0.0, slack_penalty=1e6)
        # a finite penalty trades a sliver of slack for a closer control
        np.testing.assert_allclose(out.u, [-0.06275, 0.0], atol=1e-6)
        assert 0 <= out.slack < 1e-6

    def test_controller_records_timing(self):
        from nscbf.scenarios import ProportionalController
        f = SafetyFilter(single_integrator(0.025), single_agent_tree(), ProportionalController([1.8, 1], 1.0))
        u = f(0.0, np.array([-0.5, 0.0]))
        assert u.shape == (2,) and len(f.solve_times) == 1
        with pytest.raises(ValueError):
            SafetyFilter(single_integrator(0.025), single_agent_tree(), None, epsilon=-1)
