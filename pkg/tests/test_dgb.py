import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from conftest import TOY_COST, TOY_THETA
from lbcf.dgb import (
    AllocationProblem,
    InstanceTooLargeError,
    allocate_dgb,
    brute_force_mckp,
    dual_derivative,
    dual_value,
    exact_sum,
    iteration_bound,
    max_uplift_greedy,
    roi_greedy,
    select_treatments,
    solve_dgb,
)


@st.composite
def problems(draw, max_n=8, max_k=3, theta_low=0.0):
    N = draw(st.integers(1, max_n))
    K = draw(st.integers(1, max_k))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    theta = rng.uniform(theta_low, 10, (N, K))
    cost = rng.uniform(0.5, 5, (N, K))
    frac = draw(st.floats(0.05, 0.95))
    return AllocationProblem(theta, cost, frac * cost.max(axis=1).sum())


class TestToyInstance:
    def test_dual_value_hand_oracle(self, toy_problem):
        assert dual_value(16, toy_problem) == 104.0

    def test_dgb_brute_force_and_baselines(self, toy_problem):
        dgb = allocate_dgb(toy_problem, epsilon=1e-6)
        assert dgb.total_value == 98.0
        np.testing.assert_array_equal(dgb.chosen, [2, 2, 2, 0, 0, 0])
        assert brute_force_mckp(toy_problem).total_value == 98.0
        roi = roi_greedy(toy_problem)
        assert roi.total_value == 92.0
        np.testing.assert_array_equal(roi.chosen, [1, 2, 2, 1, 0, 0])
        greedy = max_uplift_greedy(toy_problem)
        assert greedy.total_value == 98.0 and greedy.total_cost == 6.0


class TestDual:
    def test_boundaries(self, toy_problem):
        big = toy_problem.max_ratio + 1.0
        assert dual_value(big, toy_problem) == big * toy_problem.budget
        assert dual_derivative(big, toy_problem) == toy_problem.budget
        assert dual_value(0.0, toy_problem) == np.maximum(TOY_THETA.max(axis=1), 0).sum()
        assert dual_derivative(0.0, toy_problem) == toy_problem.budget - TOY_COST[np.arange(6), TOY_THETA.argmax(1)].sum()
        assert dual_derivative(0.0, toy_problem) < 0

    @settings(max_examples=60, deadline=None)
    @given(p=problems(max_n=20), data=st.data())
    def test_convexity(self, p, data):
        hi = 1.5 * p.max_ratio
        l1 = data.draw(st.floats(0, hi))
        l2 = data.draw(st.floats(0, hi))
        a = data.draw(st.floats(0.01, 0.99))
        mid = a * l1 + (1 - a) * l2
        assert dual_value(mid, p) <= a * dual_value(l1, p) + (1 - a) * dual_value(l2, p) + 1e-9

    @settings(max_examples=60, deadline=None)
    @given(p=problems(max_n=20), u=st.floats(0.01, 0.99))
    def test_finite_difference_matches_subgradient(self, p, u):
        lam, h = u * p.max_ratio, 1e-6
        kinks = (p.theta / p.cost).ravel()
        ratios = [(p.theta[:, j] - p.theta[:, k]) / (p.cost[:, j] - p.cost[:, k]) for j in range(p.n_treatments) for k in range(j)]
        kinks = np.concatenate([kinks, *ratios]) if ratios else kinks
        assume(np.min(np.abs(kinks - lam)) > 10 * h)
        fd = (dual_value(lam + h, p) - dual_value(lam - h, p)) / (2 * h)
        assert fd == pytest.approx(dual_derivative(lam, p), rel=1e-4, abs=1e-4 * p.budget)

    @settings(max_examples=30, deadline=None)
    @given(p=problems(max_n=60), shards=st.integers(2, 7))
    def test_shard_reduction_is_exact(self, p, shards):
        lam = 0.37 * p.max_ratio
        assert dual_derivative(lam, p, n_shards=shards) == dual_derivative(lam, p)
        assert dual_value(lam, p, n_shards=shards, n_jobs=2) == dual_value(lam, p)

    def test_exact_sum(self):
        vals = [1e16, 1.0, -1e16, 0.1, 0.2]
        from fractions import Fraction

        assert exact_sum(vals) == sum(Fraction(v) for v in vals)

    def test_negative_lambda(self, toy_problem):
        with pytest.raises(ValueError):
            dual_value(-1.0, toy_problem)


class TestSolver:
    @settings(max_examples=80, deadline=None)
    @given(p=problems(max_n=10, theta_low=-3.0))
    def test_lambda_in_bracket_and_weak_duality(self, p):
        r = solve_dgb(p, record=True)
        assert 0.0 <= r.lambda_star <= max(p.max_ratio, 0.0)
        assert r.n_iter <= iteration_bound(r.upper, r.epsilon)
        opt = brute_force_mckp(p).total_value
        assert dual_value(r.lambda_star, p) >= opt - 1e-9
        for lo, hi, mid, d in r.history:
            assert dual_derivative(lo, p) <= 0 <= dual_derivative(hi, p)

    @settings(max_examples=80, deadline=None)
    @given(p=problems(max_n=9))
    def test_near_optimal_and_feasible(self, p):
        a = allocate_dgb(p)
        opt = brute_force_mckp(p)
        assert a.total_cost <= p.budget
        assert a.total_value >= opt.total_value - p.theta.max() - 1e-9
        assert a.total_value <= opt.total_value + 1e-9

    def test_all_nonpositive_effects(self):
        p = AllocationProblem(-np.abs(np.random.default_rng(0).normal(size=(5, 2))), np.ones((5, 2)), 3.0)
        r = solve_dgb(p)
        assert r.lambda_star == 0.0
        assert np.all(allocate_dgb(p).chosen == 0)

    def test_bracket_survives_rounding_at_upper_end(self):
        theta, cost = 6.1538511148125385, 2.2265489941784757
        assert theta - (theta / cost) * cost > 0  # the kink rounds to a positive margin
        p = AllocationProblem([[theta]], [[cost]], 1.0)
        r = solve_dgb(p, record=True)
        lo, hi = r.history[0][:2]
        assert dual_derivative(lo, p) <= 0 <= dual_derivative(hi, p)
        assert r.lambda_star <= p.max_ratio

    def test_zero_budget_terminates(self):
        r = solve_dgb(AllocationProblem([[1.0, 2.0]], [[1.0, 3.0]], 0.0))
        assert r.budget_binding and 0 < r.lambda_star <= 1.0

    def test_non_binding_budget_gives_argmax(self):
        p = AllocationProblem(TOY_THETA, TOY_COST, 1e12)
        r = solve_dgb(p)
        assert r.lambda_star == 0.0 and not r.budget_binding and not r.assumption_holds
        np.testing.assert_array_equal(allocate_dgb(p).chosen, TOY_THETA.argmax(1) + 1)

    @settings(max_examples=40, deadline=None)
    @given(p=problems(max_n=30), scale=st.floats(0.1, 10))
    def test_cost_and_budget_rescaling(self, p, scale):
        scaled = AllocationProblem(p.theta, p.cost * scale, p.budget * scale)
        r, rs = solve_dgb(p), solve_dgb(scaled)
        assume(r.budget_binding)
        # rescaled bisection visits the same sign pattern up to rounding
        assert rs.lambda_star == pytest.approx(r.lambda_star / scale, rel=1e-5)

    @settings(max_examples=40, deadline=None)
    @given(p=problems(max_n=40), data=st.data())
    def test_monotone_in_budget(self, p, data):
        # true effects, no estimation noise: value should never drop as the budget grows
        b1 = data.draw(st.floats(0, p.budget))
        assert allocate_dgb(p.with_budget(b1)).total_value <= allocate_dgb(p).total_value + 1e-9


class TestSelection:
    def test_zero_lambda_argmax(self):
        theta = np.array([[1.0, 3.0], [-1.0, -2.0], [5.0, 5.0]])
        a = select_treatments(AllocationProblem(theta, np.ones((3, 2)), 100.0), 0.0)
        np.testing.assert_array_equal(a.chosen, [2, 0, 1])

    def test_kink_tie_excluded(self):
        a = select_treatments(AllocationProblem([[20.0, 30.0]], [[1.0, 2.0]], 10.0), 15.0)
        np.testing.assert_array_equal(a.chosen, [1])
        a = select_treatments(AllocationProblem([[20.0]], [[2.0]], 10.0), 10.0)
        np.testing.assert_array_equal(a.chosen, [0])

    def test_repair_drops_lowest_margin_user(self):
        theta = np.array([[5.0], [3.0], [4.0], [2.5]])
        p = AllocationProblem(theta, np.ones((4, 1)), 3.0)
        raw = select_treatments(p, 1.0, repair=False)
        assert raw.total_cost == p.budget + 1
        fixed = select_treatments(p, 1.0)
        assert fixed.repaired and fixed.total_cost <= p.budget
        np.testing.assert_array_equal(fixed.chosen, [1, 1, 1, 0])

    def test_repair_prefers_cheaper_arm(self):
        # moving user 1 down to arm 1 loses 0.5 in value; any other fix loses more
        p = AllocationProblem([[10.0, 12.0], [9.0, 9.5]], [[1.0, 2.0], [1.0, 2.0]], 3.0)
        a = select_treatments(p, 0.1)
        assert a.total_cost <= 3.0
        assert a.total_value == brute_force_mckp(p).total_value


class TestBaselines:
    def test_zero_budget(self, toy_problem):
        for policy in (roi_greedy, max_uplift_greedy, brute_force_mckp, allocate_dgb):
            a = policy(toy_problem.with_budget(0.0))
            assert a.total_value == 0.0 and np.all(a.chosen == 0)

    def test_single_user(self):
        p = AllocationProblem([[3.0, 5.0]], [[1.0, 4.0]], 10.0)
        assert brute_force_mckp(p).chosen.tolist() == [2]
        assert max_uplift_greedy(p).chosen.tolist() == [2]

    def test_roi_matches_brute_force_on_one_user(self):
        rng = np.random.default_rng(12)
        checked = 0
        for _ in range(500):
            K = int(rng.integers(1, 4))
            theta, cost = rng.uniform(0, 10, (1, K)), rng.uniform(0.5, 5, (1, K))
            p = AllocationProblem(theta, cost, rng.uniform(0, 6))
            affordable = cost[0] <= p.budget
            roi_arm = int(np.argmax(theta[0] / cost[0]))
            if not affordable[roi_arm] or roi_arm != int(np.argmax(np.where(affordable, theta[0], -np.inf))):
                continue
            checked += 1
            assert roi_greedy(p).total_value == brute_force_mckp(p).total_value
        assert checked > 100

    def test_max_uplift_can_be_suboptimal(self):
        p = AllocationProblem([[9.0, 10.0], [9.0, 10.0]], [[1.0, 5.0], [1.0, 5.0]], 5.0)
        assert max_uplift_greedy(p).total_value < brute_force_mckp(p).total_value

    def test_brute_force_guard(self):
        with pytest.raises(InstanceTooLargeError):
            brute_force_mckp(AllocationProblem(np.ones((13, 3)), np.ones((13, 3)), 1.0))


class TestProblemValidation:
    @pytest.mark.parametrize(
        "theta, cost, budget",
        [([[1.0]], [[0.0]], 1.0), ([[1.0]], [[1.0]], -1.0), ([[np.nan]], [[1.0]], 1.0), ([[1.0, 2.0]], [[1.0]], 1.0)],
    )
    def test_rejects(self, theta, cost, budget):
        with pytest.raises(ValueError):
            AllocationProblem(theta, cost, budget)

    def test_broadcast_cost_row(self):
        p = AllocationProblem(TOY_THETA, [[1.0, 2.0]], 6.0)
        np.testing.assert_array_equal(p.cost, TOY_COST)
