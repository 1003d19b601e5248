"""Budget-constrained treatment assignment (multi-choice knapsack).

Each user receives at most one of K treatments; treatment ``j`` for user
``i`` is worth ``theta[i, j-1]`` and costs ``cost[i, j-1]``; the total cost
must stay within ``budget``. The Lagrangian dual

    L(lam) = sum_i max(0, max_j theta_ij - lam * c_ij) + lam * B

is convex and piecewise linear in ``lam``; :func:`solve_dgb` bisects on the
sign of its subgradient over ``[0, max_ij theta_ij / c_ij]``.

The per-user terms are independent, so the dual value and derivative are
computed as a map over row shards followed by an exact sum: the result is
the same for any shard layout.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import List, Optional

import numpy as np
from joblib import Parallel, delayed

BRUTE_FORCE_LIMIT = 4**12
BLOCK_SIZE = 2**20


class InstanceTooLargeError(ValueError):
    pass


def exact_sum(values) -> Fraction:
    """Exact (rational) sum of float64 values.

    Values are split as ``mantissa * 2**exponent``; integer mantissas are
    summed per exponent in int64, so the cost is a few vectorized passes
    plus one small Python loop over distinct exponents.
    """
    v = np.asarray(values, dtype=float).ravel()
    v = v[v != 0]
    if v.size == 0:
        return Fraction(0)
    mant, expo = np.frexp(v)
    m = (mant * 2.0**53).astype(np.int64)
    hi = m >> 26
    lo = m - (hi << 26)
    total = Fraction(0)
    for e in np.unique(expo):
        sel = expo == e
        s = int(hi[sel].sum()) * (1 << 26) + int(lo[sel].sum())
        total += Fraction(s) * Fraction(2) ** (int(e) - 53)
    return total


@dataclass(frozen=True, eq=False)
class AllocationProblem:
    """Predicted uplifts, costs and a budget.

    Parameters
    ----------
    theta : array of shape (n_users, K)
    cost : array of shape (n_users, K), strictly positive
    budget : float, >= 0
    """

    theta: np.ndarray
    cost: np.ndarray
    budget: float

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float, ndmin=2)
        cost = np.array(self.cost, dtype=float, ndmin=2)
        if cost.shape != theta.shape:
            if cost.ndim == 2 and cost.shape[0] == 1 and cost.shape[1] == theta.shape[1]:
                cost = np.repeat(cost, theta.shape[0], axis=0)
            else:
                raise ValueError(f"theta {theta.shape} and cost {cost.shape} shapes differ")
        if not (np.isfinite(theta).all() and np.isfinite(cost).all()):
            raise ValueError("theta and cost must be finite")
        if np.any(cost <= 0):
            raise ValueError("costs must be strictly positive")
        budget = float(self.budget)
        if not math.isfinite(budget) or budget < 0:
            raise ValueError(f"budget must be finite and >= 0, got {self.budget}")
        for a in (theta, cost):
            a.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "cost", cost)
        object.__setattr__(self, "budget", budget)

    @property
    def n_users(self) -> int:
        return self.theta.shape[0]

    @property
    def n_treatments(self) -> int:
        return self.theta.shape[1]

    @property
    def max_ratio(self) -> float:
        """``max_ij theta_ij / c_ij``: upper end of the multiplier search interval."""
        if self.theta.size == 0:
            return 0.0
        return float(np.max(self.theta / self.cost))

    @property
    def budget_binding_possible(self) -> bool:
        """True when ``B < sum_i max_j c_ij`` (otherwise any choice is affordable)."""
        return Fraction(self.budget) < exact_sum(self.cost.max(axis=1))

    def rows(self, idx) -> "AllocationProblem":
        return AllocationProblem(self.theta[idx], self.cost[idx], self.budget)

    def with_budget(self, budget) -> "AllocationProblem":
        return AllocationProblem(self.theta, self.cost, budget)


@dataclass
class Assignment:
    """Per-user chosen treatment (0 = control) and its totals.

    ``total_value`` and ``total_cost`` are correctly rounded sums over
    treated users, so they can be recomputed exactly from ``chosen``.
    """

    chosen: np.ndarray
    total_value: float
    total_cost: float
    lambda_star: Optional[float] = None
    margin: Optional[np.ndarray] = None
    repaired: bool = False
    budget_binding: bool = True
    n_iter: int = 0

    @classmethod
    def from_choice(cls, problem: AllocationProblem, chosen, **kwargs) -> "Assignment":
        chosen = np.asarray(chosen, dtype=np.int64)
        value, cost = assignment_totals(problem, chosen)
        return cls(chosen=chosen, total_value=value, total_cost=cost, **kwargs)


def assignment_totals(problem: AllocationProblem, chosen):
    chosen = np.asarray(chosen)
    rows = np.flatnonzero(chosen > 0)
    cols = chosen[rows] - 1
    return math.fsum(problem.theta[rows, cols]), math.fsum(problem.cost[rows, cols])


def _best_arm(problem: AllocationProblem, lam):
    """Best arm index (0-based, lowest index on ties) and its margin per user."""
    margins = problem.theta - lam * problem.cost
    best = np.argmax(margins, axis=1)
    return best, margins[np.arange(best.size), best]


def _map_shards(fn, problem, n_shards, n_jobs):
    n = problem.n_users
    n_shards = max(1, min(int(n_shards), max(n, 1)))
    if n_shards == 1:
        return [fn(problem)]
    bounds = np.linspace(0, n, n_shards + 1).astype(int)
    shards = [problem.rows(slice(a, b)) for a, b in zip(bounds[:-1], bounds[1:])]
    return Parallel(n_jobs=n_jobs, prefer="threads")(delayed(fn)(s) for s in shards)


def _dual_terms(problem, lam):
    return exact_sum(np.maximum(0.0, (problem.theta - lam * problem.cost).max(axis=1)))


def _selected_cost(problem, lam):
    best, margin = _best_arm(problem, lam)
    rows = np.flatnonzero(margin > 0)
    return exact_sum(problem.cost[rows, best[rows]])


def dual_value(lam, problem: AllocationProblem, n_shards=1, n_jobs=1) -> float:
    """``L(lam) = sum_i max(0, max_j theta_ij - lam c_ij) + lam B``."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    parts = _map_shards(lambda p: _dual_terms(p, lam), problem, n_shards, n_jobs)
    return float(sum(parts, Fraction(0)) + Fraction(lam) * Fraction(problem.budget))


def dual_derivative(lam, problem: AllocationProblem, n_shards=1, n_jobs=1) -> float:
    """Subgradient ``B - sum of costs of the arms selected at lam``.

    Selection follows :func:`select_treatments` without repair: a user is
    treated only if the best margin is strictly positive, and ties between
    arms go to the lowest index.
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    parts = _map_shards(lambda p: _selected_cost(p, lam), problem, n_shards, n_jobs)
    return float(Fraction(problem.budget) - sum(parts, Fraction(0)))


@dataclass
class DGBResult:
    lambda_star: float
    n_iter: int
    budget_binding: bool
    assumption_holds: bool
    upper: float
    epsilon: float
    history: List[tuple] = field(default_factory=list)


def iteration_bound(upper, epsilon) -> int:
    """Worst-case bisection steps: ``floor(log2(upper / epsilon)) + 1``."""
    if upper <= epsilon:
        return 0
    return int(math.floor(math.log2(upper / epsilon))) + 1


def solve_dgb(problem: AllocationProblem, epsilon=None, n_shards=1, n_jobs=1, record=False) -> DGBResult:
    """Bisection on the sign of the dual subgradient.

    The bracket starts at ``[0, max_ij theta_ij / c_ij]``; the right end
    moves to the midpoint when the subgradient there is positive, the left
    end otherwise. Stops when the bracket is no wider than ``epsilon``
    (default ``1e-6 * max_ij theta_ij / c_ij``) and returns the midpoint.

    When the budget cannot bind (``B >= sum_i max_j c_ij``), or when the
    unconstrained choice ``argmax_j theta_ij`` already fits, returns
    ``lambda_star = 0`` with ``budget_binding=False``.

    With ``record=True`` the history holds one
    ``(lo, hi, mid, derivative_at_mid)`` tuple per evaluation.
    """
    upper = max(problem.max_ratio, 0.0)
    if epsilon is None:
        epsilon = 1e-6 * upper
    holds = problem.budget_binding_possible
    if upper <= 0 or not holds:
        return DGBResult(0.0, 0, False, holds, upper, epsilon)
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    deriv = lambda lam: dual_derivative(lam, problem, n_shards, n_jobs)
    if deriv(0.0) >= 0:
        return DGBResult(0.0, 0, False, holds, upper, epsilon)

    lo, hi = 0.0, upper
    # theta - (theta / c) * c can round to a tiny positive margin; step past
    # it so that nobody is selected at the right end (derivative exactly B)
    while deriv(hi) < problem.budget:
        hi = float(np.nextafter(hi, np.inf))
    mid = 0.5 * (lo + hi)
    d = deriv(mid)
    history = [(lo, hi, mid, d)] if record else []
    n_iter = 0
    while hi - lo > epsilon:
        if d > 0:
            hi = mid
        else:
            lo = mid
        mid = 0.5 * (lo + hi)
        d = deriv(mid)
        n_iter += 1
        if record:
            history.append((lo, hi, mid, d))
    return DGBResult(mid, n_iter, True, holds, upper, epsilon, history)


def _downgrades(problem, margins, chosen, rows):
    """Cheapest-loss move to a strictly cheaper arm (control included) for ``rows``.

    Returns the target arm (1-based, 0 = control), the margin lost and the
    cost saved per row.
    """
    cur = chosen[rows] - 1
    cur_cost = problem.cost[rows, cur]
    cur_margin = margins[rows, cur]
    cand = np.where(problem.cost[rows] < cur_cost[:, None], margins[rows], -np.inf)
    alt = np.argmax(cand, axis=1)
    alt_margin = cand[np.arange(rows.size), alt]
    to_control = alt_margin <= 0
    target = np.where(to_control, 0, alt + 1)
    new_margin = np.where(to_control, 0.0, alt_margin)
    new_cost = np.where(to_control, 0.0, problem.cost[rows, alt])
    return target, cur_margin - new_margin, cur_cost - new_cost


def select_treatments(problem: AllocationProblem, lambda_star, repair=True) -> Assignment:
    """Choose ``argmax_j theta_ij - lam c_ij`` when that margin is positive.

    If the selection overspends and ``repair`` is set, treated users are
    moved down to their best strictly cheaper option (another arm, or
    control when no cheaper arm keeps a positive margin) in ascending order
    of margin lost, lowest user index first on ties, until the total cost
    fits the budget. When the only cheaper option is control the margin
    lost is the user's margin, so with a single treatment this drops the
    lowest-margin users.
    """
    if lambda_star < 0:
        raise ValueError("lambda must be >= 0")
    margins = problem.theta - lambda_star * problem.cost
    best, margin = _best_arm(problem, lambda_star)
    treated = margin > 0
    chosen = np.where(treated, best + 1, 0)
    _, total_cost = assignment_totals(problem, chosen)
    repaired = False
    while repair and total_cost > problem.budget:
        repaired = True
        rows = np.flatnonzero(chosen > 0)
        target, loss, saved = _downgrades(problem, margins, chosen, rows)
        order = np.argsort(loss, kind="stable")
        k = int(np.searchsorted(np.cumsum(saved[order]), total_cost - problem.budget))
        for idx in order[: k + 1]:
            chosen[rows[idx]] = target[idx]
        _, total_cost = assignment_totals(problem, chosen)
        # one pass may stop short by rounding; later passes move a user at most one step each
    margin = np.where(chosen > 0, margins[np.arange(chosen.size), np.maximum(chosen - 1, 0)], 0.0)
    return Assignment.from_choice(problem, chosen, lambda_star=float(lambda_star), margin=margin, repaired=repaired)


def allocate_dgb(problem: AllocationProblem, epsilon=None, n_shards=1, n_jobs=1) -> Assignment:
    """Solve for the multiplier and select treatments (the full DGB policy)."""
    result = solve_dgb(problem, epsilon, n_shards, n_jobs)
    assignment = select_treatments(problem, result.lambda_star)
    assignment.budget_binding = result.budget_binding
    assignment.n_iter = result.n_iter
    return assignment


def _enumerate(theta, cost):
    """Value and cost of every assignment of the given users, user 0 most significant."""
    value, total = np.zeros(1), np.zeros(1)
    for v_i, c_i in zip(theta, cost):
        value = (value[:, None] + np.concatenate([[0.0], v_i])[None, :]).ravel()
        total = (total[:, None] + np.concatenate([[0.0], c_i])[None, :]).ravel()
    return value, total


def brute_force_mckp(problem: AllocationProblem) -> Assignment:
    """Exact optimum by enumerating all ``(K+1)^N`` assignments.

    Among optimal assignments the first in lexicographic order of
    ``chosen`` (user 0 most significant) is returned. The trailing users
    are enumerated as one vectorized block and the leading users in an
    outer loop, so memory stays bounded.
    """
    N, K = problem.theta.shape
    if (K + 1) ** N > BRUTE_FORCE_LIMIT:
        raise InstanceTooLargeError(f"(K+1)^N = {(K + 1) ** N} exceeds {BRUTE_FORCE_LIMIT}")
    n_tail = N
    while (K + 1) ** n_tail > BLOCK_SIZE:
        n_tail -= 1
    n_head = N - n_tail
    tail_value, tail_cost = _enumerate(problem.theta[n_head:], problem.cost[n_head:])
    head_value, head_cost = _enumerate(problem.theta[:n_head], problem.cost[:n_head])
    best, best_flat = -np.inf, 0
    for h in range(head_value.size):
        value = np.where(head_cost[h] + tail_cost <= problem.budget, head_value[h] + tail_value, -np.inf)
        k = int(np.argmax(value))
        if value[k] > best:
            best, best_flat = value[k], h * tail_value.size + k
    chosen = np.unravel_index(best_flat, (K + 1,) * N) if N else ()
    return Assignment.from_choice(problem, np.asarray(chosen, dtype=np.int64).reshape(N))


def _greedy_admit(problem, arm, score):
    """Admit users by descending score while their arm's cost fits; skip the rest."""
    rows = np.flatnonzero(score > 0)
    order = rows[np.argsort(-score[rows], kind="stable")]
    chosen = np.zeros(problem.n_users, dtype=np.int64)
    spent = 0.0
    for i in order:
        c = problem.cost[i, arm[i]]
        if spent + c <= problem.budget:
            spent += c
            chosen[i] = arm[i] + 1
    return Assignment.from_choice(problem, chosen)


def roi_greedy(problem: AllocationProblem) -> Assignment:
    """Best-ROI arm per user, users admitted by ROI until the budget is used.

    A user whose arm no longer fits is skipped and the scan continues.
    """
    roi = problem.theta / problem.cost
    arm = np.argmax(roi, axis=1)
    return _greedy_admit(problem, arm, roi[np.arange(problem.n_users), arm])


def max_uplift_greedy(problem: AllocationProblem) -> Assignment:
    """Largest-uplift arm per user, users admitted by uplift until the budget is used."""
    arm = np.argmax(problem.theta, axis=1)
    return _greedy_admit(problem, arm, problem.theta[np.arange(problem.n_users), arm])


POLICIES = {
    "dgb": allocate_dgb,
    "roi-greedy": roi_greedy,
    "max-uplift-greedy": max_uplift_greedy,
}

