"""Offline scoring of treatment-selection policies.

:func:`evaluate_pmg` works on RCT data, where only the outcome under the
randomized arm is observed. Rows whose randomized arm agrees with the
policy's arm (the overlap subset of that arm) stand in for every row the
policy sends there; randomization makes the overlap a random subsample.

:func:`evaluate_ite` needs the full potential-outcome table and is only
available for synthetic data.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from .dataset import GroundTruth, RCTDataset
from .dgb import AllocationProblem, Assignment


class UnevaluablePolicyError(ValueError):
    """The policy sends users to an arm with no overlapping RCT samples."""

    def __init__(self, message, arm):
        super().__init__(message)
        self.arm = arm


class UndefinedMetricError(ValueError):
    """The control mean is zero, so the normalized metric is undefined."""


@dataclass
class ArmStats:
    arm: int
    policy_size: int
    overlap_size: int
    overlap_mean: Optional[float]


@dataclass
class PolicyEvaluation:
    pmg: float
    per_treatment: List[ArmStats]
    control_mean: float
    consumed_budget_estimate: float
    n_samples: int

    def to_dict(self):
        return asdict(self)


@dataclass
class ITEEvaluation:
    tau_syn: float
    mu_0: float
    raw_gain: float

    def to_dict(self):
        return asdict(self)


def _chosen(assignment) -> np.ndarray:
    chosen = assignment.chosen if isinstance(assignment, Assignment) else assignment
    return np.asarray(chosen, dtype=np.int64)


def policy_cost(chosen, cost) -> float:
    rows = np.flatnonzero(chosen > 0)
    return math.fsum(cost[rows, chosen[rows] - 1])


def pmg_from_arm_stats(per_treatment: Sequence[ArmStats], control_mean: float, n_samples: int) -> float:
    """``(sum_j |A(j)|/N * ybar(j) - mu0) / mu0`` from the per-arm tallies."""
    if control_mean == 0:
        raise UndefinedMetricError("control-arm mean outcome is zero; PMG is undefined")
    policy_mean = math.fsum(
        (s.policy_size / n_samples) * s.overlap_mean for s in per_treatment if s.policy_size > 0
    )
    return (policy_mean - control_mean) / control_mean


def evaluate_pmg(assignment, data: RCTDataset) -> PolicyEvaluation:
    """Percentage mean gain of a policy on RCT data.

    Parameters
    ----------
    assignment : Assignment or int array of shape (n_samples,)
        Policy treatment per row of ``data``.
    data : RCTDataset
        Must come from a randomized trial; this is not checked.

    Raises
    ------
    UnevaluablePolicyError
        Some arm receives users but has no overlapping RCT sample.
    UndefinedMetricError
        The control mean is zero.
    """
    chosen = _chosen(assignment)
    N, K = data.n_samples, data.num_treatments
    if chosen.shape != (N,):
        raise ValueError(f"assignment covers {chosen.size} rows, dataset has {N}")
    if chosen.min(initial=0) < 0 or chosen.max(initial=0) > K:
        raise ValueError(f"assignment arms must lie in 0..{K}")
    y, t = data.outcome, data.treatment

    per_treatment = []
    for j in range(K + 1):
        in_policy = chosen == j
        overlap = in_policy & (t == j)
        n_a, n_s = int(in_policy.sum()), int(overlap.sum())
        if n_a > 0 and n_s == 0:
            raise UnevaluablePolicyError(
                f"policy assigns {n_a} users to arm {j} but none of them received arm {j} in the RCT", j
            )
        per_treatment.append(ArmStats(j, n_a, n_s, float(np.mean(y[overlap])) if n_s else None))

    control_mean = float(np.mean(y[t == 0]))
    pmg = pmg_from_arm_stats(per_treatment, control_mean, N)
    return PolicyEvaluation(pmg, per_treatment, control_mean, policy_cost(chosen, data.cost), N)


def evaluate_ite(assignment, truth: GroundTruth) -> ITEEvaluation:
    """Mean true individual effect of the chosen arms, normalized by ``mean Y(0)``."""
    chosen = _chosen(assignment)
    po = truth.potential_outcomes
    if chosen.shape != (po.shape[0],):
        raise ValueError(f"assignment covers {chosen.size} rows, ground truth has {po.shape[0]}")
    mu_0 = float(np.mean(po[:, 0]))
    if mu_0 == 0:
        raise UndefinedMetricError("mean control potential outcome is zero; ITE metric is undefined")
    rows = np.arange(chosen.size)
    raw_gain = math.fsum(po[rows, chosen] - po[:, 0]) / chosen.size
    return ITEEvaluation(raw_gain / mu_0, mu_0, raw_gain)


Policy = Callable[[AllocationProblem], Assignment]


def budget_sweep(
    policy: Policy,
    theta,
    data: RCTDataset,
    budgets: Sequence[float],
    truth: Optional[GroundTruth] = None,
    policy_name: str = "policy",
) -> List[dict]:
    """Run ``policy`` at each budget and score it.

    The policy sees ``AllocationProblem(theta, data.cost, budget)``. The
    metric is the ITE score when ``truth`` is given, PMG otherwise. A
    failing budget yields a row with ``metric=None`` and the error text
    instead of aborting the sweep.

    Returns
    -------
    list of dict
        Keys ``budget, metric, consumed_budget, policy, error``.
    """
    budgets = [float(b) for b in budgets]
    if any(b < 0 for b in budgets) or any(b2 < b1 for b1, b2 in zip(budgets, budgets[1:])):
        raise ValueError("budgets must be non-negative and ascending")
    theta = np.asarray(theta, dtype=float)
    rows = []
    for b in budgets:
        row = {"budget": b, "metric": None, "consumed_budget": None, "policy": policy_name, "error": None}
        try:
            assignment = policy(AllocationProblem(theta, data.cost, b))
            row["consumed_budget"] = policy_cost(assignment.chosen, data.cost)
            if truth is not None:
                row["metric"] = evaluate_ite(assignment, truth).tau_syn
            else:
                row["metric"] = evaluate_pmg(assignment, data).pmg
        except (ValueError, ArithmeticError) as exc:
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    return rows
