"""Synthetic RCT data with known potential outcomes.

The generating DAG has four observed covariates, a latent ``U``, a
randomized treatment ``T`` and two outcomes (value ``Y`` and cost ``C``)::

    X1 -> X2, X3        X2 -> X3, X4, Y      X3 -> X4, Y, C
    X4 -> Y, C          T  -> Y, C           U  -> Y, C   (latent)

Structural equations (``e*`` are independent standard normal innovations,
``w`` is the uncertainty weight)::

    X1 = e1
    X2 = 0.6 X1 + 0.2 sin(2 X1) + e2
    X3 = 0.4 X1 - 0.3 X2 + 0.2 X1 X2 + 0.3 sin(X2) + e3
    X4 = 0.5 X2 + 0.3 X3 - 0.2 X2 X3 + 0.3 sin(X3) + e4
    Y(0) = 10 + X2 + 0.5 X3 - 0.5 X4 + 0.3 X3 X4 + 0.5 sin(X2) + w (U + eY)
    Y(j) = Y(0) + tau_j(X)
    C_j  = cost_levels[j] * exp(0.15 X3 - 0.1 X4 + 0.1 w U)   (clamped >= 1e-3)

The noise term ``w (U + eY)`` is shared by all potential outcomes of a
sample, so individual effects ``Y(j) - Y(0) = tau_j(X)`` are exact
functions of the observed covariates. ``effect="smooth"`` uses a
saturating dose response whose curvature depends on ``X2 * X3``;
``effect="step"`` is piecewise constant in ``X2``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .dataset import GroundTruth, RCTDataset

FEATURE_NAMES = ("x1", "x2", "x3", "x4")
COST_FLOOR = 1e-3


@dataclass
class SynthConfig:
    n_samples: int = 80_000
    n_treatments: int = 3
    uncertainty_weight: float = 0.0
    seed: int = 0
    cost_levels: Optional[Sequence[float]] = None
    effect: str = "smooth"
    treatment_probs: Optional[Sequence[float]] = None
    treatment_seed: Optional[int] = None

    def __post_init__(self):
        if self.cost_levels is None:
            self.cost_levels = tuple(float(j) for j in range(1, self.n_treatments + 1))
        self.cost_levels = tuple(float(c) for c in self.cost_levels)
        self.validate()

    def validate(self):
        if int(self.n_samples) <= 0:
            raise ValueError(f"n_samples must be positive, got {self.n_samples}")
        if int(self.n_treatments) < 1:
            raise ValueError(f"n_treatments must be >= 1, got {self.n_treatments}")
        if not np.isfinite(self.uncertainty_weight) or self.uncertainty_weight < 0:
            raise ValueError(f"uncertainty_weight must be >= 0, got {self.uncertainty_weight}")
        levels = np.asarray(self.cost_levels)
        if levels.size != self.n_treatments:
            raise ValueError(f"need {self.n_treatments} cost levels, got {levels.size}")
        if np.any(levels <= 0) or np.any(np.diff(levels) <= 0):
            raise ValueError("cost_levels must be positive and strictly increasing")
        if self.effect not in ("smooth", "step"):
            raise ValueError(f"effect must be 'smooth' or 'step', got {self.effect!r}")
        if self.treatment_probs is not None:
            p = np.asarray(self.treatment_probs, dtype=float)
            if p.size != self.n_treatments + 1 or np.any(p <= 0) or not np.isclose(p.sum(), 1.0):
                raise ValueError("treatment_probs must be K+1 positive numbers summing to 1")


def covariates(innovations: np.ndarray) -> np.ndarray:
    """Map standard-normal innovations ``(n, 4)`` to covariates X1..X4."""
    e1, e2, e3, e4 = innovations.T
    x1 = e1
    x2 = 0.6 * x1 + 0.2 * np.sin(2 * x1) + e2
    x3 = 0.4 * x1 - 0.3 * x2 + 0.2 * x1 * x2 + 0.3 * np.sin(x2) + e3
    x4 = 0.5 * x2 + 0.3 * x3 - 0.2 * x2 * x3 + 0.3 * np.sin(x3) + e4
    return np.column_stack([x1, x2, x3, x4])


def baseline_outcome(X: np.ndarray) -> np.ndarray:
    """Noise-free control outcome ``E[Y(0) | X]``."""
    x2, x3, x4 = X[:, 1], X[:, 2], X[:, 3]
    return 10.0 + x2 + 0.5 * x3 - 0.5 * x4 + 0.3 * x3 * x4 + 0.5 * np.sin(x2)


def treatment_effects(X: np.ndarray, n_treatments: int, effect: str = "smooth") -> np.ndarray:
    """True CATE matrix ``tau_j(X)``, shape (n, K)."""
    dose = np.arange(1, n_treatments + 1) / n_treatments
    x2 = X[:, 1]
    if effect == "step":
        high = 2.0 * (1.0 - np.exp(-2.5 * dose))
        low = 2.6 * dose**2
        return np.where((x2 > 0)[:, None], high[None, :], low[None, :])
    x3, x4 = X[:, 2], X[:, 3]
    scale = 2.0 + np.tanh(x2) + 0.5 * np.sin(x4)
    # users with large curvature saturate early, so cheap arms capture most of the gain
    curvature = 0.6 + 6.0 / (1.0 + np.exp(-x2 * x3))
    return scale[:, None] * (1.0 - np.exp(-curvature[:, None] * dose[None, :]))


def cost_factor(X: np.ndarray, latent: np.ndarray, weight: float) -> np.ndarray:
    return np.exp(0.15 * X[:, 2] - 0.1 * X[:, 3] + 0.1 * weight * latent)


def _streams(config: SynthConfig):
    feat_ss, noise_ss, treat_ss = np.random.SeedSequence(config.seed).spawn(3)
    if config.treatment_seed is not None:
        treat_ss = np.random.SeedSequence([config.seed, config.treatment_seed])
    return (np.random.default_rng(s) for s in (feat_ss, noise_ss, treat_ss))


def draw_treatment(n: int, n_treatments: int, rng, probs=None) -> np.ndarray:
    if probs is None:
        return rng.integers(0, n_treatments + 1, size=n)
    return rng.choice(n_treatments + 1, size=n, p=np.asarray(probs, dtype=float))


def generate_synthetic(config: SynthConfig):
    """Draw an RCT sample and its full potential-outcome table.

    Returns
    -------
    data : RCTDataset
        Covariates X1..X4 (the latent is dropped), randomized treatment,
        observed outcome ``Y(T)`` and the cost matrix.
    truth : GroundTruth
        All ``K + 1`` potential outcomes per sample.
    """
    config.validate()
    n, K, w = int(config.n_samples), int(config.n_treatments), float(config.uncertainty_weight)
    feat_rng, noise_rng, treat_rng = _streams(config)

    X = covariates(feat_rng.standard_normal((n, 4)))
    latent = noise_rng.standard_normal(n)
    eps_y = noise_rng.standard_normal(n)

    y0 = baseline_outcome(X) + w * (latent + eps_y)
    po = np.column_stack([y0, y0[:, None] + treatment_effects(X, K, config.effect)])
    cost = np.maximum(np.asarray(config.cost_levels)[None, :] * cost_factor(X, latent, w)[:, None], COST_FLOOR)

    t = draw_treatment(n, K, treat_rng, config.treatment_probs)
    ids = np.arange(n)
    data = RCTDataset(
        features=X,
        treatment=t,
        outcome=po[ids, t],
        cost=cost,
        num_treatments=K,
        feature_names=FEATURE_NAMES,
        ids=ids,
    )
    return data, GroundTruth(po, ids)


def redraw_treatment(data: RCTDataset, truth: GroundTruth, seed: int, probs=None) -> RCTDataset:
    """Re-randomize treatment on fixed potential outcomes.

    Covariates and costs are kept; the observed outcome becomes
    ``Y_i(T_i)`` under the new draw.
    """
    truth.check_matches(data)
    rng = np.random.default_rng(seed)
    t = draw_treatment(data.n_samples, data.num_treatments, rng, probs)
    return RCTDataset(
        features=data.features,
        treatment=t,
        outcome=truth.potential_outcomes[np.arange(data.n_samples), t],
        cost=data.cost,
        num_treatments=data.num_treatments,
        feature_names=data.feature_names,
        ids=data.ids,
    )
