"""End-to-end estimator: fit a UDCF on RCT data, then allocate under a budget."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_is_fitted

from .dgb import AllocationProblem, allocate_dgb, max_uplift_greedy, roi_greedy
from .udcf import MultipleBinaryCausalForest, UnifiedCausalForest

POLICY_NAMES = ("lbcf", "roi-greedy", "max-uplift-greedy", "mbcf-dgb")


class LBCF(UnifiedCausalForest):
    """UDCF effect estimates followed by dual-bisection allocation.

    Takes every :class:`UnifiedCausalForest` parameter plus ``epsilon``
    (bisection tolerance, default relative ``1e-6``).

    Examples
    --------
    >>> model = LBCF(n_trees=20).fit(X, treatment, y)        # doctest: +SKIP
    >>> assignment = model.allocate(X_new, cost_new, budget)  # doctest: +SKIP
    """

    def __init__(
        self,
        n_trees=100,
        m_candidates=10,
        min_samples_per_arm_leaf=10,
        max_depth=8,
        subsample_fraction=0.5,
        feature_subsample_fraction=1.0,
        ridge_epsilon=1e-6,
        random_state=0,
        n_jobs=1,
        epsilon=None,
    ):
        super().__init__(
            n_trees=n_trees,
            m_candidates=m_candidates,
            min_samples_per_arm_leaf=min_samples_per_arm_leaf,
            max_depth=max_depth,
            subsample_fraction=subsample_fraction,
            feature_subsample_fraction=feature_subsample_fraction,
            ridge_epsilon=ridge_epsilon,
            random_state=random_state,
            n_jobs=n_jobs,
        )
        self.epsilon = epsilon

    def allocate(self, X, cost, budget):
        check_is_fitted(self, "model_")
        problem = AllocationProblem(self.predict(X), cost, budget)
        return allocate_dgb(problem, self.epsilon, n_jobs=self.n_jobs)


def forest_params(**overrides):
    """Keyword arguments shared by the UDCF and MBCF estimators."""
    params = UnifiedCausalForest().get_params()
    params.update(overrides)
    return params


def fit_effect_models(train, policies, n_jobs=1, **params):
    """Fit the effect models the requested policies need.

    Returns a dict with keys ``"udcf"`` and/or ``"mbcf"``.
    """
    params = forest_params(n_jobs=n_jobs, **params)
    models = {}
    if any(p != "mbcf-dgb" for p in policies):
        models["udcf"] = UnifiedCausalForest(**params).fit(train.features, train.treatment, train.outcome)
    if "mbcf-dgb" in policies:
        models["mbcf"] = MultipleBinaryCausalForest(**params).fit(train.features, train.treatment, train.outcome)
    return models


def policy_table(models, X, epsilon=None):
    """Map policy name to ``(theta, allocator)``.

    The greedy baselines and LBCF share the UDCF estimates so they differ
    only in the allocation step; ``mbcf-dgb`` differs only in the
    estimator.
    """
    table = {}
    if "udcf" in models:
        theta = models["udcf"].predict(X)
        table["lbcf"] = (theta, lambda p: allocate_dgb(p, epsilon))
        table["roi-greedy"] = (theta, roi_greedy)
        table["max-uplift-greedy"] = (theta, max_uplift_greedy)
    if "mbcf" in models:
        table["mbcf-dgb"] = (models["mbcf"].predict(X), lambda p: allocate_dgb(p, epsilon))
    return table


def default_budget_grid(cost, n_budgets=5, low=0.1, high=0.5):
    """Budgets spanning ``low..high`` of the cost of giving everyone their priciest arm."""
    full = float(np.sum(np.max(cost, axis=1)))
    return list(np.linspace(low, high, n_budgets) * full)
