"""Unified discriminative causal forest (UDCF).

One forest serves all K treatments: every node is split with a rule that
looks at the full length-K vector of treatment effects, so the K CATE
estimates for a user always come from the same leaves.

Split selection is two-step. All feasible axis-aligned thresholds are
ranked by the inter-node heterogeneity score computed from per-sample
pseudo-outcomes ``rho`` (one pass per node), then the top ``m`` are
re-ranked by the intra-node spread of the child effect vectors.

Leaves store the node's least-squares effect vector; predictions average
leaves over trees.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np
from joblib import Parallel, delayed
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .dataset import RCTDataset

MODEL_FORMAT = "lbcf-udcf"
MODEL_VERSION = 1


class DegenerateNodeError(ValueError):
    """Node effects are not identified (some arm, possibly control, is empty)."""


class TrainingError(ValueError):
    pass


@dataclass
class TrainParams:
    n_trees: int = 100
    m_candidates: int = 10
    min_samples_per_arm_leaf: int = 10
    max_depth: int = 8
    subsample_fraction: float = 0.5
    feature_subsample_fraction: float = 1.0
    ridge_epsilon: float = 1e-6
    seed: int = 0

    def validate(self):
        for name in ("n_trees", "m_candidates", "min_samples_per_arm_leaf"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if int(self.max_depth) < 0:
            raise ValueError(f"max_depth must be >= 0, got {self.max_depth}")
        for name in ("subsample_fraction", "feature_subsample_fraction"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must be in (0, 1], got {v}")
        if self.ridge_epsilon < 0:
            raise ValueError(f"ridge_epsilon must be >= 0, got {self.ridge_epsilon}")
        return self


@dataclass
class NodeStats:
    theta_hat: np.ndarray
    A: np.ndarray
    rho: np.ndarray
    n: int
    mean_outcome: float
    treatment_counts: np.ndarray


@dataclass
class SplitCandidate:
    feature_index: int
    threshold: float
    inter_score: float
    intra_score: Optional[float] = None


def one_hot_treatment(treatments, K):
    """``T`` with ``T[i, j-1] = 1`` for treatment ``j``; control rows are all zero."""
    t = np.asarray(treatments)
    T = np.zeros((t.size, K))
    treated = t > 0
    T[np.flatnonzero(treated), t[treated] - 1] = 1.0
    return T


def compute_node_stats(outcomes, treatments, K, ridge_epsilon=0.0) -> NodeStats:
    """Effect vector, Gram matrix and pseudo-outcomes for one node.

    Centers the one-hot treatment design and the outcome at the node
    means, solves ``(T'T + eps I) theta = T'Y`` and returns
    ``rho_i = R_i * Q_i`` with residual ``R = Y - T theta`` and
    ``Q = T A^{-1}`` (all centered).

    Raises
    ------
    DegenerateNodeError
        If the node has no samples in some arm, including control.
    """
    y = np.asarray(outcomes, dtype=float)
    t = np.asarray(treatments)
    n = y.size
    if n == 0:
        raise DegenerateNodeError("empty node")
    counts = np.bincount(t, minlength=K + 1)
    if np.any(counts == 0):
        raise DegenerateNodeError(f"arms {np.flatnonzero(counts == 0).tolist()} have no samples")

    T = one_hot_treatment(t, K)
    mean_y = y.mean()
    T_c = T - T.mean(axis=0)
    y_c = y - mean_y
    A = T_c.T @ T_c
    if ridge_epsilon:
        A = A + ridge_epsilon * np.eye(K)
    A_inv = np.linalg.inv(A)
    theta = A_inv @ (T_c.T @ y_c)
    resid = y_c - T_c @ theta
    Q = T_c @ A_inv.T
    rho = resid[:, None] * Q
    return NodeStats(theta, A, rho, n, float(mean_y), counts)


def theta_from_arm_stats(counts, sums, ridge_epsilon=0.0):
    """Batched node effect vectors from per-arm counts and outcome sums.

    Same estimator as :func:`compute_node_stats`, written in terms of
    sufficient statistics: ``T'T - n tbar tbar'`` and ``T'Y - n tbar ybar``.

    Parameters
    ----------
    counts, sums : arrays of shape (m, K+1)

    Returns
    -------
    theta : array of shape (m, K)
    """
    counts = np.asarray(counts, dtype=float)
    sums = np.asarray(sums, dtype=float)
    n = counts.sum(axis=1)
    K = counts.shape[1] - 1
    nt = counts[:, 1:]
    A = nt[:, :, None] * np.eye(K)[None] - nt[:, :, None] * nt[:, None, :] / n[:, None, None]
    if ridge_epsilon:
        A = A + ridge_epsilon * np.eye(K)[None]
    b = sums[:, 1:] - nt * (sums.sum(axis=1) / n)[:, None]
    return np.linalg.solve(A, b[:, :, None])[:, :, 0]


def inter_split_score(rho_left_sums, n_left, rho_right_sums, n_right):
    """Between-children heterogeneity: ``sum_l |sum_{i in l} rho_i|^2 / n_l``."""
    if n_left <= 0 or n_right <= 0:
        raise ValueError("split produced an empty child")
    left = np.asarray(rho_left_sums, dtype=float)
    right = np.asarray(rho_right_sums, dtype=float)
    return float(left @ left / n_left + right @ right / n_right)


def intra_split_score(child_thetas):
    """Within-child spread of the effect vector across treatments."""
    total = 0.0
    for theta in child_thetas:
        theta = np.asarray(theta, dtype=float)
        if not np.all(np.isfinite(theta)):
            raise DegenerateNodeError("child effect vector is not finite")
        total += float(np.sum((theta - theta.mean()) ** 2))
    return total


@dataclass
class _Candidates:
    feature: np.ndarray
    threshold: np.ndarray
    inter: np.ndarray
    left_counts: np.ndarray
    left_sums: np.ndarray

    def take(self, idx):
        return _Candidates(*(a[idx] for a in (self.feature, self.threshold, self.inter, self.left_counts, self.left_sums)))

    def __len__(self):
        return self.feature.size


def score_candidates(X, treatments, outcomes, rho, K, min_per_arm, features=None) -> _Candidates:
    """Every feasible threshold with its inter score and left-child arm stats.

    Thresholds are midpoints between consecutive distinct sorted values;
    a sample goes left when ``x <= threshold``. Candidates that leave
    fewer than ``min_per_arm`` samples of any arm in either child are
    dropped before scoring.
    """
    X = np.asarray(X, dtype=float)
    t = np.asarray(treatments)
    y = np.asarray(outcomes, dtype=float)
    n = y.size
    onehot = np.zeros((n, K + 1))
    onehot[np.arange(n), t] = 1.0
    total_counts = onehot.sum(axis=0)
    rho_total = rho.sum(axis=0)
    features = range(X.shape[1]) if features is None else features

    parts = []
    for f in features:
        x = X[:, f]
        order = np.argsort(x, kind="stable")
        xs = x[order]
        distinct = xs[:-1] < xs[1:]
        if not distinct.any():
            continue
        left_counts = np.cumsum(onehot[order], axis=0)[:-1]
        ok = distinct & (left_counts.min(axis=1) >= min_per_arm) & ((total_counts - left_counts).min(axis=1) >= min_per_arm)
        pos = np.flatnonzero(ok)
        if pos.size == 0:
            continue
        rho_left = np.cumsum(rho[order], axis=0)[pos]
        n_left = (pos + 1).astype(float)
        rho_right = rho_total - rho_left
        inter = np.einsum("ij,ij->i", rho_left, rho_left) / n_left + np.einsum("ij,ij->i", rho_right, rho_right) / (n - n_left)
        left_sums = np.cumsum(onehot[order] * y[order, None], axis=0)[pos]
        lo, hi = xs[pos], xs[pos + 1]
        thr = 0.5 * (lo + hi)
        # midpoint can round up to the right value for adjacent doubles
        thr = np.where(thr >= hi, lo, thr)
        parts.append(_Candidates(np.full(pos.size, f), thr, inter, left_counts[pos], left_sums))

    if not parts:
        empty = np.empty((0, K + 1))
        return _Candidates(np.empty(0, dtype=int), np.empty(0), np.empty(0), empty, empty)
    return _Candidates(*(np.concatenate(a) for a in zip(*((p.feature, p.threshold, p.inter, p.left_counts, p.left_sums) for p in parts))))


def rank_by_inter(cands: _Candidates) -> np.ndarray:
    """Order: inter score descending, then feature index, then threshold."""
    return np.lexsort((cands.threshold, cands.feature, -cands.inter))


def intra_scores(cands: _Candidates, total_counts, total_sums, ridge_epsilon=0.0) -> np.ndarray:
    theta_l = theta_from_arm_stats(cands.left_counts, cands.left_sums, ridge_epsilon)
    theta_r = theta_from_arm_stats(total_counts - cands.left_counts, total_sums - cands.left_sums, ridge_epsilon)
    spread = lambda th: np.sum((th - th.mean(axis=1, keepdims=True)) ** 2, axis=1)
    return spread(theta_l) + spread(theta_r)


def find_best_split(X, treatments, outcomes, params: TrainParams, K=None, features=None, stats: NodeStats = None):
    """Two-step split search on one node.

    Returns
    -------
    SplitCandidate or None
        None when no feasible candidate has a positive inter score.
    """
    t = np.asarray(treatments)
    y = np.asarray(outcomes, dtype=float)
    K = int(t.max()) if K is None else K
    if y.size == 0 or np.ptp(y) == 0:
        return None
    if stats is None:
        try:
            stats = compute_node_stats(y, t, K, params.ridge_epsilon)
        except DegenerateNodeError:
            return None
    cands = score_candidates(X, t, y, stats.rho, K, params.min_samples_per_arm_leaf, features)
    cands = cands.take(np.flatnonzero(cands.inter > 0))
    if len(cands) == 0:
        return None
    top = cands.take(rank_by_inter(cands)[: params.m_candidates])
    onehot_counts = stats.treatment_counts.astype(float)
    sums = np.bincount(t, weights=y, minlength=K + 1)
    intra = intra_scores(top, onehot_counts, sums, params.ridge_epsilon)
    intra = np.where(np.isfinite(intra), intra, -np.inf)
    if not np.isfinite(intra).any():
        return None
    # top is already in tie-break order, so argmax picks the first maximizer
    best = int(np.argmax(intra))
    return SplitCandidate(int(top.feature[best]), float(top.threshold[best]), float(top.inter[best]), float(intra[best]))


@dataclass
class CausalTree:
    """Array-backed binary tree; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_node_samples: np.ndarray

    @property
    def node_count(self) -> int:
        return self.feature.size

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature < 0))

    @property
    def depth(self) -> int:
        depth = np.zeros(self.node_count, dtype=int)
        for node in range(self.node_count):
            if self.feature[node] >= 0:
                depth[self.left[node]] = depth[self.right[node]] = depth[node] + 1
        return int(depth.max())

    def apply(self, X) -> np.ndarray:
        """Leaf index reached by each row of ``X``."""
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = np.flatnonzero(self.feature[node] >= 0)
        while active.size:
            cur = node[active]
            go_left = X[active, self.feature[cur]] <= self.threshold[cur]
            node[active] = np.where(go_left, self.left[cur], self.right[cur])
            active = active[self.feature[node[active]] >= 0]
        return node

    def predict(self, X) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_dict(self):
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "n_node_samples": self.n_node_samples.tolist(),
        }

    @classmethod
    def from_dict(cls, d, K):
        return cls(
            feature=np.asarray(d["feature"], dtype=np.int64),
            threshold=np.asarray(d["threshold"], dtype=float),
            left=np.asarray(d["left"], dtype=np.int64),
            right=np.asarray(d["right"], dtype=np.int64),
            value=np.asarray(d["value"], dtype=float).reshape(-1, K),
            n_node_samples=np.asarray(d["n_node_samples"], dtype=np.int64),
        )


def grow_tree(X, t, y, K, params: TrainParams, rng) -> CausalTree:
    """Depth-first growth of one tree on the given (sub)sample."""
    d = X.shape[1]
    n_feat = max(1, int(math.ceil(params.feature_subsample_fraction * d)))
    feature, threshold, left, right, value, sizes = [], [], [], [], [], []

    def new_node(theta, n):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(theta)
        sizes.append(n)
        return len(feature) - 1

    root_stats = compute_node_stats(y, t, K, params.ridge_epsilon)
    stack = [(np.arange(y.size), 0, new_node(root_stats.theta_hat, y.size), root_stats)]
    while stack:
        idx, depth, node, stats = stack.pop()
        if depth >= params.max_depth:
            continue
        feats = np.sort(rng.choice(d, size=n_feat, replace=False)) if n_feat < d else None
        split = find_best_split(X[idx], t[idx], y[idx], params, K, feats, stats)
        if split is None:
            continue
        goes_left = X[idx, split.feature_index] <= split.threshold
        children = []
        for rows in (idx[goes_left], idx[~goes_left]):
            try:
                child_stats = compute_node_stats(y[rows], t[rows], K, params.ridge_epsilon)
                theta = child_stats.theta_hat
            except DegenerateNodeError:
                child_stats, theta = None, value[node]
            children.append((rows, new_node(theta, rows.size), child_stats))
        feature[node] = split.feature_index
        threshold[node] = split.threshold
        left[node] = children[0][1]
        right[node] = children[1][1]
        # push right first so the left subtree is numbered first
        for rows, child, child_stats in reversed(children):
            if child_stats is not None:
                stack.append((rows, depth + 1, child, child_stats))

    return CausalTree(
        feature=np.asarray(feature, dtype=np.int64),
        threshold=np.asarray(threshold, dtype=float),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        value=np.asarray(value, dtype=float).reshape(-1, K),
        n_node_samples=np.asarray(sizes, dtype=np.int64),
    )


def _stratified_subsample(t, K, fraction, rng):
    if fraction >= 1.0:
        return np.arange(t.size)
    rows = []
    for arm in range(K + 1):
        members = np.flatnonzero(t == arm)
        size = max(1, int(round(fraction * members.size)))
        rows.append(rng.choice(members, size=size, replace=False))
    return np.sort(np.concatenate(rows))


def _fit_tree(X, t, y, K, params, seed_seq):
    rng = np.random.default_rng(seed_seq)
    rows = _stratified_subsample(t, K, params.subsample_fraction, rng)
    return grow_tree(X[rows], t[rows], y[rows], K, params, rng)


@dataclass
class UDCFModel:
    trees: List[CausalTree]
    params: TrainParams
    num_treatments: int
    n_features: int
    feature_names: tuple = field(default_factory=tuple)

    def apply(self, X) -> np.ndarray:
        X = _check_features(X, self.n_features)
        return np.column_stack([tree.apply(X) for tree in self.trees])

    def predict(self, X) -> np.ndarray:
        return predict_cate(self, X)

    def to_dict(self):
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "num_treatments": self.num_treatments,
            "n_features": self.n_features,
            "feature_names": list(self.feature_names),
            "params": asdict(self.params),
            "trees": [tree.to_dict() for tree in self.trees],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d) -> "UDCFModel":
        if d.get("format") != MODEL_FORMAT:
            raise ValueError(f"not a UDCF model document (format={d.get('format')!r})")
        if d.get("version") != MODEL_VERSION:
            raise ValueError(f"unsupported model version {d.get('version')}")
        K = int(d["num_treatments"])
        return cls(
            trees=[CausalTree.from_dict(tree, K) for tree in d["trees"]],
            params=TrainParams(**d["params"]),
            num_treatments=K,
            n_features=int(d["n_features"]),
            feature_names=tuple(d.get("feature_names", ())),
        )

    @classmethod
    def from_json(cls, text) -> "UDCFModel":
        return cls.from_dict(json.loads(text))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "UDCFModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def _check_features(X, n_features):
    X = check_array(X, dtype=float, ensure_2d=False)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.shape[1] != n_features:
        raise ValueError(f"expected {n_features} features, got {X.shape[1]}")
    return X


def fit_arrays(X, treatment, y, K, params: TrainParams, n_jobs=1) -> UDCFModel:
    params.validate()
    X = check_array(X, dtype=float)
    t = np.asarray(treatment, dtype=np.int64)
    y = np.asarray(y, dtype=float)
    if t.shape != (X.shape[0],) or y.shape != (X.shape[0],):
        raise ValueError("X, treatment and y must have the same number of rows")
    if t.min() < 0 or t.max() > K:
        raise ValueError(f"treatment labels must lie in 0..{K}")
    counts = np.bincount(t, minlength=K + 1)
    starved = [j for j in range(K + 1) if counts[j] < params.min_samples_per_arm_leaf]
    if starved:
        raise TrainingError(
            f"arm(s) {starved} have fewer than min_samples_per_arm_leaf="
            f"{params.min_samples_per_arm_leaf} samples at the root"
        )
    seeds = np.random.SeedSequence(params.seed).spawn(params.n_trees)
    trees = Parallel(n_jobs=n_jobs, prefer="threads")(delayed(_fit_tree)(X, t, y, K, params, s) for s in seeds)
    return UDCFModel(list(trees), params, K, X.shape[1])


def train_forest(data: RCTDataset, params: TrainParams, n_jobs=1) -> UDCFModel:
    """Fit a UDCF on an RCT dataset."""
    model = fit_arrays(data.features, data.treatment, data.outcome, data.num_treatments, params, n_jobs)
    model.feature_names = tuple(data.feature_names)
    return model


def predict_cate(model: UDCFModel, X) -> np.ndarray:
    """Mean of the leaf effect vectors over trees, shape (n, K).

    A single feature vector of length d is accepted and returns shape (1, K).
    """
    X = _check_features(X, model.n_features)
    total = np.zeros((X.shape[0], model.num_treatments))
    for tree in model.trees:
        total += tree.predict(X)
    return total / len(model.trees)


class UnifiedCausalForest(BaseEstimator):
    """Multi-treatment causal forest with a unified split rule.

    Parameters
    ----------
    n_trees : int, default=100
    m_candidates : int, default=10
        Number of inter-score leaders re-ranked by the intra score.
    min_samples_per_arm_leaf : int, default=10
        Minimum count of every arm, control included, in each child.
    max_depth : int, default=8
    subsample_fraction : float, default=0.5
        Per-tree stratified subsample drawn without replacement.
    feature_subsample_fraction : float, default=1.0
        Fraction of features tried at each node.
    ridge_epsilon : float, default=1e-6
    random_state : int, default=0
    n_jobs : int, default=1

    Attributes
    ----------
    model_ : UDCFModel
    n_treatments_ : int
    n_features_in_ : int
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
    ):
        self.n_trees = n_trees
        self.m_candidates = m_candidates
        self.min_samples_per_arm_leaf = min_samples_per_arm_leaf
        self.max_depth = max_depth
        self.subsample_fraction = subsample_fraction
        self.feature_subsample_fraction = feature_subsample_fraction
        self.ridge_epsilon = ridge_epsilon
        self.random_state = random_state
        self.n_jobs = n_jobs

    def _train_params(self, seed_offset=0):
        return TrainParams(
            n_trees=self.n_trees,
            m_candidates=self.m_candidates,
            min_samples_per_arm_leaf=self.min_samples_per_arm_leaf,
            max_depth=self.max_depth,
            subsample_fraction=self.subsample_fraction,
            feature_subsample_fraction=self.feature_subsample_fraction,
            ridge_epsilon=self.ridge_epsilon,
            seed=int(self.random_state) + seed_offset,
        )

    def fit(self, X, treatment, y):
        X = check_array(X, dtype=float)
        t = np.asarray(treatment)
        K = int(t.max())
        if K < 1:
            raise ValueError("need at least one treated arm besides control")
        self.model_ = fit_arrays(X, t, y, K, self._train_params(), self.n_jobs)
        self.n_treatments_ = K
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return predict_cate(self.model_, X)

    def apply(self, X):
        check_is_fitted(self, "model_")
        return self.model_.apply(X)


class MultipleBinaryCausalForest(UnifiedCausalForest):
    """K independent one-treatment-vs-control forests.

    Forest ``j`` sees only rows from control and arm ``j``, so a user's K
    estimates generally come from different leaves. Same parameters as
    :class:`UnifiedCausalForest`; with one treatment the intra score is
    identically zero and splits are chosen by the inter score alone.
    """

    def fit(self, X, treatment, y):
        X = check_array(X, dtype=float)
        t = np.asarray(treatment, dtype=np.int64)
        y = np.asarray(y, dtype=float)
        K = int(t.max())
        self.models_ = []
        for j in range(1, K + 1):
            rows = np.flatnonzero((t == 0) | (t == j))
            binary = (t[rows] == j).astype(np.int64)
            self.models_.append(fit_arrays(X[rows], binary, y[rows], 1, self._train_params(seed_offset=j), self.n_jobs))
        self.n_treatments_ = K
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "models_")
        return np.column_stack([predict_cate(m, X)[:, 0] for m in self.models_])

    def apply(self, X):
        check_is_fitted(self, "models_")
        return np.stack([m.apply(X) for m in self.models_], axis=0)
