"""
Model explanations: exact path-dependent tree Shapley values, mean |SHAP|
importance ranking, long-format beeswarm export and partial dependence.

Shapley values for boosting are on the margin (log-odds) scale. For forests
they explain the averaged leaf probability.
"""
import logging
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
import pandas as pd

from classifiers import KIND_BOOSTING, LEAF
from errors import DegenerateFeatureError, EmptyCohortError, MalformedModelError, WidthMismatchError

logger = logging.getLogger(__name__)

MEAN_ANCHORED = 'mean-anchored'
AVERAGED = 'average'
DEFAULT_PERCENTILES = (2.5, 97.5)


@dataclass
class ShapAttribution:
    phi: np.ndarray
    base_value: float

    @property
    def output(self):
        return self.base_value + float(np.sum(self.phi))


@dataclass
class ShapValues:
    """Attributions for a block of rows"""
    values: np.ndarray
    base_value: float
    feature_names: Optional[List[str]] = None

    def __len__(self):
        return self.values.shape[0]

    def row(self, i):
        return ShapAttribution(phi=self.values[i].copy(), base_value=self.base_value)


class _TreeView:
    """Plain-list copy of a tree; list indexing is much faster than numpy scalar access in the recursion"""

    def __init__(self, tree):
        if np.any(tree.cover <= 0):
            bad = int(np.flatnonzero(tree.cover <= 0)[0])
            logger.error(f"Tree node {bad} has cover {tree.cover[bad]}")
            raise MalformedModelError(f"Tree node {bad} has non-positive cover; Shapley weights are undefined")
        self.feature = tree.feature.tolist()
        self.threshold = tree.threshold.tolist()
        self.left = tree.left.tolist()
        self.right = tree.right.tolist()
        self.cover = tree.cover.tolist()
        self.value = tree.value.tolist()

    def expectation(self, node=0):
        """Cover-weighted expected leaf value below ``node``"""
        if self.feature[node] == LEAF:
            return self.value[node]
        l, r = self.left[node], self.right[node]
        return (self.cover[l] * self.expectation(l) + self.cover[r] * self.expectation(r)) / self.cover[node]


# Path elements are [feature, zero_fraction, one_fraction, permutation_weight].

def _extend_path(path, zero_fraction, one_fraction, feature):
    depth = len(path)
    path.append([feature, zero_fraction, one_fraction, 1.0 if depth == 0 else 0.0])
    for i in range(depth - 1, -1, -1):
        path[i + 1][3] += one_fraction * path[i][3] * (i + 1) / (depth + 1)
        path[i][3] = zero_fraction * path[i][3] * (depth - i) / (depth + 1)


def _unwind_path(path, index):
    depth = len(path) - 1
    _, zero_fraction, one_fraction, _ = path[index]
    next_one = path[depth][3]
    for i in range(depth - 1, -1, -1):
        if one_fraction != 0:
            tmp = path[i][3]
            path[i][3] = next_one * (depth + 1) / ((i + 1) * one_fraction)
            next_one = tmp - path[i][3] * zero_fraction * (depth - i) / (depth + 1)
        else:
            path[i][3] = path[i][3] * (depth + 1) / (zero_fraction * (depth - i))
    for i in range(index, depth):
        path[i][:3] = path[i + 1][:3]
    path.pop()


def _unwound_path_sum(path, index):
    depth = len(path) - 1
    _, zero_fraction, one_fraction, _ = path[index]
    next_one = path[depth][3]
    total = 0.0
    for i in range(depth - 1, -1, -1):
        if one_fraction != 0:
            tmp = next_one * (depth + 1) / ((i + 1) * one_fraction)
            total += tmp
            next_one = path[i][3] - tmp * zero_fraction * (depth - i) / (depth + 1)
        else:
            total += path[i][3] / zero_fraction / ((depth - i) / (depth + 1))
    return total


def _recurse(tree, x, phi, node, parent_path, zero_fraction, one_fraction, feature):
    path = [list(e) for e in parent_path]
    _extend_path(path, zero_fraction, one_fraction, feature)

    split = tree.feature[node]
    if split == LEAF:
        value = tree.value[node]
        for i in range(1, len(path)):
            w = _unwound_path_sum(path, i)
            phi[path[i][0]] += w * (path[i][2] - path[i][1]) * value
        return

    left, right = tree.left[node], tree.right[node]
    if x[split] <= tree.threshold[node]:
        hot, cold = left, right
    else:
        hot, cold = right, left

    incoming_zero, incoming_one = 1.0, 1.0
    for k in range(1, len(path)):
        if path[k][0] == split:
            incoming_zero, incoming_one = path[k][1], path[k][2]
            _unwind_path(path, k)
            break

    cover = tree.cover[node]
    _recurse(tree, x, phi, hot, path, incoming_zero * tree.cover[hot] / cover, incoming_one, split)
    _recurse(tree, x, phi, cold, path, incoming_zero * tree.cover[cold] / cover, 0.0, split)


def _tree_phi(view, x, n_features):
    phi = [0.0] * n_features
    _recurse(view, x, phi, 0, [], 1.0, 1.0, -1)
    return phi


def single_tree_shap(tree, row):
    """Attribution of one tree's raw leaf output"""
    view = _TreeView(tree)
    x = [float(v) for v in np.asarray(row, dtype=float).ravel()]
    return ShapAttribution(phi=np.asarray(_tree_phi(view, x, len(x))), base_value=view.expectation())


def _ensemble_views(ensemble):
    return [_TreeView(t) for t in ensemble.trees]


def _base_value(ensemble, views):
    return ensemble.base_score + ensemble.tree_scale * sum(v.expectation() for v in views)


def _row_phi(ensemble, views, x):
    total = [0.0] * ensemble.n_features
    for view in views:
        for j, v in enumerate(_tree_phi(view, x, ensemble.n_features)):
            total[j] += v
    return np.asarray(total) * ensemble.tree_scale


def tree_shap(ensemble, row):
    row = np.asarray(row, dtype=float).ravel()
    if row.size != ensemble.n_features:
        raise WidthMismatchError(f"tree_shap: row width {row.size} does not match training width {ensemble.n_features}")
    views = _ensemble_views(ensemble)
    return ShapAttribution(phi=_row_phi(ensemble, views, row.tolist()), base_value=_base_value(ensemble, views))


def tree_shap_matrix(ensemble, X, check_tolerance=1e-6):
    """Attributions for every row of X, checked for local accuracy against the model output"""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != ensemble.n_features:
        raise WidthMismatchError(f"tree_shap_matrix: expected {ensemble.n_features} columns, got shape {X.shape}")
    views = _ensemble_views(ensemble)
    base = _base_value(ensemble, views)
    values = np.vstack([_row_phi(ensemble, views, x) for x in X.tolist()]) if len(X) else np.zeros((0, X.shape[1]))

    if check_tolerance is not None and len(X):
        gap = np.max(np.abs(base + values.sum(axis=1) - ensemble.raw_output(X)))
        if gap > check_tolerance:
            logger.warning(f"Local accuracy gap {gap:.3e} exceeds {check_tolerance:g}")
        else:
            logger.debug(f"Local accuracy gap {gap:.3e}")
    scale = 'margin' if ensemble.kind == KIND_BOOSTING else 'probability'
    logger.info(f"Computed {scale}-scale Shapley values for {len(X)} rows over {len(views)} trees")
    return ShapValues(values=values, base_value=base, feature_names=ensemble.feature_names)


@dataclass
class ImportanceRanking:
    features: List[str]
    mean_abs_shap: List[float]
    feature_index: List[int]

    def __len__(self):
        return len(self.features)

    def top(self, k):
        return ImportanceRanking(self.features[:k], self.mean_abs_shap[:k], self.feature_index[:k])

    def rank_of(self, feature):
        return self.features.index(feature) + 1

    def to_frame(self):
        return pd.DataFrame({
            'rank': np.arange(1, len(self.features) + 1),
            'feature': self.features,
            'mean_abs_shap': self.mean_abs_shap,
        })


def global_importance(shap_values, feature_names=None):
    values = shap_values.values if isinstance(shap_values, ShapValues) else np.asarray(shap_values, dtype=float)
    if feature_names is None and isinstance(shap_values, ShapValues):
        feature_names = shap_values.feature_names
    if values.ndim != 2 or values.shape[0] == 0:
        raise EmptyCohortError("Importance needs at least one attributed row")
    p = values.shape[1]
    names = list(feature_names) if feature_names is not None else [f'x{j}' for j in range(p)]
    if len(names) != p:
        raise WidthMismatchError(f"{len(names)} feature names for {p} attribution columns")

    importance = np.abs(values).mean(axis=0)
    order = sorted(range(p), key=lambda j: (-importance[j], j))
    return ImportanceRanking(
        features=[names[j] for j in order],
        mean_abs_shap=[float(importance[j]) for j in order],
        feature_index=order,
    )


def beeswarm_export(shap_values, feature_values, feature_names=None, row_ids=None):
    """Long format: one record per (row, feature) with the raw value and the feature's global rank"""
    values = shap_values.values if isinstance(shap_values, ShapValues) else np.asarray(shap_values, dtype=float)
    if feature_names is None and isinstance(shap_values, ShapValues):
        feature_names = shap_values.feature_names
    feature_values = np.asarray(feature_values, dtype=float)
    if values.shape != feature_values.shape:
        logger.error(f"Beeswarm shapes differ: attributions {values.shape}, features {feature_values.shape}")
        raise WidthMismatchError(f"Attribution shape {values.shape} does not match feature shape {feature_values.shape}")
    n, p = values.shape
    ranking = global_importance(values, feature_names)
    rank = np.empty(p, dtype=int)
    rank[ranking.feature_index] = np.arange(1, p + 1)
    names = np.asarray(list(feature_names) if feature_names is not None else [f'x{j}' for j in range(p)], dtype=object)
    ids = np.arange(n) if row_ids is None else np.asarray(row_ids)

    return pd.DataFrame({
        'row_id': np.repeat(ids, p),
        'feature': np.tile(names, n),
        'shap_value': values.ravel(),
        'feature_value': feature_values.ravel(),
        'feature_rank': np.tile(rank, n),
    })


@dataclass
class PdpCurve:
    feature: str
    grid: np.ndarray
    response: np.ndarray
    method: str = MEAN_ANCHORED

    def to_frame(self):
        return pd.DataFrame({'feature': self.feature, 'grid': self.grid, 'response': self.response})


def pdp_grid(column, grid_size=50, percentiles=DEFAULT_PERCENTILES):
    column = np.asarray(column, dtype=float)
    if grid_size < 2:
        raise ValueError(f"grid_size must be at least 2, got {grid_size}")
    lo, hi = percentiles
    if not 0 <= lo < hi <= 100:
        raise ValueError(f"Percentile bounds must satisfy 0 <= lo < hi <= 100, got {percentiles}")
    return np.unique(np.quantile(column, np.linspace(lo / 100.0, hi / 100.0, grid_size)))


def partial_dependence(model, X_train, feature, grid_size=50, method=MEAN_ANCHORED,
                       percentiles=DEFAULT_PERCENTILES, feature_names=None):
    """Probability response along a quantile grid of one feature.

    ``mean-anchored`` holds every other feature at its training mean;
    ``average`` is the classic dataset-averaged curve.
    """
    X_train = np.asarray(X_train, dtype=float)
    if isinstance(feature, str):
        names = list(feature_names if feature_names is not None else getattr(model, 'feature_names', None) or [])
        if feature not in names:
            raise KeyError(f"Unknown feature '{feature}'")
        j, label = names.index(feature), feature
    else:
        j = int(feature)
        label = feature_names[j] if feature_names is not None else f'x{j}'

    column = X_train[:, j]
    grid = pdp_grid(column, grid_size, percentiles)
    if np.all(column == column[0]) or grid.size < 2:
        logger.warning(f"Partial dependence skipped for '{label}': degenerate grid of {grid.size} point(s)")
        raise DegenerateFeatureError(f"Feature '{label}' does not vary between the requested percentiles")

    if method == MEAN_ANCHORED:
        rows = np.tile(X_train.mean(axis=0), (grid.size, 1))
        rows[:, j] = grid
        response = np.asarray(model.predict_proba(rows), dtype=float)
    elif method == AVERAGED:
        response = np.empty(grid.size)
        work = X_train.copy()
        for g, value in enumerate(grid):
            work[:, j] = value
            response[g] = float(np.mean(model.predict_proba(work)))
    else:
        raise ValueError(f"Unknown partial dependence method '{method}'")
    return PdpCurve(feature=label, grid=grid, response=response, method=method)


def write_importance(ranking, path, top=None):
    frame = (ranking.top(top) if top else ranking).to_frame()
    frame.to_csv(path, index=False)
    logger.info(f"Wrote importance ranking ({len(frame)} features) to {path}")


def write_beeswarm(frame, path):
    frame.to_csv(path, index=False)


def write_pdp(curve, path):
    curve.to_frame().to_csv(path, index=False)
