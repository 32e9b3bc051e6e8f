"""
Classifiers used by the pipeline: L2 logistic regression on standardised
inputs, a random forest of Gini trees, and gradient boosting with Newton
leaf steps on the binomial deviance.

Trees route a row left when ``x[feature] <= threshold``. Node ids are
assigned in preorder, so every child id is larger than its parent's.
"""
import json
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, logit

from errors import (
    DegenerateInputError,
    EmptyCohortError,
    MalformedModelError,
    SingleClassError,
    UnsupportedOutputError,
    WidthMismatchError,
)

logger = logging.getLogger(__name__)

KIND_LOGISTIC = 'logistic'
KIND_BOOSTING = 'gradient-boosting'
KIND_FOREST = 'random-forest'
AGG_MARGIN = 'sum-of-margins-then-logistic'
AGG_AVERAGE = 'average-of-leaf-probabilities'

GINI = 'gini'
VARIANCE = 'variance'

LEAF = -1
MIN_GAIN = 1e-12
HESSIAN_FLOOR = 1e-12


def _as_matrix(X):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    return X


def _check_binary(y, who):
    y = np.asarray(y).astype(int).ravel()
    if y.size == 0:
        raise EmptyCohortError(f"{who}: no training rows")
    if not np.isin(y, (0, 1)).all():
        raise DegenerateInputError(f"{who}: labels must be 0/1")
    if y.min() == y.max():
        logger.error(f"{who}: only class {y[0]} present in {y.size} labels")
        raise SingleClassError(f"{who}: labels contain a single class ({y[0]})")
    return y


def _check_width(X, expected, who):
    if X.shape[1] != expected:
        logger.error(f"{who}: got {X.shape[1]} columns, model was trained on {expected}")
        raise WidthMismatchError(f"{who}: row width {X.shape[1]} does not match training width {expected}")


# ---------------------------------------------------------------------------
# Standardisation
# ---------------------------------------------------------------------------

@dataclass
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray
    constant: np.ndarray

    def transform(self, X):
        X = _as_matrix(X)
        _check_width(X, len(self.mean), 'Standardizer')
        return (X - self.mean) / self.scale

    def inverse_transform(self, Z):
        Z = _as_matrix(Z)
        _check_width(Z, len(self.mean), 'Standardizer')
        return Z * self.scale + self.mean

    def to_dict(self):
        return {
            'mean': self.mean.tolist(),
            'scale': self.scale.tolist(),
            'constant': [bool(c) for c in self.constant],
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            mean=np.asarray(data['mean'], dtype=float),
            scale=np.asarray(data['scale'], dtype=float),
            constant=np.asarray(data['constant'], dtype=bool),
        )


def fit_standardizer(X):
    """Column means and population standard deviations of the training rows.

    Zero-variance columns keep divisor 1 and are tagged constant, so they
    transform to all zeros.
    """
    X = _as_matrix(X)
    if X.shape[0] == 0:
        raise EmptyCohortError("Cannot fit a standardizer on zero rows")
    mean = X.mean(axis=0)
    sd = X.std(axis=0, ddof=0)
    constant = ~(sd > 0)
    scale = np.where(constant, 1.0, sd)
    if constant.any():
        logger.info(f"Standardizer: {int(constant.sum())} constant column(s) left unscaled")
    return Standardizer(mean=mean, scale=scale, constant=constant)


def apply_standardizer(standardizer, X):
    return standardizer.transform(X)


# ---------------------------------------------------------------------------
# Logistic regression
# ---------------------------------------------------------------------------

@dataclass
class LinearModel:
    weights: np.ndarray
    intercept: float
    l2_strength: float
    n_iter: int = 0
    gradient_max_norm: float = 0.0

    def margin(self, X):
        X = _as_matrix(X)
        _check_width(X, len(self.weights), 'LinearModel')
        return X @ self.weights + self.intercept

    def predict_proba(self, X):
        return expit(self.margin(X))

    def to_dict(self):
        return {
            'weights': self.weights.tolist(),
            'intercept': float(self.intercept),
            'l2_strength': float(self.l2_strength),
            'n_iter': int(self.n_iter),
            'gradient_max_norm': float(self.gradient_max_norm),
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            weights=np.asarray(data['weights'], dtype=float),
            intercept=float(data['intercept']),
            l2_strength=float(data['l2_strength']),
            n_iter=int(data.get('n_iter', 0)),
            gradient_max_norm=float(data.get('gradient_max_norm', 0.0)),
        )


def logistic_objective(theta, X, y, l2_strength):
    """Mean negative log-likelihood plus (lambda / 2n)·||w||²; theta = [w..., b]"""
    n = X.shape[0]
    w, b = theta[:-1], theta[-1]
    z = X @ w + b
    loss = np.mean(np.logaddexp(0.0, z) - y * z) + l2_strength / (2.0 * n) * float(w @ w)
    resid = expit(z) - y
    grad = np.empty_like(theta)
    grad[:-1] = X.T @ resid / n + l2_strength / n * w
    grad[-1] = resid.mean()
    return loss, grad


def _newton_polish(theta, X, y, l2_strength, tol=1e-10, max_steps=25):
    n, p = X.shape
    X1 = np.hstack([X, np.ones((n, 1))])
    ridge = np.full(p + 1, l2_strength / n)
    ridge[-1] = 0.0
    loss, grad = logistic_objective(theta, X, y, l2_strength)
    for _ in range(max_steps):
        if np.max(np.abs(grad)) <= tol:
            break
        prob = expit(X1 @ theta)
        hess = (X1 * (prob * (1.0 - prob))[:, None]).T @ X1 / n + np.diag(ridge)
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            break
        t = 1.0
        while t > 1e-8:
            candidate = theta - t * step
            c_loss, c_grad = logistic_objective(candidate, X, y, l2_strength)
            if c_loss <= loss + 1e-15:
                break
            t *= 0.5
        else:
            break
        theta, loss, grad = candidate, c_loss, c_grad
    return theta, grad


def fit_logistic(X, y, l2_strength=1.0, max_iter=2000):
    """L2 logistic regression from a zero start. Expects already standardised X."""
    X = _as_matrix(X)
    y = _check_binary(y, 'fit_logistic').astype(float)
    if X.shape[0] != y.size:
        raise WidthMismatchError(f"fit_logistic: {X.shape[0]} rows but {y.size} labels")

    theta0 = np.zeros(X.shape[1] + 1)
    result = minimize(
        logistic_objective,
        theta0,
        args=(X, y, l2_strength),
        jac=True,
        method='L-BFGS-B',
        options={'maxiter': max_iter, 'gtol': 1e-10, 'ftol': 1e-15},
    )
    theta, grad = _newton_polish(result.x, X, y, l2_strength)
    gmax = float(np.max(np.abs(grad)))
    if gmax > 1e-6:
        logger.warning(f"fit_logistic: gradient max-norm {gmax:.3e} after {result.nit} iterations")
    logger.info(f"fit_logistic: {result.nit} L-BFGS-B iterations, gradient max-norm {gmax:.3e}")
    return LinearModel(
        weights=theta[:-1].copy(),
        intercept=float(theta[-1]),
        l2_strength=float(l2_strength),
        n_iter=int(result.nit),
        gradient_max_norm=gmax,
    )


@dataclass
class LogisticClassifier:
    """Standardizer plus LinearModel, applied to raw feature rows"""
    standardizer: Standardizer
    linear: LinearModel
    feature_names: Optional[List[str]] = None
    kind: str = KIND_LOGISTIC

    @property
    def n_features(self):
        return len(self.linear.weights)

    def predict_proba(self, X):
        return self.linear.predict_proba(self.standardizer.transform(X))

    def to_dict(self):
        return {
            'kind': self.kind,
            'feature_names': self.feature_names,
            'standardizer': self.standardizer.to_dict(),
            'linear': self.linear.to_dict(),
        }

    @classmethod
    def from_dict(cls, data):
        try:
            return cls(
                standardizer=Standardizer.from_dict(data['standardizer']),
                linear=LinearModel.from_dict(data['linear']),
                feature_names=data.get('feature_names'),
            )
        except (KeyError, TypeError) as e:
            raise MalformedModelError(f"Logistic model JSON is missing {e}")


def fit_logistic_classifier(X, y, C=1.0, max_iter=2000, feature_names=None):
    """Standardise every column on the training rows, then fit with lambda = 1/C"""
    standardizer = fit_standardizer(X)
    linear = fit_logistic(standardizer.transform(X), y, l2_strength=1.0 / C, max_iter=max_iter)
    return LogisticClassifier(standardizer=standardizer, linear=linear,
                              feature_names=list(feature_names) if feature_names is not None else None)


# ---------------------------------------------------------------------------
# Trees
# ---------------------------------------------------------------------------

@dataclass
class DecisionTree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    cover: np.ndarray
    value: np.ndarray

    def __post_init__(self):
        self.feature = np.asarray(self.feature, dtype=int)
        self.threshold = np.asarray(self.threshold, dtype=float)
        self.left = np.asarray(self.left, dtype=int)
        self.right = np.asarray(self.right, dtype=int)
        self.cover = np.asarray(self.cover, dtype=float)
        self.value = np.asarray(self.value, dtype=float)

    @property
    def n_nodes(self):
        return len(self.feature)

    def is_leaf(self, node):
        return self.feature[node] == LEAF

    def apply(self, X):
        """Leaf id reached by each row"""
        X = _as_matrix(X)
        node = np.zeros(X.shape[0], dtype=int)
        rows = np.arange(X.shape[0])
        active = self.feature[node] != LEAF
        while active.any():
            idx = rows[active]
            cur = node[idx]
            go_left = X[idx, self.feature[cur]] <= self.threshold[cur]
            node[idx] = np.where(go_left, self.left[cur], self.right[cur])
            active = self.feature[node] != LEAF
        return node

    def predict(self, X):
        return self.value[self.apply(X)]

    def depth(self, node=0):
        if self.is_leaf(node):
            return 0
        return 1 + max(self.depth(self.left[node]), self.depth(self.right[node]))

    def used_features(self):
        return sorted(set(int(f) for f in self.feature if f != LEAF))

    def expected_value(self):
        return float(self.value[0])

    def validate(self):
        n = self.n_nodes
        if n == 0:
            raise MalformedModelError("Tree has no nodes")
        for node in range(n):
            if self.cover[node] <= 0:
                raise MalformedModelError(f"Node {node} has non-positive cover {self.cover[node]}")
            if self.feature[node] == LEAF:
                continue
            left, right = self.left[node], self.right[node]
            if not (node < left < n and node < right < n):
                raise MalformedModelError(f"Node {node} has out-of-range children ({left}, {right})")
            if abs(self.cover[left] + self.cover[right] - self.cover[node]) > 1e-9 * max(1.0, self.cover[node]):
                raise MalformedModelError(f"Node {node}: cover {self.cover[node]} != children {self.cover[left]} + {self.cover[right]}")
        return self

    def to_dict(self):
        nodes = []
        for i in range(self.n_nodes):
            leaf = self.feature[i] == LEAF
            nodes.append({
                'id': i,
                'feature': int(self.feature[i]),
                'threshold': None if leaf else float(self.threshold[i]),
                'left': int(self.left[i]),
                'right': int(self.right[i]),
                'cover': float(self.cover[i]),
                'value': float(self.value[i]),
            })
        return {'nodes': nodes}

    @classmethod
    def from_dict(cls, data):
        try:
            nodes = sorted(data['nodes'], key=lambda n: n['id'])
            if [n['id'] for n in nodes] != list(range(len(nodes))):
                raise MalformedModelError("Tree node ids must be 0..n-1")
            tree = cls(
                feature=[n['feature'] for n in nodes],
                threshold=[np.nan if n['threshold'] is None else n['threshold'] for n in nodes],
                left=[n['left'] for n in nodes],
                right=[n['right'] for n in nodes],
                cover=[n['cover'] for n in nodes],
                value=[n['value'] for n in nodes],
            )
        except (KeyError, TypeError) as e:
            raise MalformedModelError(f"Tree JSON is malformed: {e}")
        return tree.validate()


def _best_split(X, weight, target, rows, features, criterion, min_leaf):
    """Best (gain, feature, threshold) over the candidate features, or None"""
    xs_raw = X[np.ix_(rows, features)]
    order = np.argsort(xs_raw, axis=0, kind='stable')
    xs = np.take_along_axis(xs_raw, order, axis=0)
    ws = weight[rows][order]
    ts = target[rows][order]

    cw = np.cumsum(ws, axis=0)
    cs = np.cumsum(ws * ts, axis=0)
    W, S = cw[-1], cs[-1]
    Wl, Sl = cw[:-1], cs[:-1]
    Wr, Sr = W - Wl, S - Sl

    valid = (xs[1:] > xs[:-1]) & (Wl >= min_leaf) & (Wr >= min_leaf)
    if not valid.any():
        return None
    with np.errstate(divide='ignore', invalid='ignore'):
        if criterion == GINI:
            gain = 2.0 * (S * (W - S) / W - Sl * (Wl - Sl) / Wl - Sr * (Wr - Sr) / Wr)
        else:
            gain = Sl * Sl / Wl + Sr * Sr / Wr - S * S / W
    gain = np.where(valid, gain, -np.inf)

    # feature-major so equal gains resolve to the lowest feature, then lowest threshold
    flat = gain.T
    k = int(np.argmax(flat))
    f_pos, i = divmod(k, flat.shape[1])
    best = flat[f_pos, i]
    if not best > MIN_GAIN:
        return None
    lo, hi = xs[i, f_pos], xs[i + 1, f_pos]
    threshold = (lo + hi) / 2.0
    if threshold >= hi:
        threshold = lo
    return float(best), int(features[f_pos]), float(threshold)


class _TreeGrower:
    def __init__(self, criterion, max_depth, min_leaf, leaf_value, max_features=None, rng=None):
        self.criterion = criterion
        self.max_depth = max_depth
        self.min_leaf = min_leaf
        self.leaf_value = leaf_value
        self.max_features = max_features
        self.rng = rng

    def _candidates(self, p):
        if self.max_features is None or self.max_features >= p:
            return np.arange(p)
        return np.sort(self.rng.choice(p, size=self.max_features, replace=False))

    def grow(self, X, weight, target, rows):
        self.X, self.weight, self.target = X, weight, target
        self.nodes = []
        self._grow(np.asarray(rows, dtype=int), 0)
        feature = [n[0] for n in self.nodes]
        tree = DecisionTree(
            feature=feature,
            threshold=[n[1] for n in self.nodes],
            left=[n[2] for n in self.nodes],
            right=[n[3] for n in self.nodes],
            cover=[n[4] for n in self.nodes],
            value=[n[5] for n in self.nodes],
        )
        # internal values are cover-weighted expectations of their subtrees
        for node in range(tree.n_nodes - 1, -1, -1):
            if tree.feature[node] != LEAF:
                l, r = tree.left[node], tree.right[node]
                tree.value[node] = (tree.cover[l] * tree.value[l] + tree.cover[r] * tree.value[r]) / tree.cover[node]
        return tree

    def _grow(self, rows, depth):
        node_id = len(self.nodes)
        cover = float(self.weight[rows].sum())
        self.nodes.append([LEAF, np.nan, LEAF, LEAF, cover, 0.0])

        split = None
        if depth < self.max_depth and cover >= 2 * self.min_leaf:
            split = _best_split(self.X, self.weight, self.target, rows,
                                self._candidates(self.X.shape[1]), self.criterion, self.min_leaf)
        if split is None:
            self.nodes[node_id][5] = float(self.leaf_value(rows))
            return node_id

        _, feat, threshold = split
        go_left = self.X[rows, feat] <= threshold
        left = self._grow(rows[go_left], depth + 1)
        right = self._grow(rows[~go_left], depth + 1)
        self.nodes[node_id][:4] = [feat, threshold, left, right]
        return node_id


# ---------------------------------------------------------------------------
# Ensembles
# ---------------------------------------------------------------------------

@dataclass
class TreeEnsemble:
    trees: List[DecisionTree]
    base_score: float
    shrinkage: float
    aggregation: str
    kind: str
    n_features: int
    feature_names: Optional[List[str]] = None
    deviance_trace: List[float] = field(default_factory=list)
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        expected = {KIND_BOOSTING: AGG_MARGIN, KIND_FOREST: AGG_AVERAGE}
        if self.kind not in expected:
            raise MalformedModelError(f"Unknown ensemble kind '{self.kind}'")
        if self.aggregation != expected[self.kind]:
            raise MalformedModelError(f"Aggregation '{self.aggregation}' is inconsistent with kind '{self.kind}'")
        if self.kind == KIND_BOOSTING and not 0 < self.shrinkage <= 1:
            raise MalformedModelError(f"Boosting shrinkage must be in (0, 1], got {self.shrinkage}")
        if self.kind == KIND_FOREST and self.shrinkage != 1:
            raise MalformedModelError(f"Forest shrinkage must be 1, got {self.shrinkage}")

    @property
    def tree_scale(self):
        """Factor applied to each tree's output before summing"""
        if self.kind == KIND_BOOSTING:
            return self.shrinkage
        return 1.0 / len(self.trees) if self.trees else 0.0

    def raw_output(self, X):
        """Margin for boosting, mean leaf probability for forests"""
        X = _as_matrix(X)
        _check_width(X, self.n_features, f'{self.kind} ensemble')
        total = np.zeros(X.shape[0])
        for tree in self.trees:
            total += tree.predict(X)
        return self.base_score + self.tree_scale * total

    def expected_output(self):
        return self.base_score + self.tree_scale * sum(t.expected_value() for t in self.trees)

    def predict_margin(self, X):
        if self.kind != KIND_BOOSTING:
            raise UnsupportedOutputError("Margins are only defined for gradient boosting ensembles")
        return self.raw_output(X)

    def predict_proba(self, X):
        out = self.raw_output(X)
        if self.kind == KIND_BOOSTING:
            return expit(out)
        return out

    def to_dict(self):
        return {
            'kind': self.kind,
            'aggregation': self.aggregation,
            'base_score': float(self.base_score),
            'shrinkage': float(self.shrinkage),
            'n_features': int(self.n_features),
            'feature_names': self.feature_names,
            'params': self.params,
            'deviance_trace': [float(d) for d in self.deviance_trace],
            'trees': [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, data):
        try:
            return cls(
                trees=[DecisionTree.from_dict(t) for t in data['trees']],
                base_score=float(data['base_score']),
                shrinkage=float(data['shrinkage']),
                aggregation=data['aggregation'],
                kind=data['kind'],
                n_features=int(data['n_features']),
                feature_names=data.get('feature_names'),
                deviance_trace=list(data.get('deviance_trace', [])),
                params=dict(data.get('params', {})),
            )
        except (KeyError, TypeError) as e:
            raise MalformedModelError(f"Ensemble JSON is missing {e}")


def binomial_deviance(y, margin):
    return float(2.0 * np.mean(np.logaddexp(0.0, margin) - y * margin))


def fit_gradient_boosting(X, y, n_estimators=200, learning_rate=0.05, max_depth=4, min_samples_leaf=10,
                          feature_names=None):
    X = _as_matrix(X)
    y = _check_binary(y, 'fit_gradient_boosting').astype(float)
    n, p = X.shape
    base = float(logit(y.mean()))
    margin = np.full(n, base)
    weight = np.ones(n)
    trace = [binomial_deviance(y, margin)]
    trees = []

    for stage in range(n_estimators):
        prob = expit(margin)
        resid = y - prob
        hess = prob * (1.0 - prob)

        def newton_step(rows, resid=resid, hess=hess):
            return resid[rows].sum() / max(hess[rows].sum(), HESSIAN_FLOOR)

        grower = _TreeGrower(VARIANCE, max_depth, min_samples_leaf, newton_step)
        tree = grower.grow(X, weight, resid, np.arange(n))
        trees.append(tree)
        margin = margin + learning_rate * tree.predict(X)
        trace.append(binomial_deviance(y, margin))
        if (stage + 1) % 50 == 0:
            logger.debug(f"Boosting stage {stage + 1}: deviance {trace[-1]:.6f}")

    logger.info(f"Gradient boosting: {n_estimators} stages, training deviance {trace[0]:.4f} -> {trace[-1]:.4f}")
    return TreeEnsemble(
        trees=trees,
        base_score=base,
        shrinkage=float(learning_rate),
        aggregation=AGG_MARGIN,
        kind=KIND_BOOSTING,
        n_features=p,
        feature_names=list(feature_names) if feature_names is not None else None,
        deviance_trace=trace,
        params={'n_estimators': n_estimators, 'learning_rate': learning_rate,
                'max_depth': max_depth, 'min_samples_leaf': min_samples_leaf},
    )


def fit_random_forest(X, y, n_trees=200, max_depth=8, min_samples_leaf=10, seed=42, row_ids=None,
                      feature_names=None):
    """Bootstrap forest of Gini trees over sqrt(p) candidate features per node.

    Bootstrap draws index ``row_ids`` (default: storage order), so shuffling the
    rows together with their ids reproduces the same forest.
    """
    X = _as_matrix(X)
    y = np.asarray(y).astype(int).ravel()
    n, p = X.shape
    if n < 2:
        logger.error(f"fit_random_forest: {n} training row(s)")
        raise DegenerateInputError(f"Random forest needs at least 2 training rows, got {n}")
    if y.size != n:
        raise WidthMismatchError(f"fit_random_forest: {n} rows but {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise DegenerateInputError("fit_random_forest: labels must be 0/1")

    row_ids = np.arange(n) if row_ids is None else np.asarray(row_ids, dtype=int)
    max_features = max(1, int(math.sqrt(p)))
    rng = np.random.default_rng(seed)
    target = y.astype(float)
    trees = []

    for _ in range(n_trees):
        draws = rng.integers(0, n, size=n)
        weight = np.bincount(draws, minlength=n)[row_ids].astype(float)
        rows = np.flatnonzero(weight > 0)

        def positive_fraction(node_rows, weight=weight):
            w = weight[node_rows]
            return float((w * target[node_rows]).sum() / w.sum())

        grower = _TreeGrower(GINI, max_depth, min_samples_leaf, positive_fraction,
                             max_features=max_features, rng=rng)
        trees.append(grower.grow(X, weight, target, rows))

    logger.info(f"Random forest: {n_trees} trees, {max_features} candidate features per node")
    return TreeEnsemble(
        trees=trees,
        base_score=0.0,
        shrinkage=1.0,
        aggregation=AGG_AVERAGE,
        kind=KIND_FOREST,
        n_features=p,
        feature_names=list(feature_names) if feature_names is not None else None,
        params={'n_trees': n_trees, 'max_depth': max_depth,
                'min_samples_leaf': min_samples_leaf, 'seed': seed},
    )


def predict_margin(ensemble, X):
    return ensemble.predict_margin(X)


def predict_proba(model, X):
    return model.predict_proba(X)


def model_from_dict(data):
    kind = data.get('kind') if isinstance(data, dict) else None
    if kind == KIND_LOGISTIC:
        return LogisticClassifier.from_dict(data)
    if kind in (KIND_BOOSTING, KIND_FOREST):
        return TreeEnsemble.from_dict(data)
    raise MalformedModelError(f"Unknown model kind {kind!r}")


def save_model(model, path, **extra):
    payload = model.to_dict()
    payload.update(extra)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(payload, f, indent=2, sort_keys=True)
    logger.info(f"Saved {model.kind} model to {path}")


def load_model(path):
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise MalformedModelError(f"Model file {path} is not valid JSON: {str(e)}")
    return model_from_dict(data)
