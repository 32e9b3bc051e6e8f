import json

import numpy as np
import pandas as pd
import pytest

from classifiers import fit_logistic_classifier
from cohort_split import stratified_kfold
from errors import FoldEvaluationError, SingleClassError, WidthMismatchError
from metrics import (
    TABLE_COLUMNS,
    confusion_at,
    cv_evaluate,
    evaluate_split,
    metrics_table,
    roc_auc,
    write_metrics,
)


def _pair_count_auc(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def test_auc_examples():
    assert roc_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]).auc == 1.0
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [1, 1, 0, 0]).auc == 0.0
    assert roc_auc([0.1, 0.4, 0.4, 0.8], [0, 0, 1, 1]).auc == 0.875


def test_auc_matches_pair_counting():
    rng = np.random.default_rng(0)
    for _ in range(150):
        n = int(rng.integers(2, 201))
        labels = rng.integers(0, 2, n)
        labels[0], labels[1] = 0, 1
        # coarse scores so ties are common
        scores = np.round(rng.random(n), int(rng.integers(1, 4)))
        assert abs(roc_auc(scores, labels).auc - _pair_count_auc(scores, labels)) <= 1e-12


def test_auc_invariant_to_monotone_transform():
    rng = np.random.default_rng(1)
    scores = rng.normal(size=120)
    labels = (scores + rng.normal(size=120) > 0).astype(int)
    base = roc_auc(scores, labels).auc
    assert roc_auc(np.exp(scores), labels).auc == base
    assert roc_auc(3 * scores + 7, labels).auc == base


def test_auc_label_swap_symmetry():
    rng = np.random.default_rng(2)
    scores = np.round(rng.random(80), 2)
    labels = rng.integers(0, 2, 80)
    labels[:2] = [0, 1]
    assert roc_auc(scores, 1 - labels).auc == pytest.approx(1 - roc_auc(scores, labels).auc, abs=1e-12)


def test_roc_curve_shape():
    curve = roc_auc([0.1, 0.4, 0.4, 0.8], [0, 0, 1, 1])
    assert np.isinf(curve.thresholds[0])
    assert curve.fpr[0] == 0 and curve.tpr[0] == 0
    assert curve.fpr[-1] == 1 and curve.tpr[-1] == 1
    assert np.all(np.diff(curve.fpr) >= 0) and np.all(np.diff(curve.tpr) >= 0)
    assert list(curve.to_frame().columns) == ["threshold", "fpr", "tpr"]


def test_auc_errors():
    with pytest.raises(SingleClassError):
        roc_auc([0.1, 0.2], [1, 1])
    with pytest.raises(WidthMismatchError):
        roc_auc([0.1, 0.2, 0.3], [0, 1])


def test_confusion_all_correct():
    report = confusion_at([0.9, 0.7, 0.2, 0.1], [1, 1, 0, 0])
    assert (report.tp, report.fp, report.tn, report.fn) == (2, 0, 2, 0)
    assert report.accuracy == 1.0
    assert report.f1 == 1.0


def test_confusion_degenerate_classifier():
    report = confusion_at([0, 0, 0, 0], [1, 0, 1, 0])
    assert report.sensitivity == 0.0
    assert report.specificity == 1.0
    assert report.precision == 0.0
    assert report.f1 == 0.0


def test_confusion_threshold_is_inclusive():
    report = confusion_at([0.5, 0.49], [1, 0], threshold=0.5)
    assert report.tp == 1 and report.tn == 1


def test_confusion_mixed_case():
    report = confusion_at([0.9, 0.6, 0.4, 0.7, 0.2], [1, 1, 1, 0, 0])
    assert (report.tp, report.fp, report.tn, report.fn) == (2, 1, 1, 1)
    assert report.sensitivity == pytest.approx(2 / 3)
    assert report.precision == pytest.approx(2 / 3)
    assert report.f1 == pytest.approx(2 / 3)
    assert report.specificity == 0.5


class _ConstantModel:
    def predict_proba(self, X):
        return np.full(len(X), 0.5)


def _circular_cohort(n, seed):
    rng = np.random.default_rng(seed)
    xy = rng.uniform(-1, 1, size=(n, 2))
    labels = (np.sum(xy ** 2, axis=1) < 0.5).astype(int)
    return np.hstack([xy, xy ** 2]), labels


def test_cv_reports_k_values():
    X, y = _circular_cohort(200, 3)
    for k in (3, 5):
        result = cv_evaluate(lambda X_tr, y_tr: _ConstantModel(), X, y, stratified_kfold(y, k=k, seed=42))
        assert len(result.fold_auc) == k
        assert result.fold_auc == [0.5] * k
        assert result.sd_auc == 0.0


def test_cv_circular_task():
    X, y = _circular_cohort(400, 4)
    result = cv_evaluate(lambda X_tr, y_tr: fit_logistic_classifier(X_tr, y_tr, C=100.0), X, y,
                         stratified_kfold(y, k=5, seed=42))
    assert result.mean_auc >= 0.99
    assert result.sd_auc == pytest.approx(np.std(result.fold_auc, ddof=1))


def test_cv_wraps_fitter_failure():
    X, y = _circular_cohort(50, 5)

    def broken(X_tr, y_tr):
        raise ValueError("solver diverged")

    with pytest.raises(FoldEvaluationError) as info:
        cv_evaluate(broken, X, y, stratified_kfold(y, k=5, seed=1))
    assert info.value.fold == 0
    assert isinstance(info.value.cause, ValueError)


def test_evaluate_split_and_writers(tmp_path):
    rows = [
        evaluate_split("GB", "test", [0.9, 0.8, 0.3, 0.1], [1, 1, 0, 0]),
        evaluate_split("LR", "test", [0.6, 0.4, 0.55, 0.1], [1, 1, 0, 0]),
    ]
    assert rows[0]["auc"] == 1.0 and rows[0]["f1"] == 1.0
    assert rows[1]["confusion"]["fp"] == 1
    table = metrics_table(rows)
    assert list(table.columns) == TABLE_COLUMNS
    assert len(table) == 2

    X, y = _circular_cohort(60, 6)
    cv = {"GB": cv_evaluate(lambda a, b: _ConstantModel(), X, y, stratified_kfold(y, k=3, seed=1))}
    json_path, csv_path = tmp_path / "metrics.json", tmp_path / "metrics_table.csv"
    write_metrics(rows, cv, str(json_path), str(csv_path), config_hash="deadbeef")
    payload = json.loads(json_path.read_text(encoding="utf-8"))
    assert payload["threshold"] == 0.5
    assert payload["config_hash"] == "deadbeef"
    assert payload["cross_validation"]["GB"]["fold_auc"] == [0.5, 0.5, 0.5]
    assert pd.read_csv(csv_path)["model"].tolist() == ["GB", "LR"]
