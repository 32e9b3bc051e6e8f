"""ROC/AUC, thresholded confusion metrics and cross-validated AUC"""
import json
import logging
from dataclasses import dataclass, asdict
from typing import List

import numpy as np
import pandas as pd

from errors import FoldEvaluationError, MultisysError, SingleClassError, WidthMismatchError

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.5
TABLE_COLUMNS = ['model', 'split', 'auc', 'accuracy', 'sensitivity', 'specificity', 'f1']


def _scores_and_labels(scores, labels, who):
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels).astype(int).ravel()
    if scores.shape != labels.shape:
        raise WidthMismatchError(f"{who}: {scores.size} scores but {labels.size} labels")
    positives = int(labels.sum())
    if positives == 0 or positives == labels.size:
        logger.error(f"{who}: labels contain a single class")
        raise SingleClassError(f"{who}: both classes must be present")
    return scores, labels


@dataclass
class RocCurve:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float

    def to_frame(self):
        return pd.DataFrame({'threshold': self.thresholds, 'fpr': self.fpr, 'tpr': self.tpr})


def roc_auc(scores, labels):
    """ROC over every distinct score; the first point uses threshold +inf.

    The area is accumulated on integer counts so it equals the Mann-Whitney
    pair count exactly: (concordant + 0.5·tied) / (P·N).
    """
    scores, labels = _scores_and_labels(scores, labels, 'roc_auc')
    order = np.argsort(-scores, kind='stable')
    s, l = scores[order], labels[order]
    last_of_group = np.r_[s[1:] != s[:-1], True]
    tp = np.cumsum(l)[last_of_group]
    fp = np.cumsum(1 - l)[last_of_group]
    tp = np.r_[0, tp]
    fp = np.r_[0, fp]
    P, N = int(tp[-1]), int(fp[-1])

    # sum of dfp·(tp_prev + tp_cur) is twice the trapezoid area in count units
    twice_area = int(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])))
    auc = twice_area / (2.0 * P * N)
    return RocCurve(
        thresholds=np.r_[np.inf, s[last_of_group]],
        fpr=fp / N,
        tpr=tp / P,
        auc=float(auc),
    )


@dataclass
class ConfusionReport:
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float
    sensitivity: float
    specificity: float
    precision: float
    f1: float
    threshold: float

    def to_dict(self):
        return asdict(self)


def _ratio(num, den):
    return num / den if den else 0.0


def confusion_at(scores, labels, threshold=DEFAULT_THRESHOLD):
    scores, labels = _scores_and_labels(scores, labels, 'confusion_at')
    predicted = scores >= threshold
    actual = labels == 1
    tp = int(np.sum(predicted & actual))
    fp = int(np.sum(predicted & ~actual))
    tn = int(np.sum(~predicted & ~actual))
    fn = int(np.sum(~predicted & actual))
    sensitivity = _ratio(tp, tp + fn)
    precision = _ratio(tp, tp + fp)
    return ConfusionReport(
        tp=tp, fp=fp, tn=tn, fn=fn,
        accuracy=_ratio(tp + tn, labels.size),
        sensitivity=sensitivity,
        specificity=_ratio(tn, tn + fp),
        precision=precision,
        f1=_ratio(2 * precision * sensitivity, precision + sensitivity),
        threshold=float(threshold),
    )


@dataclass
class CvResult:
    fold_auc: List[float]
    mean_auc: float
    sd_auc: float

    def to_dict(self):
        return {'fold_auc': list(self.fold_auc), 'mean_auc': self.mean_auc, 'sd_auc': self.sd_auc}


def cv_evaluate(fitter, X, y, fold_plan):
    """Fit on k-1 folds, score the held-out fold, report per-fold AUC with mean and sample SD.

    ``fitter(X_train, y_train)`` must return an object with ``predict_proba``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y).astype(int)
    aucs = []
    for fold in range(fold_plan.k):
        train_idx, held_idx = fold_plan.fold_indices(fold)
        try:
            model = fitter(X[train_idx], y[train_idx])
            scores = model.predict_proba(X[held_idx])
            aucs.append(roc_auc(scores, y[held_idx]).auc)
        except (MultisysError, ValueError, ArithmeticError) as e:
            logger.error(f"Cross-validation failed in fold {fold}: {str(e)}")
            raise FoldEvaluationError(fold, e) from e
        logger.debug(f"Fold {fold}: AUC {aucs[-1]:.4f}")
    arr = np.asarray(aucs)
    sd = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return CvResult(fold_auc=[float(a) for a in aucs], mean_auc=float(arr.mean()), sd_auc=sd)


def evaluate_split(model_name, split_name, scores, labels, threshold=DEFAULT_THRESHOLD):
    """One row of the performance table"""
    report = confusion_at(scores, labels, threshold)
    return {
        'model': model_name,
        'split': split_name,
        'auc': roc_auc(scores, labels).auc,
        'accuracy': report.accuracy,
        'sensitivity': report.sensitivity,
        'specificity': report.specificity,
        'f1': report.f1,
        'confusion': report.to_dict(),
    }


def metrics_table(rows):
    return pd.DataFrame([{k: r[k] for k in TABLE_COLUMNS} for r in rows], columns=TABLE_COLUMNS)


def write_metrics(rows, cv_results, json_path, csv_path, threshold=DEFAULT_THRESHOLD, **extra):
    payload = {
        'threshold': threshold,
        'threshold_note': 'fixed decision threshold; not tuned to prevalence',
        'evaluations': rows,
        'cross_validation': {name: r.to_dict() for name, r in cv_results.items()},
    }
    payload.update(extra)
    with open(json_path, 'w', encoding='utf-8') as f:
        json.dump(payload, f, indent=2, sort_keys=True)
    metrics_table(rows).to_csv(csv_path, index=False, float_format='%.6f')
    logger.info(f"Wrote metrics to {json_path} and {csv_path}")
