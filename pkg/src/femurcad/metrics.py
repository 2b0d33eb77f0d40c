"""Classification metrics with bootstrap confidence intervals plus the
partition-similarity measures used to score clustering runs."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .tensor import ContractError


def confusion_matrix(y_true: Sequence[int], y_pred: Sequence[int],
                     num_classes: int) -> np.ndarray:
    """K x K counts; rows are true classes, columns predicted."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ContractError(f"label arrays differ in length: {y_true.shape} vs {y_pred.shape}")
    out = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(out, (y_true, y_pred), 1)
    return out


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class MetricReport:
    per_class: dict
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    macro_accuracy: float      # macro-averaged recall
    weighted_accuracy: float   # support-weighted recall
    num_samples: int
    confusion: np.ndarray
    intervals: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "per_class": {str(k): {"precision": m.precision, "recall": m.recall,
                                   "f1": m.f1, "support": m.support}
                          for k, m in self.per_class.items()},
            "aggregates": {"accuracy": self.accuracy,
                           "macro_accuracy": self.macro_accuracy,
                           "weighted_accuracy": self.weighted_accuracy,
                           "macro_precision": self.macro_precision,
                           "macro_recall": self.macro_recall,
                           "macro_f1": self.macro_f1,
                           "num_samples": self.num_samples},
            "confusion": self.confusion.tolist(),
            "intervals": {k: list(v) for k, v in self.intervals.items()},
            "metadata": dict(self.metadata),
        }


def classification_report(y_true: Sequence[int], y_pred: Sequence[int],
                          num_classes: Optional[int] = None,
                          class_names: Optional[Sequence[str]] = None) -> MetricReport:
    """Per-class precision/recall/F1 and the aggregate accuracies.

    Classes never predicted get precision 0 by convention, so macro
    averages stay defined on degenerate predictors.
    """
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.size == 0:
        raise ContractError("classification_report needs at least one sample")
    if num_classes is None:
        num_classes = int(max(y_true.max(), y_pred.max())) + 1
    cm = confusion_matrix(y_true, y_pred, num_classes)

    per_class = {}
    precisions, recalls, f1s, supports = [], [], [], []
    for c in range(num_classes):
        tp = cm[c, c]
        fp = cm[:, c].sum() - tp
        fn = cm[c, :].sum() - tp
        precision = tp / (tp + fp) if tp + fp > 0 else 0.0
        recall = tp / (tp + fn) if tp + fn > 0 else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        support = int(cm[c, :].sum())
        name = class_names[c] if class_names else c
        per_class[name] = ClassMetrics(float(precision), float(recall), float(f1), support)
        precisions.append(precision)
        recalls.append(recall)
        f1s.append(f1)
        supports.append(support)

    total = int(cm.sum())
    supports_arr = np.asarray(supports, dtype=np.float64)
    weighted_recall = float((supports_arr * np.asarray(recalls)).sum() / total)
    return MetricReport(
        per_class=per_class,
        accuracy=float(np.trace(cm) / total),
        macro_precision=float(np.mean(precisions)),
        macro_recall=float(np.mean(recalls)),
        macro_f1=float(np.mean(f1s)),
        macro_accuracy=float(np.mean(recalls)),
        weighted_accuracy=weighted_recall,
        num_samples=total,
        confusion=cm,
    )


# -- metric callables usable with the bootstrap -------------------------------------


def accuracy_score(y_true, y_pred) -> float:
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    return float((y_true == y_pred).mean())


def macro_f1_score(y_true, y_pred, num_classes: Optional[int] = None) -> float:
    return classification_report(y_true, y_pred, num_classes=num_classes).macro_f1


def bootstrap_ci(y_true, y_pred, metric: Callable[[np.ndarray, np.ndarray], float],
                 resamples: int = 1000, level: float = 0.95, seed: int = 0
                 ) -> tuple[float, float]:
    """Percentile interval of `metric` over paired resamples with replacement."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    n = y_true.size
    if n < 10:
        raise ContractError(f"bootstrap_ci needs at least 10 samples, got {n}")
    rng = np.random.default_rng(seed)
    stats = np.empty(resamples, dtype=np.float64)
    for i in range(resamples):
        idx = rng.integers(0, n, size=n)
        stats[i] = metric(y_true[idx], y_pred[idx])
    alpha = (1.0 - level) / 2.0
    lo, hi = np.percentile(stats, [100 * alpha, 100 * (1 - alpha)])
    return float(lo), float(hi)


def report_with_intervals(y_true, y_pred, num_classes: Optional[int] = None,
                          class_names: Optional[Sequence[str]] = None,
                          resamples: int = 1000, level: float = 0.95,
                          seed: int = 0) -> MetricReport:
    """classification_report plus percentile-bootstrap CIs per aggregate."""
    report = classification_report(y_true, y_pred, num_classes=num_classes,
                                   class_names=class_names)
    k = num_classes or report.confusion.shape[0]
    aggregate_fns = {
        "accuracy": accuracy_score,
        "macro_precision": lambda t, p: classification_report(t, p, num_classes=k).macro_precision,
        "macro_recall": lambda t, p: classification_report(t, p, num_classes=k).macro_recall,
        "macro_f1": lambda t, p: classification_report(t, p, num_classes=k).macro_f1,
        "macro_accuracy": lambda t, p: classification_report(t, p, num_classes=k).macro_accuracy,
    }
    for name, fn in aggregate_fns.items():
        report.intervals[name] = bootstrap_ci(y_true, y_pred, fn, resamples=resamples,
                                              level=level, seed=seed)
    report.metadata.update({"ci_method": "percentile bootstrap", "resamples": resamples,
                            "level": level, "seed": seed})
    return report


# -- partition similarity ---------------------------------------------------------------


def _contingency(labels_a, labels_b) -> np.ndarray:
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape:
        raise ContractError(f"label arrays differ in length: {a.shape} vs {b.shape}")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    return table


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(labels_a, labels_b) -> float:
    """Mutual information normalized by the arithmetic mean of entropies.

    1.0 for identical partitions, 0.0 for independent ones; invariant to
    renaming the labels on either side.
    """
    table = _contingency(labels_a, labels_b)
    n = table.sum()
    if n < 2:
        raise ContractError("nmi needs at least two samples")
    row = table.sum(axis=1)
    col = table.sum(axis=0)
    h_a, h_b = _entropy(row), _entropy(col)
    if h_a == 0.0 and h_b == 0.0:
        return 1.0  # both partitions are a single cluster
    if h_a == 0.0 or h_b == 0.0:
        return 0.0
    mi = 0.0
    for i in range(table.shape[0]):
        for j in range(table.shape[1]):
            nij = table[i, j]
            if nij > 0:
                mi += (nij / n) * math.log(nij * n / (row[i] * col[j]))
    mi = max(mi, 0.0)
    return min(mi / (0.5 * (h_a + h_b)), 1.0)


def _comb2(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float((x * (x - 1) / 2).sum())


def ari(labels_a, labels_b) -> float:
    """Chance-adjusted pair-counting Rand index in [-1, 1]."""
    table = _contingency(labels_a, labels_b)
    n = table.sum()
    if n < 2:
        raise ContractError("ari needs at least two samples")
    sum_ij = _comb2(table)
    sum_a = _comb2(table.sum(axis=1))
    sum_b = _comb2(table.sum(axis=0))
    total_pairs = n * (n - 1) / 2
    expected = sum_a * sum_b / total_pairs
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        return 1.0  # both partitions trivial, nothing to adjust
    return float((sum_ij - expected) / (max_index - expected))


def clustering_accuracy(y_true, clusters) -> float:
    """Best accuracy over one-to-one cluster-to-class assignments."""
    table = _contingency(y_true, clusters).T  # rows: clusters, cols: classes
    k = max(table.shape)
    padded = np.zeros((k, k), dtype=np.int64)
    padded[:table.shape[0], :table.shape[1]] = table
    rows, cols = linear_sum_assignment(padded, maximize=True)
    return float(padded[rows, cols].sum() / table.sum())
