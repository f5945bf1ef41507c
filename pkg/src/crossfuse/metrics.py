"""Classification metrics and validation-weighted probability ensembling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ClassMetrics:
    label: int
    precision: float
    recall: float
    f1: float
    support: int
    degenerate: bool  # a zero-denominator precision/recall was defined as 0

    def to_dict(self) -> dict:
        return {
            "label": self.label, "precision": self.precision,
            "recall": self.recall, "f1": self.f1, "support": self.support,
            "degenerate": self.degenerate,
        }


@dataclass
class MetricsReport:
    accuracy: float
    weighted_f1: float
    weighted_precision: float
    weighted_recall: float
    confusion: np.ndarray  # rows = true class, cols = predicted class
    n_samples: int
    per_class: list[ClassMetrics]

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "weighted_f1": self.weighted_f1,
            "weighted_precision": self.weighted_precision,
            "weighted_recall": self.weighted_recall,
            "confusion": self.confusion.tolist(),
            "n_samples": self.n_samples,
            "per_class": [c.to_dict() for c in self.per_class],
        }

    def confusion_csv(self) -> str:
        k = self.confusion.shape[0]
        lines = ["true\\pred," + ",".join(str(j) for j in range(k))]
        for i in range(k):
            lines.append(f"{i}," + ",".join(str(int(v)) for v in self.confusion[i]))
        return "\n".join(lines) + "\n"


def compute_metrics(y_true, y_pred, n_classes: int = 5) -> MetricsReport:
    """Accuracy, support-weighted precision/recall/F1, and the confusion matrix.

    Classes that were never predicted (or never occur) get precision/recall 0
    rather than NaN, flagged per class.
    """
    y_true = np.asarray(y_true, dtype=np.int64).reshape(-1)
    y_pred = np.asarray(y_pred, dtype=np.int64).reshape(-1)
    if y_true.shape != y_pred.shape:
        raise ValueError(
            f"length mismatch: {y_true.shape[0]} true vs {y_pred.shape[0]} predicted"
        )
    if y_true.size == 0:
        raise ValueError("metrics need at least one sample")
    for name, arr in (("y_true", y_true), ("y_pred", y_pred)):
        if arr.min() < 0 or arr.max() >= n_classes:
            raise ValueError(f"{name} labels must lie in [0, {n_classes})")
    n = y_true.size
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (y_true, y_pred), 1)
    tp = np.diag(confusion).astype(float)
    support = confusion.sum(axis=1).astype(float)
    predicted = confusion.sum(axis=0).astype(float)
    per_class = []
    for c in range(n_classes):
        degenerate = predicted[c] == 0 or support[c] == 0
        prec = tp[c] / predicted[c] if predicted[c] > 0 else 0.0
        rec = tp[c] / support[c] if support[c] > 0 else 0.0
        f1 = 2 * prec * rec / (prec + rec) if (prec + rec) > 0 else 0.0
        per_class.append(ClassMetrics(label=c, precision=prec, recall=rec,
                                      f1=f1, support=int(support[c]),
                                      degenerate=bool(degenerate)))
    weights = support / n
    return MetricsReport(
        accuracy=float(tp.sum() / n),
        weighted_f1=float(sum(w * c.f1 for w, c in zip(weights, per_class))),
        weighted_precision=float(sum(w * c.precision
                                     for w, c in zip(weights, per_class))),
        weighted_recall=float(sum(w * c.recall for w, c in zip(weights, per_class))),
        confusion=confusion,
        n_samples=int(n),
        per_class=per_class,
    )


@dataclass
class EnsembleWeights:
    w: np.ndarray

    def to_list(self) -> list[float]:
        return self.w.tolist()


def ensemble_weights(val_accuracies) -> EnsembleWeights:
    """Weights proportional to validation accuracy, normalized to sum 1."""
    acc = np.asarray(val_accuracies, dtype=float).reshape(-1)
    if acc.size == 0:
        raise ValueError("need at least one accuracy")
    if (acc < 0).any():
        raise ValueError("accuracies must be >= 0")
    total = acc.sum()
    if total == 0:
        raise ValueError("all validation accuracies are zero; weights undefined")
    return EnsembleWeights(w=acc / total)


def ensemble_predict(models, weights: EnsembleWeights, batch):
    """Convex combination of member probability outputs.

    Returns (probabilities, labels); ties in the argmax go to the lowest
    class index.
    """
    n_models = len(models)
    if n_models != weights.w.size:
        raise ValueError(f"{n_models} models but {weights.w.size} weights")
    probs = None
    for model, w in zip(models, weights.w):
        p = model.predict_proba(batch)
        probs = w * p if probs is None else probs + w * p
    labels = probs.argmax(axis=1)
    return probs, labels
