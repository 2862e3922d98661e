"""Confusion matrices, macro metrics, and the test-time unknown rule."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from trafficlearn.alignment import ClassCentroids
from trafficlearn.data import FlowRecord, features_matrix
from trafficlearn.model import Classifier

UNKNOWN_LABEL = "Unknown"


@dataclass(frozen=True)
class ConfusionMatrix:
    true_classes: tuple[str, ...]
    pred_classes: tuple[str, ...]
    counts: np.ndarray  # (len(true), len(pred)) nonnegative ints

    def __post_init__(self):
        if self.counts.shape != (len(self.true_classes), len(self.pred_classes)):
            raise ValueError("counts shape does not match class lists")
        if np.any(self.counts < 0):
            raise ValueError("negative count")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def normalized(self) -> np.ndarray:
        """Row-normalized view; all-zero rows stay zero."""
        sums = self.counts.sum(axis=1, keepdims=True).astype(np.float64)
        with np.errstate(invalid="ignore", divide="ignore"):
            out = np.where(sums > 0, self.counts / sums, 0.0)
        return out

    def to_dict(self) -> dict:
        return {
            "true_classes": list(self.true_classes),
            "pred_classes": list(self.pred_classes),
            "counts": self.counts.tolist(),
            "normalized": self.normalized().tolist(),
        }


@dataclass(frozen=True)
class MetricSet:
    accuracy: float
    precision: float
    recall: float
    fpr: float

    def __post_init__(self):
        for name in ("accuracy", "precision", "recall", "fpr"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name}={v} outside [0, 1]")

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "precision": self.precision,
                "recall": self.recall, "fpr": self.fpr}


def confusion_from_predictions(
    y_true: Sequence[str],
    y_pred: Sequence[str],
    true_classes: Sequence[str] | None = None,
    pred_classes: Sequence[str] | None = None,
) -> ConfusionMatrix:
    if len(y_true) != len(y_pred):
        raise ValueError("prediction/truth length mismatch")
    if not y_true:
        raise ValueError("empty evaluation set")
    tc = tuple(true_classes) if true_classes is not None else tuple(sorted(set(y_true)))
    pc = tuple(pred_classes) if pred_classes is not None else tuple(sorted(set(y_pred)))
    t_idx = {c: i for i, c in enumerate(tc)}
    p_idx = {c: i for i, c in enumerate(pc)}
    counts = np.zeros((len(tc), len(pc)), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        counts[t_idx[t], p_idx[p]] += 1
    return ConfusionMatrix(tc, pc, counts)


def metrics_from_confusion(cm: ConfusionMatrix) -> MetricSet:
    """Macro precision/recall/FPR over classes that actually occur as truth.

    The matrix must be square with matching row/column classes (collapse
    unknown-class truth to the Unknown column before calling).
    """
    if cm.true_classes != cm.pred_classes:
        raise ValueError("metrics need a square matrix over one class list")
    counts = cm.counts.astype(np.float64)
    total = counts.sum()
    accuracy = float(np.trace(counts) / total)

    precisions, recalls, fprs = [], [], []
    for i, _ in enumerate(cm.true_classes):
        support = counts[i].sum()
        if support == 0:
            continue
        tp = counts[i, i]
        fp = counts[:, i].sum() - tp
        fn = support - tp
        tn = total - tp - fp - fn
        precisions.append(tp / (tp + fp) if tp + fp > 0 else 0.0)
        recalls.append(tp / (tp + fn))
        fprs.append(fp / (fp + tn) if fp + tn > 0 else 0.0)
    return MetricSet(
        accuracy=accuracy,
        precision=float(np.mean(precisions)),
        recall=float(np.mean(recalls)),
        fpr=float(np.mean(fprs)),
    )


@dataclass(frozen=True)
class InferenceRule:
    """Test-time unknown detection: low confidence AND failed alignment.

    Reuses the thresholds recorded during the run: a sample is predicted
    Unknown iff its confidence is at or below the detection confidence
    cutoff and its embedding sits at least the alignment threshold away
    from every class centroid.  With any component missing the rule never
    fires (no unknowns were ever detected during the run).
    """

    centroids: ClassCentroids | None
    threshold: float | None
    confidence_cutoff: float | None

    def unknown_mask(self, embeddings: np.ndarray, confidences: np.ndarray) -> np.ndarray:
        n = embeddings.shape[0]
        if self.centroids is None or self.threshold is None or self.confidence_cutoff is None:
            return np.zeros(n, dtype=bool)
        diffs = embeddings[:, None, :] - self.centroids.centroids[None, :, :]
        min_dist = np.einsum("nmj,nmj->nm", diffs, diffs).min(axis=1)
        return (confidences <= self.confidence_cutoff) & (min_dist >= self.threshold)


def predict_labels(model: Classifier, X: np.ndarray, rule: InferenceRule) -> list[str]:
    probs = model.predict_proba(X)
    emb = model.embed(X)
    conf = probs.max(axis=1)
    arg = probs.argmax(axis=1)
    unknown = rule.unknown_mask(emb, conf)
    return [UNKNOWN_LABEL if unknown[i] else model.classes[arg[i]] for i in range(X.shape[0])]


def evaluate(
    model: Classifier,
    test: Sequence[tuple[FlowRecord, str]],
    rule: InferenceRule,
) -> tuple[ConfusionMatrix, MetricSet]:
    """Score the model on labeled test pairs.

    Returns a detailed matrix (rows: every true class by name, columns: the
    model's classes plus Unknown) and macro metrics computed on the collapsed
    square matrix where out-of-label-set truth counts as Unknown.
    """
    if not test:
        raise ValueError("empty test set")
    X = features_matrix([r for r, _ in test])
    y_true = [lab for _, lab in test]
    y_pred = predict_labels(model, X, rule)

    detailed = confusion_from_predictions(
        y_true,
        y_pred,
        true_classes=sorted(set(y_true)),
        pred_classes=list(model.classes) + [UNKNOWN_LABEL],
    )
    square_classes = list(model.classes) + [UNKNOWN_LABEL]
    y_true_sq = [t if t in model.classes else UNKNOWN_LABEL for t in y_true]
    collapsed = confusion_from_predictions(y_true_sq, y_pred, square_classes, square_classes)
    return detailed, metrics_from_confusion(collapsed)


def quick_scores(
    model: Classifier,
    test: Sequence[tuple[FlowRecord, str]],
    rule: InferenceRule,
) -> dict:
    """Per-step snapshot: overall accuracy, known-class accuracy, unknown recall."""
    if not test:
        return {"accuracy": None, "known_accuracy": None, "unknown_recall": None}
    X = features_matrix([r for r, _ in test])
    y_true = [lab for _, lab in test]
    y_pred = predict_labels(model, X, rule)

    known_mask = [t in model.classes for t in y_true]
    correct_all = [
        p == (t if t in model.classes else UNKNOWN_LABEL) for t, p in zip(y_true, y_pred)
    ]
    out = {"accuracy": float(np.mean(correct_all))}
    known_hits = [p == t for t, p, k in zip(y_true, y_pred, known_mask) if k]
    out["known_accuracy"] = float(np.mean(known_hits)) if known_hits else None
    unk_hits = [p == UNKNOWN_LABEL for t, p, k in zip(y_true, y_pred, known_mask) if not k]
    out["unknown_recall"] = float(np.mean(unk_hits)) if unk_hits else None
    return out


def macro_accuracy(cm: ConfusionMatrix, truth_to_pred=None) -> float:
    """Mean per-class recall over true classes, mapping truth names to the
    prediction column they should land in (identity by default)."""
    recalls = []
    for i, cls in enumerate(cm.true_classes):
        support = cm.counts[i].sum()
        if support == 0:
            continue
        target = truth_to_pred(cls) if truth_to_pred else cls
        if target in cm.pred_classes:
            j = cm.pred_classes.index(target)
            recalls.append(cm.counts[i, j] / support)
        else:
            recalls.append(0.0)
    return float(np.mean(recalls))
