"""Segmentation and classification metrics.

Everything here is plain numpy and pure. Soft metrics (dice, soft IOU) take
probabilities; hard metrics binarize first with :func:`binarize`.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

DEFAULT_SMOOTH = 1.0
DEFAULT_THRESHOLD = 0.5


def _pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs truth {truth.shape}")
    return pred.ravel(), truth.ravel()


def binarize(pred, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Hard mask: 1 where ``pred >= threshold``."""
    return (np.asarray(pred, dtype=np.float64) >= threshold).astype(np.uint8)


def dice_coef(pred, truth, smooth: float = DEFAULT_SMOOTH) -> float:
    p, t = _pair(pred, truth)
    return float((2.0 * np.dot(p, t) + smooth) / (p.sum() + t.sum() + smooth))


def dice_loss(pred, truth, smooth: float = DEFAULT_SMOOTH) -> float:
    """Negated dice, so a perfect prediction scores -1."""
    return -dice_coef(pred, truth, smooth)


def soft_iou(pred, truth, smooth: float = DEFAULT_SMOOTH) -> float:
    p, t = _pair(pred, truth)
    inter = np.dot(p, t)
    return float((inter + smooth) / (p.sum() + t.sum() - inter + smooth))


def mean_iou(pred, truth, binarize_threshold: float = DEFAULT_THRESHOLD) -> float:
    """Unweighted mean of background and foreground hard IOU.

    A class absent from both prediction and truth scores 1.
    """
    p, t = _pair(pred, truth)
    p = binarize(p, binarize_threshold).astype(bool)
    t = t.astype(bool)
    ious = []
    for ps, ts in ((~p, ~t), (p, t)):
        union = np.count_nonzero(ps | ts)
        ious.append(1.0 if union == 0 else np.count_nonzero(ps & ts) / union)
    return float(np.mean(ious))


def precision_recall(pred, truth, binarize_threshold: float = DEFAULT_THRESHOLD) -> tuple[float, float]:
    p, t = _pair(pred, truth)
    p = binarize(p, binarize_threshold).astype(bool)
    t = t.astype(bool)
    tp = np.count_nonzero(p & t)
    fp = np.count_nonzero(p & ~t)
    fn = np.count_nonzero(~p & t)
    precision = 1.0 if tp + fp == 0 else tp / (tp + fp)
    recall = 1.0 if tp + fn == 0 else tp / (tp + fn)
    return float(precision), float(recall)


def avg_test_iou(per_image_ious) -> float:
    values = np.asarray(per_image_ious, dtype=np.float64)
    if values.size == 0:
        raise ValueError("avg_test_iou needs at least one value")
    return float(values.mean())


def thresholded_accuracy(per_image_ious, iou_threshold: float) -> float:
    """Fraction of images whose IOU is strictly above ``iou_threshold``."""
    values = np.asarray(per_image_ious, dtype=np.float64)
    if values.size == 0:
        raise ValueError("thresholded_accuracy needs at least one value")
    if not 0 < iou_threshold < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {iou_threshold}")
    return float(np.count_nonzero(values > iou_threshold) / values.size)


def roc_auc_binary(scores, labels) -> float:
    """Area under the ROC curve as the Mann-Whitney statistic (ties count one half)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    pos = labels == 1
    n_pos = int(np.count_nonzero(pos))
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc_binary needs both classes present")
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_auc_multiclass(probabilities, labels) -> float:
    """Macro average of one-vs-rest binary AUCs."""
    probs = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels).ravel()
    if probs.ndim != 2 or probs.shape[0] != labels.size:
        raise ValueError("probabilities must be N x C with one label per row")
    if not np.allclose(probs.sum(axis=1), 1.0, atol=1e-6, rtol=0):
        raise ValueError("probability rows must sum to 1")
    n_classes = probs.shape[1]
    if len(np.unique(labels)) < n_classes:
        raise ValueError("every class must be present in labels")
    return float(np.mean([roc_auc_binary(probs[:, c], (labels == c).astype(int)) for c in range(n_classes)]))


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray
    class_names: tuple[str, ...]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.total) if self.total else 0.0

    def mismatches(self) -> list[tuple[str, str, int]]:
        """(truth, predicted, count) for every non-empty off-diagonal cell."""
        out = []
        for t, p in zip(*np.nonzero(self.counts)):
            if t != p:
                out.append((self.class_names[t], self.class_names[p], int(self.counts[t, p])))
        return out


def confusion(predictions, labels, n_classes: int, class_names=None) -> ConfusionMatrix:
    predictions = np.asarray(predictions, dtype=np.int64).ravel()
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if predictions.shape != labels.shape:
        raise ValueError("predictions and labels differ in length")
    for arr in (predictions, labels):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise ValueError(f"class index out of range [0, {n_classes})")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (labels, predictions), 1)
    names = tuple(class_names) if class_names is not None else tuple(str(i) for i in range(n_classes))
    return ConfusionMatrix(counts, names)


@dataclass
class SegMetricsReport:
    per_image_iou: list[float]
    avg_test_iou: float
    threshold_accuracies: dict[float, float]
    dice: float
    mean_iou: float
    precision: float
    recall: float
    roc_auc: float
    loss: float = float("nan")
    model: str = ""
    optimizer: str = ""
    extra: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        record = asdict(self)
        record["threshold_accuracies"] = {f"{k:g}": v for k, v in self.threshold_accuracies.items()}
        return record

    def to_json_line(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True)


TABLE_COLUMNS = [
    "model",
    "optimizer",
    "avg_test_iou",
    "test_accuracy_iou_0.9",
    "test_accuracy_iou_0.85",
    "dice",
    "iou",
    "mean_iou",
    "precision",
    "recall",
    "roc_auc",
    "loss",
]


def reports_to_csv(reports) -> str:
    """One row per evaluated model, Table-8 style columns."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TABLE_COLUMNS)
    for r in reports:
        writer.writerow(
            [
                r.model,
                r.optimizer,
                f"{r.avg_test_iou:.6f}",
                f"{r.threshold_accuracies.get(0.9, float('nan')):.6f}",
                f"{r.threshold_accuracies.get(0.85, float('nan')):.6f}",
                f"{r.dice:.6f}",
                f"{r.avg_test_iou:.6f}",
                f"{r.mean_iou:.6f}",
                f"{r.precision:.6f}",
                f"{r.recall:.6f}",
                f"{r.roc_auc:.6f}",
                f"{r.loss:.6f}",
            ]
        )
    return buf.getvalue()


def segmentation_report(probabilities, truths, iou_thresholds=(0.9, 0.85), smooth: float = DEFAULT_SMOOTH) -> SegMetricsReport:
    """Score a stack of probability maps against binary truths.

    Per-image soft IOU drives the average and thresholded accuracies; dice,
    mean IOU, precision, recall and ROC pool all pixels of the set.
    """
    probs = np.asarray(probabilities, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    if probs.shape != truths.shape:
        raise ValueError(f"shape mismatch: {probs.shape} vs {truths.shape}")
    if probs.shape[0] == 0:
        raise ValueError("empty test set")
    per_image = [soft_iou(p, t, smooth) for p, t in zip(probs, truths)]
    flat_t = truths.ravel()
    if flat_t.min() == flat_t.max():
        # only one class in the pooled truth: score agreement of hard masks
        roc = 1.0 if np.array_equal(binarize(probs.ravel()), flat_t.astype(np.uint8)) else 0.5
    else:
        roc = roc_auc_binary(probs.ravel(), flat_t.astype(int))
    precision, recall = precision_recall(probs, truths)
    dice = dice_coef(probs, truths, smooth)
    return SegMetricsReport(
        per_image_iou=per_image,
        avg_test_iou=avg_test_iou(per_image),
        threshold_accuracies={float(t): thresholded_accuracy(per_image, t) for t in iou_thresholds},
        dice=dice,
        mean_iou=mean_iou(probs, truths),
        precision=precision,
        recall=recall,
        roc_auc=roc,
        loss=-dice,
    )
