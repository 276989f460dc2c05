"""Jaccard training loss, micro-averaged evaluation metrics, Otsu baseline.

All reported metrics derive from one-vs-rest confusion counts aggregated
over every class and pixel (micro-averaging), so each pixel-class decision
weighs equally. Confusion totals form a commutative monoid under
component-wise addition; per-image totals are merged before any metric is
computed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from tipseg.errors import DataValidationError, DegenerateInputError
from tipseg.imgdata import GrayImage, LabelMask, NUM_CLASSES


@dataclass
class ConfusionTotals:
    """One-vs-rest TP/FP/FN/TN counts summed over all classes and pixels.

    Per-class counts are kept alongside the aggregates so per-class IoU can
    be reported; they are optional because totals may also be built by hand.
    """

    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0
    per_class_tp: np.ndarray | None = None
    per_class_fp: np.ndarray | None = None
    per_class_fn: np.ndarray | None = None

    def __add__(self, other: "ConfusionTotals") -> "ConfusionTotals":
        def merge(a, b):
            if a is None or b is None:
                return None
            return a + b
        return ConfusionTotals(
            self.tp + other.tp, self.fp + other.fp,
            self.fn + other.fn, self.tn + other.tn,
            merge(self.per_class_tp, other.per_class_tp),
            merge(self.per_class_fp, other.per_class_fp),
            merge(self.per_class_fn, other.per_class_fn),
        )


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    f2: float
    miou: float
    per_class_iou: np.ndarray | None = None


def soft_jaccard_loss(probs: torch.Tensor, target, eps: float = 1e-7) -> torch.Tensor:
    """Differentiable Jaccard loss, 1 - (|A.B| + eps) / (|A u B| + eps).

    ``probs`` is (B, C, H, W) of per-pixel class probabilities; ``target``
    is either an integer mask (B, H, W) or a one-hot tensor of the same
    shape as ``probs``. Intersection and union are summed over all classes
    and pixels (micro aggregation). The loss is 0 exactly when the
    probabilities equal the one-hot target (in the eps -> 0 limit) and is
    bounded by 1 for normalized inputs.
    """
    if probs.ndim != 4:
        raise DataValidationError(f"probs must be (B, C, H, W), got {tuple(probs.shape)}")
    if isinstance(target, np.ndarray):
        target = torch.from_numpy(target.astype(np.int64))
    if target.dtype in (torch.int64, torch.int32, torch.uint8):
        if target.shape != (probs.shape[0],) + probs.shape[2:]:
            raise DataValidationError(
                f"target shape {tuple(target.shape)} does not match probs {tuple(probs.shape)}")
        onehot = torch.nn.functional.one_hot(target.long(), probs.shape[1])
        onehot = onehot.permute(0, 3, 1, 2).to(probs.dtype)
    else:
        if target.shape != probs.shape:
            raise DataValidationError(
                f"one-hot target shape {tuple(target.shape)} != probs {tuple(probs.shape)}")
        onehot = target.to(probs.dtype)
    inter = (probs * onehot).sum()
    union = probs.sum() + onehot.sum() - inter
    return 1.0 - (inter + eps) / (union + eps)


def argmax_mask(scores) -> LabelMask:
    """Per-pixel argmax over the class axis of a (C, H, W) map.

    Ties break toward the smaller class index. Works for logits or
    probabilities (argmax is invariant under monotone per-pixel rescaling).
    """
    if isinstance(scores, torch.Tensor):
        scores = scores.detach().cpu().numpy()
    scores = np.asarray(scores)
    if scores.ndim != 3:
        raise DataValidationError(f"expected (C, H, W) scores, got shape {scores.shape}")
    return LabelMask(np.argmax(scores, axis=0).astype(np.uint8))


def confusion(pred, truth, num_classes: int = NUM_CLASSES) -> ConfusionTotals:
    """One-vs-rest confusion totals between two label masks."""
    p = pred.labels if isinstance(pred, LabelMask) else np.asarray(pred)
    t = truth.labels if isinstance(truth, LabelMask) else np.asarray(truth)
    if p.shape != t.shape:
        raise DataValidationError(f"mask shapes differ: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise DataValidationError("empty masks")
    if int(p.max()) >= num_classes or int(t.max()) >= num_classes:
        raise DataValidationError(f"label out of range for {num_classes} classes")

    n = p.size
    tp_c = np.zeros(num_classes, dtype=np.int64)
    pred_c = np.bincount(p.ravel(), minlength=num_classes).astype(np.int64)
    truth_c = np.bincount(t.ravel(), minlength=num_classes).astype(np.int64)
    agree = p == t
    if agree.any():
        tp_c = np.bincount(p[agree].ravel(), minlength=num_classes).astype(np.int64)
    fp_c = pred_c - tp_c
    fn_c = truth_c - tp_c
    tp, fp, fn = int(tp_c.sum()), int(fp_c.sum()), int(fn_c.sum())
    tn = num_classes * n - tp - fp - fn
    return ConfusionTotals(tp, fp, fn, tn, tp_c, fp_c, fn_c)


def _ratio(num: float, den: float) -> float:
    # A zero denominator means no positives exist anywhere; by convention
    # the metric is perfect (1.0) in that vacuous case.
    return 1.0 if den == 0 else num / den


def metrics(totals: ConfusionTotals) -> MetricsReport:
    """Micro-averaged metrics from aggregated confusion totals."""
    tp, fp, fn, tn = totals.tp, totals.fp, totals.fn, totals.tn
    if min(tp, fp, fn, tn) < 0:
        raise DataValidationError("confusion counts must be non-negative")
    accuracy = _ratio(tp + tn, tp + tn + fp + fn)
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    f1 = _ratio(2 * tp, 2 * tp + fp + fn)
    f2 = _ratio(5 * precision * recall, 4 * precision + recall)
    miou = _ratio(tp, tp + fp + fn)
    per_class = None
    if totals.per_class_tp is not None:
        tpc = totals.per_class_tp.astype(np.float64)
        denom = (totals.per_class_tp + totals.per_class_fp + totals.per_class_fn)
        per_class = np.where(denom == 0, 1.0, tpc / np.maximum(denom, 1))
    return MetricsReport(accuracy, precision, recall, f1, f2, miou, per_class)


METRIC_COLUMNS = ("accuracy", "precision", "recall", "f1", "f2", "miou")


def metrics_csv_header() -> str:
    return "model," + ",".join(METRIC_COLUMNS)


def metrics_csv_row(name: str, report: MetricsReport) -> str:
    vals = [getattr(report, c) for c in METRIC_COLUMNS]
    return name + "," + ",".join(f"{v:.6f}" for v in vals)


def format_report(name: str, report: MetricsReport) -> str:
    lines = [f"model: {name}"]
    lines += [f"  {c:>9s}: {getattr(report, c):.6f}" for c in METRIC_COLUMNS]
    if report.per_class_iou is not None:
        ious = " ".join(f"{v:.4f}" for v in report.per_class_iou)
        lines.append(f"  per-class IoU: {ious}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Otsu thresholding baseline


def otsu_threshold_value(image: GrayImage) -> int:
    """Threshold k maximizing between-class variance; foreground is v > k.

    The search runs on the 256-bin histogram with exact integer arithmetic;
    score plateaus (common with few distinct values) resolve to the plateau
    midpoint.
    """
    hist = np.bincount(image.values.ravel(), minlength=256).tolist()
    return _otsu_from_histogram(hist)


def _otsu_from_histogram(hist: list[int]) -> int:
    total = sum(hist)
    total_sum = sum(v * h for v, h in enumerate(hist))
    # Between-class variance at split k (class0 = values <= k):
    #   w0*w1*(mu1 - mu0)^2  proportional to  (s1*n0 - s0*n1)^2 / (n0*n1),
    # compared across k as exact integer cross-products.
    best_num, best_den = -1, 1
    plateau: list[int] = []
    n0 = s0 = 0
    for k in range(255):
        n0 += hist[k]
        s0 += k * hist[k]
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            continue
        s1 = total_sum - s0
        num = (s1 * n0 - s0 * n1) ** 2
        den = n0 * n1
        if num * best_den > best_num * den:
            best_num, best_den = num, den
            plateau = [k]
        elif num * best_den == best_num * den:
            plateau.append(k)
    if not plateau:
        raise DegenerateInputError("image has fewer than 2 distinct values")
    return (plateau[0] + plateau[-1]) // 2


def otsu_threshold(image: GrayImage) -> LabelMask:
    """Binary foreground mask (1 = brighter side of the Otsu threshold)."""
    k = otsu_threshold_value(image)
    return LabelMask((image.values > k).astype(np.uint8))
