"""Soft Dice training loss and segmentation evaluation metrics.

The loss functions operate on channels-last arrays of shape (..., C) and
accept either numpy arrays or torch tensors; with tensors they stay
differentiable, which is how the trainer uses them. Metrics operate on
integer confusion counts and return None where a ratio is undefined
(empty class), never raising for that case.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from snseg.core import (
    ClassCatalog,
    ClassConfusion,
    ConfusionCounts,
    DEFAULT_CATALOG,
    LabelMask,
    ProbabilityMap,
)
from snseg.errors import ValidationError

DEFAULT_SMOOTH = 1e-6


def _unwrap(x):
    return x.data if isinstance(x, ProbabilityMap) else x


def _per_class_sums(y, y_hat, smooth):
    if y.shape != y_hat.shape:
        raise ValidationError(f"shape mismatch: y {tuple(y.shape)} vs y_hat {tuple(y_hat.shape)}")
    if y.ndim < 2 or y.shape[-1] < 2:
        raise ValidationError(f"expected channels-last class axis of size >= 2, got shape {tuple(y.shape)}")
    axes = tuple(range(y.ndim - 1))
    inter = (y * y_hat).sum(axis=axes)
    sum_y = y.sum(axis=axes)
    sum_hat = y_hat.sum(axis=axes)
    return inter, sum_y, sum_hat


def _select_foreground(n_classes: int, foreground) -> list[int]:
    fg = list(range(1, n_classes)) if foreground is None else [int(c) for c in foreground]
    if not fg:
        raise ValidationError("no classes selected for the loss")
    for c in fg:
        if c < 0 or c >= n_classes:
            raise ValidationError(f"class {c} outside [0, {n_classes - 1}]")
    return fg


def soft_dice_per_class(y, y_hat, smooth: float = DEFAULT_SMOOTH):
    """Per-class soft Dice overlap, 2*sum(y*yhat)/(sum(y)+sum(yhat)), smoothed.

    With smooth=0 a class absent from both maps evaluates to 0/0 = nan.
    """
    y, y_hat = _unwrap(y), _unwrap(y_hat)
    inter, sum_y, sum_hat = _per_class_sums(y, y_hat, smooth)
    with np.errstate(invalid="ignore", divide="ignore"):
        return (2.0 * inter + smooth) / (sum_y + sum_hat + smooth)


def dice_loss(y, y_hat, smooth: float = DEFAULT_SMOOTH, foreground=None):
    """1 - mean soft Dice over the foreground classes (background excluded).

    `y` is a one-hot target map, `y_hat` a predicted probability map, both
    channels-last. The smooth term defines the empty-class case as a perfect
    score so absent regions do not dominate the loss.
    """
    y, y_hat = _unwrap(y), _unwrap(y_hat)
    fg = _select_foreground(y.shape[-1], foreground)
    dice = soft_dice_per_class(y, y_hat, smooth)
    return 1.0 - dice[fg].mean()


def jaccard_loss(y, y_hat, smooth: float = DEFAULT_SMOOTH, foreground=None):
    """1 - mean soft Jaccard (IoU) over the foreground classes."""
    y, y_hat = _unwrap(y), _unwrap(y_hat)
    fg = _select_foreground(y.shape[-1], foreground)
    inter, sum_y, sum_hat = _per_class_sums(y, y_hat, smooth)
    jac = (inter + smooth) / (sum_y + sum_hat - inter + smooth)
    return 1.0 - jac[fg].mean()


def cross_entropy_loss(y, y_hat, smooth: float = 1e-12, foreground=None):
    """Categorical cross-entropy, -mean over pixels of log y_hat at the true class.

    All classes participate (the `foreground` argument is accepted for
    signature parity and ignored); probabilities are clamped at `smooth`
    before the logarithm.
    """
    y, y_hat = _unwrap(y), _unwrap(y_hat)
    if y.shape != y_hat.shape:
        raise ValidationError(f"shape mismatch: y {tuple(y.shape)} vs y_hat {tuple(y_hat.shape)}")
    clamped = y_hat + smooth
    log_p = clamped.log() if hasattr(clamped, "log") else np.log(clamped)
    return -(y * log_p).sum(axis=-1).mean()


LOSSES = {
    "dice": dice_loss,
    "jaccard": jaccard_loss,
    "categorical_cross_entropy": cross_entropy_loss,
}


# ---------------------------------------------------------------------------
# Confusion counts and the four reported metrics


def confusion(pred: LabelMask, truth: LabelMask, catalog: ClassCatalog = DEFAULT_CATALOG) -> ConfusionCounts:
    """Per-class one-vs-rest TP/FP/FN/TN pixel tallies."""
    if pred.data.shape != truth.data.shape:
        raise ValidationError(
            f"dimension mismatch: pred {pred.data.shape} vs truth {truth.data.shape}"
        )
    pred.validate_against(catalog)
    truth.validate_against(catalog)
    c = catalog.n_classes
    joint = np.bincount(
        (truth.data.astype(np.int64) * c + pred.data.astype(np.int64)).ravel(),
        minlength=c * c,
    ).reshape(c, c)
    total = int(joint.sum())
    per_class = {}
    for cid in range(c):
        tp = int(joint[cid, cid])
        fp = int(joint[:, cid].sum()) - tp
        fn = int(joint[cid, :].sum()) - tp
        per_class[cid] = ClassConfusion(tp=tp, fp=fp, fn=fn, tn=total - tp - fp - fn)
    return ConfusionCounts(per_class=per_class, total_pixels=total)


def precision(c: ClassConfusion) -> float | None:
    """TP/(TP+FP); None when nothing was predicted for the class."""
    denom = c.tp + c.fp
    return c.tp / denom if denom else None


def recall(c: ClassConfusion) -> float | None:
    """TP/(TP+FN); None when the class is absent from the ground truth."""
    denom = c.tp + c.fn
    return c.tp / denom if denom else None


def dice_coefficient(c: ClassConfusion) -> float | None:
    """2TP/(2TP+FP+FN); None when the class is absent from both masks."""
    denom = 2 * c.tp + c.fp + c.fn
    return 2 * c.tp / denom if denom else None


def iou(c: ClassConfusion) -> float | None:
    """TP/(TP+FP+FN); None when the class is absent from both masks."""
    denom = c.tp + c.fp + c.fn
    return c.tp / denom if denom else None


METRIC_FNS = {"iou": iou, "dice": dice_coefficient, "precision": precision, "recall": recall}
METRIC_NAMES = tuple(METRIC_FNS)


@dataclass(frozen=True)
class ClassMetrics:
    class_id: int
    name: str
    iou: float | None
    dice: float | None
    precision: float | None
    recall: float | None
    counts: ClassConfusion

    def value(self, metric: str) -> float | None:
        return getattr(self, metric)


@dataclass(frozen=True)
class MetricReport:
    """Per-class metrics plus their mean over a declared class list.

    Undefined per-class values (empty class) are excluded from the mean;
    `undefined_counts` records how many were skipped per metric.
    """

    per_class: dict[int, ClassMetrics]
    mean: dict[str, float | None]
    mean_classes: tuple[int, ...]
    undefined_counts: dict[str, int]
    total_pixels: int

    def to_json_dict(self) -> dict:
        return {
            "mean_classes": list(self.mean_classes),
            "mean": self.mean,
            "undefined_counts": self.undefined_counts,
            "total_pixels": self.total_pixels,
            "per_class": {
                str(cid): {
                    "name": m.name,
                    "iou": m.iou,
                    "dice": m.dice,
                    "precision": m.precision,
                    "recall": m.recall,
                    "tp": m.counts.tp,
                    "fp": m.counts.fp,
                    "fn": m.counts.fn,
                    "tn": m.counts.tn,
                }
                for cid, m in sorted(self.per_class.items())
            },
        }

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=2) + "\n")

    def write_csv(self, path: str | Path) -> None:
        """One row per class plus a mean row."""
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["class_id", "name", "iou", "dice", "precision", "recall", "tp", "fp", "fn", "tn"])
            for cid, m in sorted(self.per_class.items()):
                w.writerow([cid, m.name, _fmt(m.iou), _fmt(m.dice), _fmt(m.precision), _fmt(m.recall),
                            m.counts.tp, m.counts.fp, m.counts.fn, m.counts.tn])
            w.writerow(["mean", "+".join(str(c) for c in self.mean_classes),
                        _fmt(self.mean["iou"]), _fmt(self.mean["dice"]),
                        _fmt(self.mean["precision"]), _fmt(self.mean["recall"]), "", "", "", ""])


def _fmt(v: float | None) -> str:
    return "" if v is None else repr(float(v))


def report_from_counts(
    counts: ConfusionCounts,
    catalog: ClassCatalog = DEFAULT_CATALOG,
    mean_over=None,
) -> MetricReport:
    mean_classes = tuple(catalog.foreground_ids) if mean_over is None else tuple(int(c) for c in mean_over)
    for c in mean_classes:
        if c not in counts.per_class:
            raise ValidationError(f"mean_over class {c} has no confusion record")
    per_class = {}
    for cid, cc in counts.per_class.items():
        per_class[cid] = ClassMetrics(
            class_id=cid,
            name=catalog.name_of(cid),
            iou=iou(cc),
            dice=dice_coefficient(cc),
            precision=precision(cc),
            recall=recall(cc),
            counts=cc,
        )
    mean: dict[str, float | None] = {}
    undefined = {}
    for metric in METRIC_NAMES:
        values = [per_class[c].value(metric) for c in mean_classes]
        defined = [v for v in values if v is not None]
        undefined[metric] = len(values) - len(defined)
        mean[metric] = float(np.mean(defined)) if defined else None
    return MetricReport(
        per_class=per_class,
        mean=mean,
        mean_classes=mean_classes,
        undefined_counts=undefined,
        total_pixels=counts.total_pixels,
    )


def evaluate(
    pred: LabelMask,
    truth: LabelMask,
    catalog: ClassCatalog = DEFAULT_CATALOG,
    mean_over=None,
) -> MetricReport:
    """Score a predicted mask against ground truth.

    The mean is taken over `mean_over` (default: the foreground classes);
    per-class values that are undefined for this pair are excluded from the
    mean and counted in `undefined_counts`.
    """
    return report_from_counts(confusion(pred, truth, catalog), catalog, mean_over)


def dataset_mean(reports: list[MetricReport]) -> dict:
    """Mean over images of the per-image mean metrics (Table-style numbers).

    Images whose per-image mean is undefined for a metric are skipped and
    counted.
    """
    out: dict = {"n_images": len(reports), "mean": {}, "skipped": {}}
    for metric in METRIC_NAMES:
        vals = [r.mean[metric] for r in reports if r.mean[metric] is not None]
        out["mean"][metric] = float(np.mean(vals)) if vals else None
        out["skipped"][metric] = len(reports) - len(vals)
    return out
