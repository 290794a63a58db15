"""Accuracy assessment: confusion matrices and per-class agreement scores.

Confusion matrices follow the remote-sensing convention: rows are the
reference classes, columns the predicted classes. User's accuracy (UA) is
the per-class precision (diagonal over column sum), producer's accuracy (PA)
the per-class recall (diagonal over row sum).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import InputError, MetricError, ShapeError
from .hierarchy import LEVELS, Taxonomy, aggregate_labels
from .rasters import NODATA


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (n, n) int64, rows = reference, cols = predicted
    class_names: tuple

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(predicted: np.ndarray, reference: np.ndarray, n_classes: int,
              class_names: Optional[tuple] = None) -> ConfusionMatrix:
    """Count (reference, predicted) pairs over pixels valid in both rasters."""
    predicted = np.asarray(predicted)
    reference = np.asarray(reference)
    if predicted.shape != reference.shape:
        raise ShapeError(f"prediction shape {predicted.shape} does not match "
                         f"reference shape {reference.shape}")
    pred = predicted.reshape(-1).astype(np.int64)
    ref = reference.reshape(-1).astype(np.int64)
    valid = (pred != NODATA) & (ref != NODATA)
    pred, ref = pred[valid], ref[valid]
    for what, ids in (("prediction", pred), ("reference", ref)):
        if ids.size and (ids.min() < 0 or ids.max() >= n_classes):
            raise InputError(f"{what} contains a class id outside [0, {n_classes})")
    counts = np.bincount(ref * n_classes + pred, minlength=n_classes * n_classes)
    names = tuple(class_names) if class_names is not None \
        else tuple(str(i) for i in range(n_classes))
    if len(names) != n_classes:
        raise InputError(f"expected {n_classes} class names, got {len(names)}")
    return ConfusionMatrix(counts.reshape(n_classes, n_classes), names)


@dataclass
class ClassScores:
    """Per-class and average agreement scores for one confusion matrix.

    Classes absent from both rasters (zero row and column) have undefined
    scores, carry NaN, and are excluded from every average; `defined` flags
    which classes count.
    """
    class_names: tuple
    support: np.ndarray          # reference pixels per class
    ua: np.ndarray               # precision
    pa: np.ndarray               # recall
    f1: np.ndarray
    defined: np.ndarray          # bool mask
    overall_accuracy: float
    mean_ua: float
    mean_pa: float
    mean_f1: float
    weighted_f1: float


def score_confusion(cm: ConfusionMatrix) -> ClassScores:
    """Score a confusion matrix. A zero denominator makes the corresponding
    score undefined (NaN): UA needs predicted pixels, PA needs reference
    pixels, F1 needs both. Undefined scores are excluded from the averages,
    never counted as zero."""
    counts = cm.counts.astype(np.float64)
    total = counts.sum()
    if total == 0:
        raise MetricError("confusion matrix is empty; no jointly labeled pixels")
    diag = np.diag(counts)
    row = counts.sum(axis=1)
    col = counts.sum(axis=0)
    ua = np.full(cm.n_classes, np.nan)
    pa = np.full(cm.n_classes, np.nan)
    f1 = np.full(cm.n_classes, np.nan)
    np.divide(diag, col, out=ua, where=col > 0)
    np.divide(diag, row, out=pa, where=row > 0)
    both = (col > 0) & (row > 0)
    denom = ua + pa
    np.divide(2 * ua * pa, denom, out=f1, where=both & (denom > 0))
    f1[both & (denom == 0)] = 0.0
    defined = ~np.isnan(f1)
    weights = row[defined]
    weighted_f1 = float((f1[defined] * weights).sum() / weights.sum()) \
        if defined.any() and weights.sum() > 0 else float("nan")
    return ClassScores(
        class_names=cm.class_names,
        support=row.astype(np.int64),
        ua=ua, pa=pa, f1=f1, defined=defined,
        overall_accuracy=float(diag.sum() / total),
        mean_ua=float(np.nanmean(ua)) if not np.isnan(ua).all() else float("nan"),
        mean_pa=float(np.nanmean(pa)) if not np.isnan(pa).all() else float("nan"),
        mean_f1=float(np.nanmean(f1)) if defined.any() else float("nan"),
        weighted_f1=weighted_f1,
    )


def scores_to_csv(scores: ClassScores) -> str:
    """CSV report: one row per class plus overall/mean/weighted summary rows."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["class", "support", "ua", "pa", "f1", "defined"])

    def fmt(x):
        return "" if np.isnan(x) else f"{x:.6f}"

    for i, name in enumerate(scores.class_names):
        writer.writerow([name, int(scores.support[i]), fmt(scores.ua[i]),
                         fmt(scores.pa[i]), fmt(scores.f1[i]),
                         "yes" if scores.defined[i] else "no"])
    writer.writerow(["__overall_accuracy__", int(scores.support.sum()),
                     "", "", f"{scores.overall_accuracy:.6f}", "yes"])
    writer.writerow(["__mean__", "", f"{scores.mean_ua:.6f}", f"{scores.mean_pa:.6f}",
                     f"{scores.mean_f1:.6f}", "yes"])
    writer.writerow(["__weighted_f1__", "", "", "", f"{scores.weighted_f1:.6f}", "yes"])
    return buf.getvalue()


def format_scores(scores: ClassScores, title: str = "") -> str:
    """Fixed-width table for terminal output."""
    width = max([len(n) for n in scores.class_names] + [16])
    lines = []
    if title:
        lines.append(title)
    lines.append(f"{'class':<{width}}  {'support':>8}  {'UA':>7}  {'PA':>7}  {'F1':>7}")

    def fmt(x):
        return "   n/a " if np.isnan(x) else f"{x:7.4f}"

    for i, name in enumerate(scores.class_names):
        lines.append(f"{name:<{width}}  {int(scores.support[i]):>8}  "
                     f"{fmt(scores.ua[i])}  {fmt(scores.pa[i])}  {fmt(scores.f1[i])}")
    lines.append(f"{'overall accuracy':<{width}}  {'':>8}  {'':>7}  {'':>7}  "
                 f"{scores.overall_accuracy:7.4f}")
    lines.append(f"{'mean (defined)':<{width}}  {'':>8}  {fmt(scores.mean_ua)}  "
                 f"{fmt(scores.mean_pa)}  {fmt(scores.mean_f1)}")
    lines.append(f"{'weighted F1':<{width}}  {'':>8}  {'':>7}  {'':>7}  "
                 f"{scores.weighted_f1:7.4f}")
    return "\n".join(lines)


def hierarchical_report(micro_predicted: np.ndarray, micro_reference: np.ndarray,
                        taxonomy: Taxonomy, mode: str = "aggregated",
                        head_predictions: Optional[dict] = None) -> dict:
    """Scores at every level of the taxonomy.

    In ``aggregated`` mode coarse predictions are derived from the micro map
    through the taxonomy; in ``heads`` mode the caller supplies the coarse
    maps the branch heads predicted directly via `head_predictions`.
    Returns {level: (ConfusionMatrix, ClassScores)}.
    """
    if mode not in ("aggregated", "heads"):
        raise InputError(f"mode must be 'aggregated' or 'heads', got {mode!r}")
    report = {}
    for level in LEVELS:
        ref = aggregate_labels(micro_reference, taxonomy, level)
        if level == "micro":
            pred = np.asarray(micro_predicted)
        elif mode == "aggregated":
            pred = aggregate_labels(micro_predicted, taxonomy, level)
        else:
            if head_predictions is None or level not in head_predictions:
                raise InputError(f"heads mode needs a predicted {level} map")
            pred = np.asarray(head_predictions[level])
        cm = confusion(pred, ref, taxonomy.n_classes(level), taxonomy.names(level))
        report[level] = (cm, score_confusion(cm))
    return report
