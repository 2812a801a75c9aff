"""Evaluation metrics: weighted multi-label log loss, ROC-AUC, scan aggregation.

Class order everywhere is [epidural, intraparenchymal, intraventricular,
subarachnoid, subdural, any]. The challenge-style loss weights the "any"
class 2/7 and each subtype 1/7.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import UndefinedMetricError

CLASS_NAMES = ("epidural", "intraparenchymal", "intraventricular", "subarachnoid", "subdural", "any")
NUM_CLASSES = len(CLASS_NAMES)

DEFAULT_CLIP_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    """Per-class weights for the multi-label log loss; must be positive and sum to 1."""

    per_class: tuple[float, ...] = (1 / 7, 1 / 7, 1 / 7, 1 / 7, 1 / 7, 2 / 7)

    def __post_init__(self):
        w = np.asarray(self.per_class, dtype=np.float64)
        if w.shape != (NUM_CLASSES,):
            raise ValueError(f"expected {NUM_CLASSES} weights, got shape {w.shape}")
        if np.any(w <= 0):
            raise ValueError("loss weights must all be positive")
        if abs(float(w.sum()) - 1.0) > 1e-12:
            raise ValueError(f"loss weights must sum to 1, got {w.sum()!r}")

    def as_array(self) -> np.ndarray:
        return np.asarray(self.per_class, dtype=np.float64)


@dataclass
class MetricReport:
    weighted_log_loss: float
    per_class_auc: dict[str, float | None] = field(default_factory=dict)
    n_slices: int = 0
    n_scans: int = 0

    def to_json(self) -> str:
        return json.dumps(
            {
                "weighted_log_loss": self.weighted_log_loss,
                "per_class_auc": self.per_class_auc,
                "n_slices": self.n_slices,
                "n_scans": self.n_scans,
            },
            indent=2,
            sort_keys=True,
        )


def weighted_log_loss(
    preds: np.ndarray,
    targets: np.ndarray,
    weights: LossWeights | None = None,
    clip_eps: float = DEFAULT_CLIP_EPS,
    average: str = "per_class",
    valid: np.ndarray | None = None,
) -> float:
    """Class-weighted average of per-class binary cross-entropies.

    preds are probabilities in [0,1], clipped to [clip_eps, 1-clip_eps] before
    the log; targets are {0,1}. ``average`` picks the reduction order:

    - "per_class" (default): average BCE over rows per class, then combine the
      6 class means with the weights.
    - "per_row": weighted mean over classes within each row, then average rows.

    The two are identical whenever every row carries all 6 labels (the usual
    case here); they differ only when ``valid`` masks out individual cells.
    """
    weights = weights or LossWeights()
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.ndim != 2 or preds.shape[1] != NUM_CLASSES:
        raise ValueError(f"preds must be (N, {NUM_CLASSES}), got {preds.shape}")
    if preds.shape != targets.shape:
        raise ValueError(f"shape mismatch: preds {preds.shape} vs targets {targets.shape}")
    if not (0.0 < clip_eps < 0.5):
        raise ValueError(f"clip_eps must be in (0, 0.5), got {clip_eps}")
    if valid is None:
        valid = np.ones(preds.shape, dtype=bool)
    else:
        valid = np.asarray(valid, dtype=bool)
        if valid.shape != preds.shape:
            raise ValueError(f"valid mask shape {valid.shape} != preds shape {preds.shape}")

    p = np.clip(preds, clip_eps, 1.0 - clip_eps)
    bce = -(targets * np.log(p) + (1.0 - targets) * np.log(1.0 - p))
    w = weights.as_array()

    if average == "per_class":
        n_per_class = valid.sum(axis=0)
        if np.any(n_per_class == 0):
            raise ValueError("per_class averaging needs at least one valid row per class")
        class_means = (bce * valid).sum(axis=0) / n_per_class
        return float((w * class_means).sum())
    if average == "per_row":
        row_w = np.where(valid, w[None, :], 0.0)
        denom = row_w.sum(axis=1)
        if np.any(denom == 0):
            raise ValueError("per_row averaging needs at least one valid cell per row")
        row_means = (bce * row_w).sum(axis=1) / denom
        return float(row_means.mean())
    raise ValueError(f"unknown average mode {average!r}")


def roc_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """ROC-AUC as the Mann-Whitney statistic, ties counted half via midranks.

    Raises UndefinedMetricError when only one class is present; there is no
    silent 0.5 fallback.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"shape mismatch: scores {scores.shape} vs labels {labels.shape}")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = int(scores.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"AUC undefined: {n_pos} positive / {n_neg} negative samples"
        )

    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size, dtype=np.float64)
    ranks[order] = np.arange(1, scores.size + 1, dtype=np.float64)
    # replace ranks inside each tie group with the group midrank
    sorted_scores = scores[order]
    i = 0
    while i < sorted_scores.size:
        j = i
        while j + 1 < sorted_scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        if j > i:
            ranks[order[i : j + 1]] = (i + j + 2) / 2.0
        i = j + 1

    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def aggregate_scan(slice_probs: np.ndarray) -> np.ndarray:
    """Reduce per-slice probabilities (S, 6) to one row per scan: elementwise max over slices."""
    slice_probs = np.asarray(slice_probs, dtype=np.float64)
    if slice_probs.ndim != 2 or slice_probs.shape[1] != NUM_CLASSES:
        raise ValueError(f"expected (S, {NUM_CLASSES}) slice probabilities, got {slice_probs.shape}")
    if slice_probs.shape[0] < 1:
        raise ValueError("cannot aggregate an empty scan")
    return slice_probs.max(axis=0)


def compute_report(
    preds: np.ndarray,
    targets: np.ndarray,
    n_scans: int,
    weights: LossWeights | None = None,
    clip_eps: float = DEFAULT_CLIP_EPS,
) -> MetricReport:
    """Loss plus per-class AUC; AUC entries are None where a class is degenerate."""
    loss = weighted_log_loss(preds, targets, weights=weights, clip_eps=clip_eps)
    aucs: dict[str, float | None] = {}
    for c, name in enumerate(CLASS_NAMES):
        try:
            aucs[name] = roc_auc(preds[:, c], targets[:, c])
        except UndefinedMetricError:
            aucs[name] = None
    return MetricReport(
        weighted_log_loss=loss,
        per_class_auc=aucs,
        n_slices=int(preds.shape[0]),
        n_scans=int(n_scans),
    )


def write_slice_predictions(path, slice_ids, probs: np.ndarray) -> None:
    """Challenge-style long CSV: one row per (slice, class), `ID_<slice_id>_<subtype>,<prob>`."""
    probs = np.asarray(probs, dtype=np.float64)
    if len(slice_ids) != probs.shape[0]:
        raise ValueError("slice_ids and probs row count differ")
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["ID", "Label"])
        for slice_id, row in zip(slice_ids, probs):
            for name, p in zip(CLASS_NAMES, row):
                writer.writerow([f"ID_{slice_id}_{name}", f"{p:.9f}"])


def write_scan_predictions(path, study_ids, probs: np.ndarray) -> None:
    """Wide CSV: `study_id,<6 probability columns>`, one row per scan."""
    probs = np.asarray(probs, dtype=np.float64)
    if len(study_ids) != probs.shape[0]:
        raise ValueError("study_ids and probs row count differ")
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["study_id", *CLASS_NAMES])
        for study_id, row in zip(study_ids, probs):
            writer.writerow([study_id, *(f"{p:.9f}" for p in row)])
