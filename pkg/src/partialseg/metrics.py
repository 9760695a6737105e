"""Hard-prediction Dice and Hausdorff metrics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial.distance import directed_hausdorff

from partialseg.errors import ShapeMismatch
from partialseg.label_space import MergePartition, project_labels


def argmax_predict(probs: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest index
    return np.argmax(np.asarray(probs), axis=-1)


def _binary(pred, gt, cls):
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs ground truth {gt.shape}")
    return pred == cls, gt == cls


def dice_coefficient(pred: np.ndarray, gt: np.ndarray, cls: int) -> float:
    a, b = _binary(pred, gt, cls)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def image_diagonal(shape: Sequence[int]) -> float:
    return math.sqrt(sum(int(s) ** 2 for s in shape))


def hausdorff_distance(pred: np.ndarray, gt: np.ndarray, cls: int) -> tuple[float, bool]:
    """Exact symmetric Hausdorff distance in pixels between class masks.

    Returns ``(distance, sentinel)``. When either mask is empty the
    distance is the image diagonal and ``sentinel`` is True.
    """
    a, b = _binary(pred, gt, cls)
    pa, pb = np.argwhere(a), np.argwhere(b)
    if len(pa) == 0 or len(pb) == 0:
        return image_diagonal(a.shape), True
    d = max(directed_hausdorff(pa, pb)[0], directed_hausdorff(pb, pa)[0])
    return float(d), False


@dataclass
class MetricsReport:
    per_class_dice: dict[int, float] = field(default_factory=dict)
    per_class_hausdorff: dict[int, float] = field(default_factory=dict)
    hd_sentinel: dict[int, bool] = field(default_factory=dict)
    rows: list[dict] = field(default_factory=list)

    @property
    def mean_dice(self) -> float:
        vals = list(self.per_class_dice.values())
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def mean_hd(self) -> float:
        vals = [v for k, v in self.per_class_hausdorff.items() if not self.hd_sentinel.get(k)]
        return float(np.mean(vals)) if vals else float("nan")


def scored_classes(partition: MergePartition) -> tuple[int, ...]:
    """Global classes a dataset annotates: every foreground class for fully
    labeled data, the kept classes otherwise."""
    if partition.is_identity:
        return partition.space.foreground
    return partition.kept


def evaluate_dataset(
    predictions: Iterable[np.ndarray],
    ground_truths: Iterable[np.ndarray],
    partition: MergePartition,
    dataset_id: str = "",
    sample_ids: Sequence[str] | None = None,
    classes: Sequence[int] | None = None,
) -> MetricsReport:
    """Score global-space predictions against a dataset's annotations.

    Predictions are projected into the dataset's merged space before
    scoring, so an organ the dataset does not annotate counts as
    background. ``ground_truths`` are global masks and are projected the
    same way. Per-class values are means over samples; HD means skip
    sentinel (empty-mask) cases. ``classes`` narrows the scored classes.
    """
    annotated = scored_classes(partition)
    if classes is None:
        classes = annotated
    elif not set(classes) <= set(annotated):
        raise ValueError(f"classes {list(classes)} are not all annotated by this dataset")
    report = MetricsReport()
    dice_acc = {c: [] for c in classes}
    hd_acc = {c: [] for c in classes}
    for i, (pred, gt) in enumerate(zip(predictions, ground_truths)):
        pred_m = project_labels(pred, partition)
        gt_m = project_labels(gt, partition)
        sid = sample_ids[i] if sample_ids is not None else str(i)
        for c in classes:
            m = int(partition.lookup[c])
            d = dice_coefficient(pred_m, gt_m, m)
            hd, flag = hausdorff_distance(pred_m, gt_m, m)
            dice_acc[c].append(d)
            if not flag:
                hd_acc[c].append(hd)
            report.rows.append(
                {"dataset_id": dataset_id, "sample_id": sid, "class": c, "dice": d, "hausdorff": hd, "hd_sentinel_flag": int(flag)}
            )
    for c in classes:
        report.per_class_dice[c] = float(np.mean(dice_acc[c])) if dice_acc[c] else float("nan")
        if hd_acc[c]:
            report.per_class_hausdorff[c] = float(np.mean(hd_acc[c]))
            report.hd_sentinel[c] = False
        else:
            report.per_class_hausdorff[c] = float("nan")
            report.hd_sentinel[c] = True
    return report


METRIC_FIELDS = ["dataset_id", "sample_id", "class", "dice", "hausdorff", "hd_sentinel_flag"]


def write_metric_rows(path, rows: Iterable[dict], header_lines: Sequence[str] = (), leading: Sequence[str] = ()) -> None:
    """Write metric rows as CSV under ``# `` provenance lines; ``leading``
    names extra columns (such as network and seed) placed first."""
    fields = [*leading, *METRIC_FIELDS]
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row[k]) for k in fields})


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6f}"
    return v
