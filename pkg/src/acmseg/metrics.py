"""Overlap, coverage and boundary metrics for binary segmentations."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

_EIGHT = np.ones((3, 3), dtype=bool)
_FOUR = ndimage.generate_binary_structure(2, 1)


def _binary(a) -> np.ndarray:
    return np.asarray(a).astype(bool)


def dice(a, b) -> float:
    """``2|A & B| / (|A| + |B|)``; two empty masks score 1."""
    a, b = _binary(a), _binary(b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def iou(a, b) -> float:
    """``|A & B| / |A | B|``; two empty masks score 1."""
    a, b = _binary(a), _binary(b)
    union = int((a | b).sum())
    if union == 0:
        return 1.0
    return int((a & b).sum()) / union


def miou(pairs) -> float:
    """Mean of per-image IoU over ``(gt, pred)`` pairs."""
    scores = [iou(g, p) for g, p in pairs]
    return float(np.mean(scores)) if scores else float("nan")


def rmse(gt, pred) -> float:
    gt = np.asarray(gt, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    return float(np.sqrt(np.mean((gt - pred) ** 2)))


def connected_components(mask, connectivity: int = 8) -> tuple[np.ndarray, int]:
    """Label foreground components; returns ``(labels, count)`` with 0 as background."""
    if connectivity not in (4, 8):
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    structure = _EIGHT if connectivity == 8 else _FOUR
    labels, n = ndimage.label(_binary(mask), structure=structure)
    return labels, int(n)


def wcov(gt_instances, pred) -> float:
    """Area-weighted best-IoU coverage of ground-truth instances.

    ``gt_instances`` is a label map (0 = background) or a binary mask, in
    which case instances are its 8-connected components.  Predicted
    instances are the 8-connected components of ``pred``.
    """
    gt_instances = np.asarray(gt_instances)
    if gt_instances.dtype == bool or gt_instances.max(initial=0) <= 1:
        gt_labels, n_gt = connected_components(gt_instances)
    else:
        gt_labels, n_gt = gt_instances, int(gt_instances.max())
    pred_labels, n_pred = connected_components(pred)
    if n_gt == 0:
        return 1.0 if n_pred == 0 else 0.0
    areas = np.bincount(gt_labels.ravel(), minlength=n_gt + 1)[1:].astype(np.float64)
    # joint histogram of (gt, pred) labels gives every intersection at once
    joint = np.bincount(gt_labels.ravel() * (n_pred + 1) + pred_labels.ravel(),
                        minlength=(n_gt + 1) * (n_pred + 1)).reshape(n_gt + 1, n_pred + 1)
    inter = joint[1:, 1:].astype(np.float64)
    pred_areas = np.bincount(pred_labels.ravel(), minlength=n_pred + 1)[1:]
    union = areas[:, None] + pred_areas[None, :] - inter
    best = (inter / np.where(union > 0, union, 1)).max(axis=1) if n_pred else np.zeros(n_gt)
    return float((areas / areas.sum() * best).sum())


def boundary_pixels(mask) -> np.ndarray:
    """Foreground pixels with at least one background 4-neighbour (off-grid counts as background)."""
    m = _binary(mask)
    return m & ~ndimage.binary_erosion(m, structure=_FOUR, border_value=0)


def _matched_fraction(src: np.ndarray, dst: np.ndarray, theta: float) -> float:
    # exact integer squared distance from the nearest-feature indices
    _, (iy, ix) = ndimage.distance_transform_edt(~dst, return_indices=True)
    yy, xx = np.nonzero(src)
    d2 = (iy[yy, xx] - yy) ** 2 + (ix[yy, xx] - xx) ** 2
    return float(np.count_nonzero(d2 <= theta * theta)) / len(yy)


def boundf(gt, pred, theta: float = 2.0) -> float:
    """Boundary F-measure with matching tolerance ``theta`` pixels."""
    bg, bp = boundary_pixels(gt), boundary_pixels(pred)
    ng, np_ = int(bg.sum()), int(bp.sum())
    if ng == 0 and np_ == 0:
        return 1.0
    if ng == 0 or np_ == 0:
        return 0.0
    precision = _matched_fraction(bp, bg, theta)
    recall = _matched_fraction(bg, bp, theta)
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


METRIC_NAMES = ("dice", "iou", "wcov", "boundf", "rmse")


@dataclass
class MetricsReport:
    ids: list = field(default_factory=list)
    rows: list = field(default_factory=list)
    instance_counts: list = field(default_factory=list)

    def add(self, image_id: str, gt, pred, gt_instances=None, theta: float = 2.0):
        inst = gt if gt_instances is None else gt_instances
        row = {
            "dice": dice(gt, pred),
            "iou": iou(gt, pred),
            "wcov": wcov(inst, pred),
            "boundf": boundf(gt, pred, theta),
            "rmse": rmse(gt, pred),
        }
        self.ids.append(image_id)
        self.rows.append(row)
        self.instance_counts.append({"gt": connected_components(gt)[1],
                                     "pred": connected_components(pred)[1]})
        return row

    def aggregate(self) -> dict:
        if not self.rows:
            return {k: float("nan") for k in METRIC_NAMES} | {"count": 0}
        out = {k: float(np.mean([r[k] for r in self.rows])) for k in METRIC_NAMES}
        out["miou"] = out["iou"]
        out["count"] = len(self.rows)
        return out

    def write_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", *METRIC_NAMES, "gt_instances", "pred_instances"])
            for i, r, c in zip(self.ids, self.rows, self.instance_counts):
                w.writerow([i, *(repr(r[k]) for k in METRIC_NAMES), c["gt"], c["pred"]])

    def write_json(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.aggregate(), indent=1, sort_keys=True))


def evaluate(gts, preds, ids=None, gt_instances=None, theta: float = 2.0) -> MetricsReport:
    report = MetricsReport()
    ids = ids if ids is not None else [str(i) for i in range(len(gts))]
    insts = gt_instances if gt_instances is not None else [None] * len(gts)
    for i, g, p, inst in zip(ids, gts, preds, insts):
        report.add(i, g, p, inst, theta)
    return report
