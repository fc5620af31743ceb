"""Region/boundary scores, mIoU and PCK on label grids."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import binary_dilation, binary_erosion

_SQUARE = np.ones((3, 3), dtype=bool)


class LabelSetError(ValueError):
    """Predicted labels are not a subset of the ground-truth label set."""


@dataclass
class Metrics:
    J_m: float | None = None
    F_m: float | None = None
    JF_m: float | None = None
    mIoU: float | None = None
    pck: dict[float, float] = field(default_factory=dict)
    per_object: dict[int, tuple[float, float]] = field(default_factory=dict)

    def row(self) -> dict[str, float]:
        out = {}
        for key in ("J_m", "F_m", "JF_m", "mIoU"):
            val = getattr(self, key)
            if val is not None:
                out[key] = val
        for thr, val in sorted(self.pck.items()):
            out[f"PCK@{thr:g}"] = val
        return out


def jaccard(pred: np.ndarray, gt: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Mask cells with at least one 8-neighbour outside the mask (grid edges are not boundaries)."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~binary_erosion(mask, structure=_SQUARE, border_value=1)


def boundary_f(pred: np.ndarray, gt: np.ndarray, tolerance: int = 1) -> float:
    """Boundary F1 with matches allowed within ``tolerance`` cells (Chebyshev)."""
    bp = boundary(pred)
    bg = boundary(gt)
    np_, ng = bp.sum(), bg.sum()
    if np_ == 0 and ng == 0:
        return 1.0
    if np_ == 0 or ng == 0:
        return 0.0
    if tolerance > 0:
        dg = binary_dilation(bg, structure=_SQUARE, iterations=tolerance)
        dp = binary_dilation(bp, structure=_SQUARE, iterations=tolerance)
    else:
        dg, dp = bg, bp
    precision = (bp & dg).sum() / np_
    recall = (bg & dp).sum() / ng
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


def jaccard_and_boundary(pred, gt, tolerance: int = 1) -> Metrics:
    """Mean region Jaccard and boundary F over objects (frame mean first, then object mean)."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    objects = [int(v) for v in np.unique(gt) if v != 0]
    extra = set(int(v) for v in np.unique(pred)) - set(objects) - {0}
    if extra:
        raise LabelSetError(f"predicted labels {sorted(extra)} do not occur in the ground truth")
    if not objects:
        return Metrics(1.0, 1.0, 1.0)
    per_obj = {}
    for obj in objects:
        js = [jaccard(p == obj, g == obj) for p, g in zip(pred, gt)]
        fs = [boundary_f(p == obj, g == obj, tolerance) for p, g in zip(pred, gt)]
        per_obj[obj] = (float(np.mean(js)), float(np.mean(fs)))
    j_m = float(np.mean([v[0] for v in per_obj.values()]))
    f_m = float(np.mean([v[1] for v in per_obj.values()]))
    return Metrics(j_m, f_m, (j_m + f_m) / 2, per_object=per_obj)


def miou(pred, gt, classes=None) -> float:
    """Class IoU accumulated over all frames, averaged over classes present in ``gt``."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    classes = np.unique(gt) if classes is None else classes
    ious = []
    for c in classes:
        g = gt == c
        if not g.any():
            continue
        p = pred == c
        ious.append((p & g).sum() / (p | g).sum())
    if not ious:
        return 1.0
    return float(np.mean(ious))


def box_size(boxes: np.ndarray) -> np.ndarray:
    """(height, width) of inclusive ``(y0, x0, y1, x1)`` pixel boxes."""
    boxes = np.asarray(boxes, dtype=np.float64)
    return np.stack([boxes[..., 2] - boxes[..., 0] + 1, boxes[..., 3] - boxes[..., 1] + 1], axis=-1)


def pck(pred_kp, gt_kp, bbox, thresholds=(0.1, 0.2)) -> dict[float, float]:
    """Fraction of keypoints within ``thr * max(bbox_h, bbox_w)`` of the ground truth.

    ``bbox`` holds ``(height, width)`` per keypoint (or one pair for all).
    Keypoints with NaN ground truth are skipped.
    """
    pred_kp = np.asarray(pred_kp, dtype=np.float64).reshape(-1, 2)
    gt_kp = np.asarray(gt_kp, dtype=np.float64).reshape(-1, 2)
    if pred_kp.shape != gt_kp.shape:
        raise ValueError(f"keypoint lists differ: {pred_kp.shape} vs {gt_kp.shape}")
    sizes = np.broadcast_to(np.asarray(bbox, dtype=np.float64).reshape(-1, 2), gt_kp.shape)
    valid = ~np.isnan(gt_kp).any(-1) & ~np.isnan(sizes).any(-1)
    if not valid.any():
        return {float(t): float("nan") for t in thresholds}
    err = np.linalg.norm(pred_kp[valid] - gt_kp[valid], axis=-1)
    ref = sizes[valid].max(-1)
    return {float(t): float(np.mean(err <= t * ref)) for t in thresholds}
