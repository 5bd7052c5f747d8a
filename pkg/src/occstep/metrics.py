"""Forecasting (mIoU / IoU) and planning (L2 / L1) metrics."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .geometry import PlanarMotion, wrap_angle
from .grid import IGNORE, SemanticOccGrid


def _labels(x) -> np.ndarray:
    return x.labels if isinstance(x, SemanticOccGrid) else np.asarray(x)


@dataclass
class ConfusionTally:
    num_classes: int
    intersection: np.ndarray = field(default=None)
    pred_count: np.ndarray = field(default=None)
    target_count: np.ndarray = field(default=None)
    ignored: int = 0
    # binary occupied-vs-empty counts
    occ_inter: int = 0
    occ_pred: int = 0
    occ_target: int = 0

    def __post_init__(self):
        K = self.num_classes
        for name in ("intersection", "pred_count", "target_count"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(K, dtype=np.int64))

    def merge(self, other: "ConfusionTally") -> "ConfusionTally":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge tallies with different class counts")
        return ConfusionTally(
            self.num_classes,
            self.intersection + other.intersection,
            self.pred_count + other.pred_count,
            self.target_count + other.target_count,
            self.ignored + other.ignored,
            self.occ_inter + other.occ_inter,
            self.occ_pred + other.occ_pred,
            self.occ_target + other.occ_target,
        )

    def class_iou(self) -> np.ndarray:
        """Per-class IoU in [0, 1]; NaN where the class is absent from both sides."""
        union = self.pred_count + self.target_count - self.intersection
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(union > 0, self.intersection / np.maximum(union, 1), np.nan)


def accumulate(tally: ConfusionTally, pred, gt) -> ConfusionTally:
    """Add one frame to ``tally`` in place (and return it).  gt == -1 is skipped."""
    p, g = _labels(pred), _labels(gt)
    if p.shape != g.shape:
        raise ValueError(f"pred shape {p.shape} != gt shape {g.shape}")
    keep = g != IGNORE
    p, g = p[keep], g[keep]
    K = tally.num_classes
    if p.size and (p.min() < 0 or p.max() >= K):
        raise ValueError("prediction labels outside [0, K)")
    tally.ignored += int((~keep).sum())
    tally.pred_count += np.bincount(p, minlength=K)[:K]
    tally.target_count += np.bincount(g, minlength=K)[:K]
    tally.intersection += np.bincount(g[p == g], minlength=K)[:K]
    po, go = p > 0, g > 0
    tally.occ_inter += int((po & go).sum())
    tally.occ_pred += int(po.sum())
    tally.occ_target += int(go.sum())
    return tally


def miou(tally: ConfusionTally) -> float:
    """Mean IoU (percent) over classes 1..K-1, skipping classes absent from pred and gt."""
    ious = tally.class_iou()[1:]
    ious = ious[~np.isnan(ious)]
    if ious.size == 0:
        return math.nan
    return float(100.0 * ious.mean())


def iou(tally: ConfusionTally) -> float:
    """Binary occupied IoU (percent); NaN (with a warning) when gt has no occupied voxel."""
    if tally.occ_target == 0:
        warnings.warn("IoU undefined: ground truth has no occupied voxels", RuntimeWarning)
        return math.nan
    union = tally.occ_pred + tally.occ_target - tally.occ_inter
    return float(100.0 * tally.occ_inter / union)


def _as_array(motions) -> np.ndarray:
    return np.array([m.as_array() if isinstance(m, PlanarMotion) else np.asarray(m, float)
                     for m in motions], dtype=np.float64).reshape(-1, 3)


def integrate(motions) -> np.ndarray:
    """Accumulate planar increments into (x, y, yaw) poses in the start frame."""
    out = np.zeros((len(motions), 3))
    x = y = psi = 0.0
    for i, (dx, dy, dpsi) in enumerate(_as_array(motions)):
        c, s = math.cos(psi), math.sin(psi)
        x, y = x + c * dx - s * dy, y + s * dx + c * dy
        psi = psi + dpsi
        out[i] = (x, y, psi)
    return out


def _plan_arrays(pred, gt, cumulative):
    if len(pred) != len(gt):
        raise ValueError(f"trajectory lengths differ: {len(pred)} vs {len(gt)}")
    if cumulative:
        return integrate(pred), integrate(gt)
    return _as_array(pred), _as_array(gt)


def plan_l2(pred, gt, cumulative: bool = True) -> float:
    """Mean position error (m) over the horizon."""
    if not len(pred):
        return 0.0
    a, b = _plan_arrays(pred, gt, cumulative)
    return float(np.mean(np.hypot(a[:, 0] - b[:, 0], a[:, 1] - b[:, 1])))


def plan_l1_yaw(pred, gt, cumulative: bool = True) -> float:
    """Mean absolute wrapped yaw error (rad) over the horizon."""
    if not len(pred):
        return 0.0
    a, b = _plan_arrays(pred, gt, cumulative)
    return float(np.mean(np.abs(wrap_angle(a[:, 2] - b[:, 2]))))


def horizon_average(per_second_scores) -> float:
    scores = list(per_second_scores)
    if not scores:
        raise ValueError("need at least one horizon bucket")
    return float(np.mean(scores))


def horizon_scores(preds, gts, num_classes, frames_per_second=2):
    """Cumulative per-second mIoU and IoU: bucket s covers frames up to s seconds.

    Returns (miou_per_second, iou_per_second).  A trailing partial second gets
    its own bucket.
    """
    if len(preds) != len(gts):
        raise ValueError("prediction and target horizons differ")
    n_sec = -(-len(preds) // frames_per_second)
    m, i = [], []
    for s in range(1, n_sec + 1):
        tally = ConfusionTally(num_classes)
        for p, g in zip(preds[: s * frames_per_second], gts[: s * frames_per_second]):
            accumulate(tally, p, g)
        m.append(miou(tally))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            i.append(iou(tally))
    return m, i


TABLE_COLUMNS = ("regime", "method", "mIoU", "IoU", "L2", "L1")


def format_table(rows: list[dict]) -> str:
    """CSV text with the fixed column order regime,method,mIoU,IoU,L2,L1."""
    lines = [",".join(TABLE_COLUMNS)]
    for r in rows:
        cells = []
        for c in TABLE_COLUMNS:
            v = r.get(c, "")
            cells.append(f"{v:.4f}" if isinstance(v, float) else str(v))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"
