"""Evaluation metrics: NME with two normalizers, pose MAE, yaw binning.

NME is the mean per-point Euclidean distance divided by a normalizer:
either sqrt(h*w) of the ground-truth bounding box in the image plane, or
the ground-truth outer interocular distance. Pose MAE is the per-axis mean
absolute Euler-angle difference in degrees; differences are wrapped into
[0, 180] so 359 vs 1 degrees counts as 2.

The gimbal fix filter reproduces the reporting convention for Euler
decompositions near |yaw| = 90: samples whose pitch or roll error exceeds
20 degrees while the yaw error stays under 5 degrees are considered
conversion artifacts and dropped.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

YAW_BINS = (("0-30", 0.0, 30.0), ("30-60", 30.0, 60.0), ("60-90", 60.0, np.inf))


class MetricInputError(ValueError):
    """Metric undefined for this input (zero-area bbox, zero interocular)."""


@dataclass
class MetricSample:
    """One evaluation sample: point sets and optional pose angles (degrees)."""

    pred_points: np.ndarray
    gt_points: np.ndarray
    pred_angles: np.ndarray | None = None
    gt_angles: np.ndarray | None = None

    def __post_init__(self):
        self.pred_points = np.asarray(self.pred_points, dtype=np.float64)
        self.gt_points = np.asarray(self.gt_points, dtype=np.float64)
        if self.pred_points.shape != self.gt_points.shape:
            raise ValueError("prediction and ground truth point sets must conform")
        for name in ("pred_angles", "gt_angles"):
            val = getattr(self, name)
            if val is not None:
                arr = np.asarray(val, dtype=np.float64).reshape(3)
                if not np.isfinite(arr).all():
                    raise ValueError(f"{name} must be finite")
                setattr(self, name, arr)


def nme_bbox(pred: np.ndarray, gt: np.ndarray, dims: int = 2) -> float:
    """Mean point distance over sqrt(h*w) of the ground-truth image bbox.

    ``dims`` selects 2D (x, y) or 3D distances; the bounding box is always
    taken over the ground-truth x and y coordinates.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if dims not in (2, 3):
        raise ValueError(f"dims must be 2 or 3, got {dims}")
    if pred.shape != gt.shape or pred.shape[1] < dims:
        raise ValueError("point arrays must conform and carry enough coordinates")
    extent = gt[:, :2].max(axis=0) - gt[:, :2].min(axis=0)
    area = extent[0] * extent[1]
    if area <= 0:
        raise MetricInputError("ground-truth bounding box has zero area")
    distances = np.linalg.norm(pred[:, :dims] - gt[:, :dims], axis=1)
    return float(distances.mean() / np.sqrt(area))


def nme_interocular(
    pred: np.ndarray, gt: np.ndarray, left_outer_idx: int, right_outer_idx: int
) -> float:
    """Mean 3D point distance over the gt outer interocular distance."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError("point arrays must conform")
    interocular = np.linalg.norm(gt[left_outer_idx] - gt[right_outer_idx])
    if interocular <= 0:
        raise MetricInputError("zero interocular distance")
    return float(np.linalg.norm(pred - gt, axis=1).mean() / interocular)


def angle_errors(pred_angles: np.ndarray, gt_angles: np.ndarray) -> np.ndarray:
    """Absolute per-axis angle differences wrapped into [0, 180] degrees."""
    diff = np.asarray(pred_angles, dtype=np.float64) - np.asarray(gt_angles, dtype=np.float64)
    wrapped = np.mod(np.abs(diff), 360.0)
    return np.minimum(wrapped, 360.0 - wrapped)


def mae_pose(
    pred_angles: np.ndarray, gt_angles: np.ndarray
) -> tuple[np.ndarray, float]:
    """Per-axis MAE of (yaw, pitch, roll) lists plus the mean of the three."""
    pred_angles = np.asarray(pred_angles, dtype=np.float64).reshape(-1, 3)
    gt_angles = np.asarray(gt_angles, dtype=np.float64).reshape(-1, 3)
    if len(pred_angles) != len(gt_angles):
        raise ValueError("angle lists must have equal length")
    per_axis = angle_errors(pred_angles, gt_angles).mean(axis=0)
    return per_axis, float(per_axis.mean())


def gimbal_fix_filter(errors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Partition per-sample (yaw, pitch, roll) errors into kept and dropped.

    Dropped: (pitch error > 20 or roll error > 20) and yaw error < 5.
    Returns (retained_indices, dropped_indices).
    """
    errors = np.asarray(errors, dtype=np.float64).reshape(-1, 3)
    drop = ((errors[:, 1] > 20.0) | (errors[:, 2] > 20.0)) & (errors[:, 0] < 5.0)
    indices = np.arange(len(errors))
    return indices[~drop], indices[drop]


@dataclass
class BinnedReport:
    """Per-yaw-bin NME means, the balanced-subset mean, and the overall mean."""

    bins: dict = field(default_factory=dict)          # label -> (mean, count)
    balanced: tuple | None = None                     # (mean, count) or None
    mean: tuple = (float("nan"), 0)
    notices: list = field(default_factory=list)


def yaw_binned_report(nmes: np.ndarray, gt_yaws: np.ndarray, seed: int = 0) -> BinnedReport:
    """Bin per-sample NMEs by absolute ground-truth yaw.

    Bins are [0, 30), [30, 60), [60, inf) degrees of |yaw| (the top bin
    absorbs beyond-90 poses so the bins partition the input). The balanced
    subset draws min-bin-count samples per non-empty bin without
    replacement, seeded; it is skipped with a notice when any bin is empty.
    """
    nmes = np.asarray(nmes, dtype=np.float64).reshape(-1)
    gt_yaws = np.abs(np.asarray(gt_yaws, dtype=np.float64).reshape(-1))
    if nmes.shape != gt_yaws.shape:
        raise ValueError("one yaw per NME sample required")
    report = BinnedReport()
    if len(nmes) == 0:
        return report
    members = {}
    for label, lo, hi in YAW_BINS:
        idx = np.nonzero((gt_yaws >= lo) & (gt_yaws < hi))[0]
        if idx.size:
            members[label] = idx
            report.bins[label] = (float(nmes[idx].mean()), int(idx.size))
        else:
            report.notices.append(f"bin {label} is empty")
    report.mean = (float(nmes.mean()), int(len(nmes)))
    if len(members) == len(YAW_BINS):
        take = min(len(idx) for idx in members.values())
        rng = np.random.Generator(np.random.Philox(key=seed))
        chosen = np.concatenate(
            [rng.choice(idx, size=take, replace=False) for _, idx in sorted(members.items())]
        )
        report.balanced = (float(nmes[chosen].mean()), int(chosen.size))
    else:
        report.notices.append("balanced subset skipped: empty bin")
    return report


def samples_report(
    samples: list,
    normalizer: str = "bbox",
    dims: int = 2,
    left_outer_idx: int = 36,
    right_outer_idx: int = 45,
    seed: int = 0,
) -> tuple[BinnedReport, tuple[np.ndarray, float] | None]:
    """Aggregate MetricSamples into a binned NME report and, when every
    sample carries both angle triples, the pose MAE."""
    if not samples:
        return BinnedReport(), None
    nmes = []
    for sample in samples:
        if normalizer == "interocular":
            nmes.append(nme_interocular(sample.pred_points, sample.gt_points,
                                        left_outer_idx, right_outer_idx))
        else:
            nmes.append(nme_bbox(sample.pred_points, sample.gt_points, dims=dims))
    nmes = np.array(nmes)
    have_gt = all(s.gt_angles is not None for s in samples)
    if have_gt:
        gt_yaws = np.array([s.gt_angles[0] for s in samples])
        report = yaw_binned_report(nmes, gt_yaws, seed=seed)
    else:
        report = BinnedReport(mean=(float(nmes.mean()), int(nmes.size)))
    mae = None
    if have_gt and all(s.pred_angles is not None for s in samples):
        mae = mae_pose(np.stack([s.pred_angles for s in samples]),
                       np.stack([s.gt_angles for s in samples]))
    return report, mae


def report_to_text(
    report: BinnedReport | None = None,
    mae: tuple[np.ndarray, float] | None = None,
    mae_count: int = 0,
    dropped: int | None = None,
    total: int | None = None,
) -> str:
    """Render ``metric bin value count`` records, one per line."""
    lines = []
    if report is not None:
        for label, _, _ in YAW_BINS:
            if label in report.bins:
                value, count = report.bins[label]
                lines.append(f"nme {label} {value:.17g} {count}")
        if report.balanced is not None:
            value, count = report.balanced
            lines.append(f"nme balanced {value:.17g} {count}")
        if report.mean[1]:
            lines.append(f"nme mean {report.mean[0]:.17g} {report.mean[1]}")
    if mae is not None:
        per_axis, mean = mae
        for axis, value in zip(("yaw", "pitch", "roll"), per_axis):
            lines.append(f"mae {axis} {value:.17g} {mae_count}")
        lines.append(f"mae mean {mean:.17g} {mae_count}")
    if dropped is not None and total is not None:
        lines.append(f"filter dropped {dropped} {total}")
    return "\n".join(lines) + ("\n" if lines else "")
