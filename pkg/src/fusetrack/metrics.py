"""Evaluation metrics over predicted and ground-truth hand poses.

Geometry stays in meters internally; every public metric returns report
units (millimeters, degrees, or percent). The transformed (.T) variants
re-run forward kinematics on the predicted articulation under the
ground-truth wrist transform, isolating finger error from global pose
error, which is what makes them applicable to methods that cannot observe
wrist translation at all.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .skeleton import HandPose, HandSkeleton, N_DOF, forward_kinematics

PCK_THRESHOLDS_MM = np.arange(0.0, 51.0)
CDF_THRESHOLDS_DEG = np.arange(0.0, 30.5, 0.5)

# five interior fractions per bone; 20 bones x 5 = 100 capsule points
CAPSULE_FRACTIONS = np.array([0.1, 0.3, 0.5, 0.7, 0.9])

CAPSULE_NOTE = ("PA-MPVPE over 100 capsule points: 5 per bone at fixed "
                "fractions " + ",".join(f"{f:.1f}" for f in CAPSULE_FRACTIONS))


def mkpe(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean Euclidean keypoint error in millimeters."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if not (np.isfinite(pred).all() and np.isfinite(gt).all()):
        raise ValueError("non-finite keypoints")
    return float(np.linalg.norm(pred - gt, axis=-1).mean() * 1000.0)


def fingertip_mkpe(pred: np.ndarray, gt: np.ndarray,
                   fingertip_indices) -> float:
    """MKPE restricted to the fingertip landmarks."""
    idx = np.asarray(fingertip_indices, dtype=np.intp)
    if idx.size == 0 or idx.min() < 0 or idx.max() >= len(pred):
        raise ValueError(f"bad fingertip indices {fingertip_indices}")
    return mkpe(np.asarray(pred)[idx], np.asarray(gt)[idx])


def root_transform(pred_pose: HandPose, gt_pose: HandPose,
                   skeleton: HandSkeleton) -> np.ndarray:
    """Predicted landmarks with the ground-truth wrist transform swapped in."""
    pose = HandPose(pred_pose.angles, gt_pose.wrist_rotation,
                    gt_pose.wrist_translation)
    return forward_kinematics(skeleton, pose)


def pck_auc(pred: np.ndarray, gt: np.ndarray,
            thresholds_mm: np.ndarray = PCK_THRESHOLDS_MM) -> float:
    """Area under the fraction-of-keypoints-within-threshold curve.

    Trapezoid over the given millimeter thresholds, scaled to [0, 100].
    Errors of exactly zero count as correct at the 0 mm bin, so a perfect
    prediction scores 100 even with the closed comparison at threshold 0.
    """
    err = np.linalg.norm(np.asarray(pred) - np.asarray(gt), axis=-1) * 1000.0
    if err.size == 0:
        raise ValueError("empty keypoint set")
    frac = (err[None, :] <= thresholds_mm[:, None]).mean(axis=1)
    span = thresholds_mm[-1] - thresholds_mm[0]
    return float(np.trapezoid(frac, thresholds_mm) / span * 100.0)


def procrustes_align(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Similarity-align pred onto gt (rotation, translation, uniform scale).

    Closed-form orthogonal Procrustes on the centered cross-covariance, with
    the determinant sign corrected so the returned map is a proper rotation.
    Degenerate clouds (fewer than 3 points, or collinear) cannot pin down a
    rotation and raise.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise ValueError(f"expected matching (n, 3) sets, got {pred.shape}")
    if len(pred) < 3:
        raise ValueError("need at least 3 points to align")
    pc = pred - pred.mean(axis=0)
    gc = gt - gt.mean(axis=0)
    for cloud in (pc, gc):
        sing = np.linalg.svd(cloud, compute_uv=False)
        if sing[1] <= 1e-12 * max(sing[0], 1e-300):
            raise ValueError("degenerate point configuration (collinear)")
    U, S, Vt = np.linalg.svd(pc.T @ gc)
    d = np.sign(np.linalg.det(U @ Vt))
    D = np.diag([1.0, 1.0, d])
    R = (U @ D @ Vt).T
    scale = float((S * np.diag(D)).sum() / (pc ** 2).sum())
    return scale * pc @ R.T + gt.mean(axis=0)


def pa_mpjpe(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean per-point error in mm after Procrustes similarity alignment."""
    return mkpe(procrustes_align(pred, gt), gt)


def capsule_points(landmarks: np.ndarray, skeleton: HandSkeleton) -> np.ndarray:
    """Fixed 100-point mesh surrogate sampled along the bone segments."""
    lm = np.asarray(landmarks, dtype=np.float64)
    a = lm[[b[0] for b in skeleton.bones]]
    b = lm[[b[1] for b in skeleton.bones]]
    f = CAPSULE_FRACTIONS[None, :, None]
    return (a[:, None] * (1.0 - f) + b[:, None] * f).reshape(-1, 3)


def pa_mpvpe(pred_points: np.ndarray, gt_points: np.ndarray) -> float:
    """PA-MPJPE arithmetic applied to a sampled surface point set."""
    return pa_mpjpe(pred_points, gt_points)


def f_score(pred: np.ndarray, gt: np.ndarray, tau_mm: float) -> float:
    """Harmonic mean of symmetric nearest-neighbor coverage at tau."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if len(pred) == 0 or len(gt) == 0:
        raise ValueError("empty point set")
    d = np.linalg.norm(pred[:, None] - gt[None, :], axis=-1) * 1000.0
    precision = float((d.min(axis=1) <= tau_mm).mean())
    recall = float((d.min(axis=0) <= tau_mm).mean())
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def joint_angle_errors(pred_phi: np.ndarray, gt_phi: np.ndarray) -> np.ndarray:
    """Absolute per-DoF angle error in degrees, shape (22,)."""
    pred_phi = np.asarray(pred_phi, dtype=np.float64)
    gt_phi = np.asarray(gt_phi, dtype=np.float64)
    if pred_phi.shape != (N_DOF,) or gt_phi.shape != (N_DOF,):
        raise ValueError("expected 22-DoF angle vectors")
    return np.degrees(np.abs(pred_phi - gt_phi))


def error_cdf(errors, thresholds: np.ndarray = CDF_THRESHOLDS_DEG) -> np.ndarray:
    """Percent of errors at or below each threshold, shape like thresholds."""
    errors = np.asarray(errors, dtype=np.float64).ravel()
    if errors.size == 0:
        raise ValueError("empty error list")
    return (errors[None, :] <= np.asarray(thresholds)[:, None]).mean(axis=1) * 100.0


# ---------------------------------------------------------------------------
# Per-frame bundle and report assembly
# ---------------------------------------------------------------------------

WORLD_METRICS = ("MKPE", "F.MKPE", "PCK-AUC", "PA-MPJPE", "PA-MPVPE",
                 "F@5", "F@15")
ROOT_METRICS = ("MKPE.T", "F.MKPE.T", "PCK-AUC.T")


def frame_metrics(pred_pose: HandPose, gt_pose: HandPose,
                  skeleton: HandSkeleton,
                  translation_valid: bool = True) -> dict[str, float]:
    """All scalar metrics for one frame.

    When the method cannot observe wrist translation the world-frame
    metrics are meaningless and omitted; the transformed variants and the
    alignment-based ones survive.
    """
    pred_t = root_transform(pred_pose, gt_pose, skeleton)
    gt_lm = forward_kinematics(skeleton, gt_pose)
    out = {
        "MKPE.T": mkpe(pred_t, gt_lm),
        "F.MKPE.T": fingertip_mkpe(pred_t, gt_lm, skeleton.fingertips),
        "PCK-AUC.T": pck_auc(pred_t, gt_lm),
    }
    if translation_valid:
        pred_lm = forward_kinematics(skeleton, pred_pose)
        out["MKPE"] = mkpe(pred_lm, gt_lm)
        out["F.MKPE"] = fingertip_mkpe(pred_lm, gt_lm, skeleton.fingertips)
        out["PCK-AUC"] = pck_auc(pred_lm, gt_lm)
        out["PA-MPJPE"] = pa_mpjpe(pred_lm, gt_lm)
        out["PA-MPVPE"] = pa_mpvpe(capsule_points(pred_lm, skeleton),
                                   capsule_points(gt_lm, skeleton))
        out["F@5"] = f_score(pred_lm, gt_lm, 5.0)
        out["F@15"] = f_score(pred_lm, gt_lm, 15.0)
    else:
        out["PA-MPJPE"] = pa_mpjpe(pred_t, gt_lm)
        out["PA-MPVPE"] = pa_mpvpe(capsule_points(pred_t, skeleton),
                                   capsule_points(gt_lm, skeleton))
    return out


@dataclass
class MetricReport:
    """Per-sample metric table plus aggregates and the angle-error CDF."""
    columns: list[str]
    sample_ids: list[str]
    rows: np.ndarray             # (n_samples, n_columns)
    dof_degrees: np.ndarray      # (n_samples, 22) mean abs angle error
    cdf_thresholds: np.ndarray
    cdf_percent: np.ndarray
    notes: list[str] = field(default_factory=lambda: [CAPSULE_NOTE])

    @property
    def aggregate(self) -> dict[str, float]:
        return {c: float(self.rows[:, i].mean())
                for i, c in enumerate(self.columns)}

    def validate(self) -> None:
        if self.rows.shape != (len(self.sample_ids), len(self.columns)):
            raise ValueError("row table shape mismatch")
        for i, c in enumerate(self.columns):
            col = self.rows[:, i]
            if c.startswith("F@"):
                if col.min() < 0.0 or col.max() > 1.0:
                    raise ValueError(f"{c} outside [0, 1]")
            elif c.startswith("PCK"):
                if col.min() < 0.0 or col.max() > 100.0:
                    raise ValueError(f"{c} outside [0, 100]")
            elif col.min() < 0.0:
                raise ValueError(f"{c} has a negative distance")
        if self.dof_degrees.min() < 0.0:
            raise ValueError("negative angle error")


def build_report(sample_ids: list[str], per_sample: list[dict[str, float]],
                 dof_degrees: np.ndarray) -> MetricReport:
    """Assemble a report from per-sample metric dicts (all same keys)."""
    if not per_sample:
        raise ValueError("no samples to report")
    columns = list(per_sample[0].keys())
    for d in per_sample[1:]:
        if list(d.keys()) != columns:
            raise ValueError("inconsistent metric columns across samples")
    rows = np.array([[d[c] for c in columns] for d in per_sample])
    dof_degrees = np.asarray(dof_degrees, dtype=np.float64)
    report = MetricReport(
        columns=columns, sample_ids=list(sample_ids), rows=rows,
        dof_degrees=dof_degrees, cdf_thresholds=CDF_THRESHOLDS_DEG.copy(),
        cdf_percent=error_cdf(dof_degrees, CDF_THRESHOLDS_DEG))
    report.validate()
    return report


def write_report_csv(report: MetricReport, path: str | Path) -> None:
    """One row per sample, aggregate footer row, note lines up top."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        for note in report.notes:
            fh.write(f"# {note}\n")
        w = csv.writer(fh)
        w.writerow(["sample"] + report.columns)
        for sid, row in zip(report.sample_ids, report.rows):
            w.writerow([sid] + [f"{v:.6f}" for v in row])
        agg = report.aggregate
        w.writerow(["aggregate"] + [f"{agg[c]:.6f}" for c in report.columns])


def write_summary(report: MetricReport, path: str | Path) -> None:
    """Structured aggregate summary keyed by metric name."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "metrics": report.aggregate,
        "n_samples": len(report.sample_ids),
        "dof_degrees_mean": report.dof_degrees.mean(axis=0).tolist(),
        "cdf": {"thresholds_deg": report.cdf_thresholds.tolist(),
                "percent": report.cdf_percent.tolist()},
        "notes": report.notes,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
