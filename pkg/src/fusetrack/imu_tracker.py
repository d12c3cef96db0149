"""Orientation-only inertial tracking baseline.

Each sensor's gyro integrates to a world orientation (trapezoid rule on the
sampled rates), with the tilt pulled gently toward the accelerometer
direction whenever the specific force looks like plain gravity. Joint angles
are then read off relative segment orientations. A distal sensor pair sees
only the sum of the flexions between its mounts, so those sums are split
with the same fixed ratios the motion generator applies, making the split
exact on generator data: DIP from PIP for the four fingers, thumb MCP from
CMC flexion for the thumb.

Six-axis sensors observe no translation. The wrist position is reported as
zero and the result is flagged translation-invalid, which restricts this
method to root-relative metrics downstream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import DIP_FROM_PIP, THUMB_MCP_FROM_CMC
from .ekf import TrackResult
from .layout import SensorLayout, finger_sensor_chains
from .pipeline import GRAVITY_MAG, align_frame
from .rotations import rotvec_to_matrix
from .skeleton import N_DOF, HandPose, HandSkeleton, segment_frames

WORLD_UP = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class ImuTrackerConfig:
    blend: float = 5e-4            # per-sample tilt pull toward measured up
    gravity_gate: float = 0.25     # m/s^2 band around g where blending runs
    split_distal: float = DIP_FROM_PIP
    split_thumb: float = THUMB_MCP_FROM_CMC


def _solve_z_then_x(M: np.ndarray) -> tuple[float, float]:
    """Angles (a, u) of M = Rz(a) @ Rx(-u)."""
    return (float(np.arctan2(M[1, 0], M[0, 0])),
            float(np.arctan2(-M[2, 1], M[2, 2])))


def _solve_x(M: np.ndarray) -> float:
    """Angle u of M = Rx(-u)."""
    return float(np.arctan2(M[1, 2], M[1, 1]))


def _solve_x_then_z(M: np.ndarray) -> tuple[float, float]:
    """Angles (f, d) of M = Rx(-f) @ Rz(d)."""
    return (float(np.arctan2(M[1, 2], M[2, 2])),
            float(np.arctan2(-M[0, 1], M[0, 0])))


def _split_flexions(total: float, dofs: list[int], ratio: float,
                    phi: np.ndarray) -> None:
    """Distribute a summed flexion over one or two DoFs; the second DoF is
    coupled to the first by the fixed ratio."""
    if len(dofs) == 1:
        phi[dofs[0]] = total
    else:
        first = total / (1.0 + ratio)
        phi[dofs[0]] = first
        phi[dofs[1]] = total - first


def extract_joint_angles(sensor_R: np.ndarray, layout: SensorLayout,
                         skeleton: HandSkeleton,
                         cfg: ImuTrackerConfig | None = None
                         ) -> tuple[np.ndarray, np.ndarray]:
    """Joint angles and wrist rotation from world sensor orientations.

    sensor_R is (S, 3, 3) world-from-sensor. Assumes the packaged axis
    conventions: flexion about local -x, abduction about local +z, with the
    finger base node's rest rotation ahead of its DoFs.
    """
    cfg = cfg or ImuTrackerConfig()
    seg_R = sensor_R @ np.transpose(layout.rotations, (0, 2, 1))
    records = finger_sensor_chains(skeleton, layout)
    palm_node = skeleton.dofs[0].joint
    root_sensor = int(np.flatnonzero(layout.segments == 0)[0])
    palm_sensor = int(np.flatnonzero(layout.segments == palm_node)[0])
    R_root = seg_R[root_sensor]
    R_palm = seg_R[palm_sensor]

    phi = np.zeros(N_DOF)
    flex0, dev = _solve_x_then_z(R_root.T @ R_palm)
    phi[0], phi[1] = flex0, dev
    for rec in records:
        M = skeleton.rest_rots[rec["base"]].T @ R_palm.T @ seg_R[rec["prox"]]
        a, u = _solve_z_then_x(M)
        phi[rec["abd"]] = a
        _split_flexions(u, rec["prox_flex"], cfg.split_thumb, phi)
        v = _solve_x(seg_R[rec["prox"]].T @ seg_R[rec["dist"]])
        _split_flexions(v, rec["dist_flex"], cfg.split_distal, phi)
    return phi, R_root


def imu_only_tracker(seq, layout: SensorLayout, skeleton: HandSkeleton,
                     initial_pose: HandPose | None,
                     cfg: ImuTrackerConfig | None = None) -> TrackResult:
    """Track one capture sequence from its inertial streams alone.

    initial_pose calibrates every sensor's starting orientation; poses are
    extracted at the IMU sample nearest each camera frame.
    """
    if initial_pose is None:
        raise ValueError("imu_only_tracker needs a calibrated initial pose")
    cfg = cfg or ImuTrackerConfig()
    seg_R0, _ = segment_frames(skeleton, initial_pose)
    R_ws = (seg_R0[layout.segments] @ layout.rotations).copy()

    frames_at: dict[int, list[int]] = {}
    for f, t in enumerate(seq.frame_ts):
        frames_at.setdefault(align_frame(t, seq.imu_ts), []).append(f)

    poses: list[HandPose] = [None] * len(seq.frame_ts)

    def emit(indices):
        phi, wrist_R = extract_joint_angles(R_ws, layout, skeleton, cfg)
        pose = HandPose(skeleton.clamp_angles(phi), wrist_R, np.zeros(3))
        for f in indices:
            poses[f] = pose

    emit(frames_at.get(0, ()))
    gyro, accel, ts = seq.imu_gyro, seq.imu_accel, seq.imu_ts
    for i in range(1, len(ts)):
        dt = float(ts[i] - ts[i - 1])
        rv = 0.5 * (gyro[i - 1] + gyro[i]) * dt
        for s in range(layout.n_sensors):
            R = R_ws[s] @ rotvec_to_matrix(rv[s])
            f_meas = accel[i, s]
            norm = np.linalg.norm(f_meas)
            if abs(norm - GRAVITY_MAG) < cfg.gravity_gate and norm > 0:
                u_meas = f_meas / norm
                u_pred = R.T @ WORLD_UP
                R = R @ rotvec_to_matrix(cfg.blend * np.cross(u_meas, u_pred))
            R_ws[s] = R
        if i in frames_at:
            emit(frames_at[i])
    return TrackResult("imu", seq.frame_ts.copy(), poses,
                       translation_valid=False)
