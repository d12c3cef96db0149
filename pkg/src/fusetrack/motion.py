"""Smooth hand motion scripts.

A script is a sequence of timed keyframe poses. Joint angles and wrist
translation follow natural cubic splines; wrist rotation follows piecewise
spherical-linear interpolation, which keeps world angular velocity constant
within each segment. Derivatives come from the interpolants analytically, so
downstream inertial simulation sees no finite-difference noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline

from .rotations import matrix_to_rotvec, rotvec_to_matrix
from .skeleton import HandPose, N_DOF


@dataclass
class KinematicSample:
    """Pose plus time derivatives at one instant, world frame."""
    t: float
    angles: np.ndarray        # (22,)
    angle_rates: np.ndarray   # (22,) rad/s
    angle_accels: np.ndarray  # (22,) rad/s^2
    wrist_rotation: np.ndarray     # (3, 3)
    omega_world: np.ndarray        # (3,) rad/s
    omega_dot_world: np.ndarray    # (3,) rad/s^2, zero inside slerp segments
    wrist_translation: np.ndarray  # (3,)
    velocity: np.ndarray           # (3,) m/s
    acceleration: np.ndarray       # (3,) m/s^2

    def pose(self) -> HandPose:
        return HandPose(self.angles, self.wrist_rotation, self.wrist_translation)


class MotionScript:
    """Interpolated trajectory through keyframe poses."""

    def __init__(self, times: np.ndarray, poses: list[HandPose]):
        times = np.asarray(times, dtype=np.float64)
        if times.ndim != 1 or len(times) < 2:
            raise ValueError("need at least 2 keyframes")
        if len(times) != len(poses):
            raise ValueError("times and poses length mismatch")
        if not np.all(np.diff(times) > 0):
            raise ValueError("keyframe times must be strictly increasing")
        for p in poses:
            p.validate()
        self.times = times
        self.keyframe_angles = np.stack([np.asarray(p.angles, dtype=np.float64)
                                         for p in poses])
        self.keyframe_rots = np.stack([np.asarray(p.wrist_rotation, dtype=np.float64)
                                       for p in poses])
        self.keyframe_trans = np.stack([np.asarray(p.wrist_translation, dtype=np.float64)
                                        for p in poses])
        self._ang = CubicSpline(times, self.keyframe_angles, axis=0, bc_type="natural")
        self._ang_d1 = self._ang.derivative(1)
        self._ang_d2 = self._ang.derivative(2)
        self._trn = CubicSpline(times, self.keyframe_trans, axis=0, bc_type="natural")
        self._trn_d1 = self._trn.derivative(1)
        self._trn_d2 = self._trn.derivative(2)
        # per-segment rotation increments for slerp
        dts = np.diff(times)
        rels = np.stack([matrix_to_rotvec(self.keyframe_rots[i + 1] @ self.keyframe_rots[i].T)
                         for i in range(len(times) - 1)])
        self.segment_rotvecs = rels
        self.segment_omegas = rels / dts[:, None]

    @property
    def duration(self) -> float:
        return float(self.times[-1] - self.times[0])

    @property
    def t0(self) -> float:
        return float(self.times[0])

    @property
    def t1(self) -> float:
        return float(self.times[-1])

    def _check_range(self, ts: np.ndarray) -> np.ndarray:
        ts = np.atleast_1d(np.asarray(ts, dtype=np.float64))
        if ts.min() < self.times[0] - 1e-9 or ts.max() > self.times[-1] + 1e-9:
            raise ValueError(
                f"sample time outside script range [{self.times[0]}, {self.times[-1]}]")
        return np.clip(ts, self.times[0], self.times[-1])

    def _segments(self, ts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        idx = np.searchsorted(self.times, ts, side="right") - 1
        idx = np.clip(idx, 0, len(self.times) - 2)
        u = (ts - self.times[idx]) / (self.times[idx + 1] - self.times[idx])
        return idx, u

    def sample_rotations(self, ts) -> np.ndarray:
        ts = self._check_range(ts)
        idx, u = self._segments(ts)
        steps = rotvec_to_matrix(u[:, None] * self.segment_rotvecs[idx])
        return steps @ self.keyframe_rots[idx]

    def sample_pose(self, t: float) -> HandPose:
        ts = self._check_range(t)
        return HandPose(self._ang(ts)[0], self.sample_rotations(ts)[0], self._trn(ts)[0])

    def sample_states(self, ts) -> list[KinematicSample]:
        ts = self._check_range(ts)
        idx, _ = self._segments(ts)
        ang, d1, d2 = self._ang(ts), self._ang_d1(ts), self._ang_d2(ts)
        trn, vel, acc = self._trn(ts), self._trn_d1(ts), self._trn_d2(ts)
        rots = self.sample_rotations(ts)
        omg = self.segment_omegas[idx]
        zero = np.zeros(3)
        return [KinematicSample(float(t), ang[i], d1[i], d2[i], rots[i],
                                omg[i], zero, trn[i], vel[i], acc[i])
                for i, t in enumerate(ts)]

    def sample_state_arrays(self, ts) -> dict[str, np.ndarray]:
        """Batched variant of sample_states keyed by field name."""
        ts = self._check_range(ts)
        idx, _ = self._segments(ts)
        return {
            "t": ts,
            "angles": self._ang(ts),
            "angle_rates": self._ang_d1(ts),
            "angle_accels": self._ang_d2(ts),
            "wrist_rotation": self.sample_rotations(ts),
            "omega_world": self.segment_omegas[idx],
            "omega_dot_world": np.zeros((len(ts), 3)),
            "wrist_translation": self._trn(ts),
            "velocity": self._trn_d1(ts),
            "acceleration": self._trn_d2(ts),
        }


def constant_script(pose: HandPose, duration: float) -> MotionScript:
    """A script that holds one pose; handy for statics tests."""
    return MotionScript(np.array([0.0, duration]), [pose, pose])
