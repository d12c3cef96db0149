"""Strapdown inertial measurement simulation.

Propagates exact rigid-body kinematics down the articulated chain: angular
velocity accumulates hinge-rate terms along each path from the wrist, linear
acceleration follows the transport theorem through every segment, and each
sensor reads body-frame angular rate and specific force. All derivatives are
analytic (spline + recursion), so zero-noise output is consistent with the
geometry to machine precision rather than to a finite-difference step.

Conventions: world gravity g = (0, 0, -9.81) m/s^2; a static accelerometer
therefore reads +9.81 along world +z expressed in its own frame. Gyro reads
the sensor's angular velocity in the sensor frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layout import SensorLayout
from .motion import MotionScript
from .rotations import axis_angle_matrix
from .skeleton import HandSkeleton

GRAVITY_WORLD = np.array([0.0, 0.0, -9.81])
IMU_RATE_HZ = 200.0


@dataclass(frozen=True)
class NoiseModel:
    """Native sensor noise floor. Sigmas are per-sample white noise except
    the gyro bias, which is drawn once per sequence and held constant."""
    gyro_sigma: float = 0.005       # rad/s
    accel_sigma: float = 0.05       # m/s^2
    gyro_bias_sigma: float = 0.002  # rad/s

    def scaled(self, k: float) -> "NoiseModel":
        return NoiseModel(self.gyro_sigma * k, self.accel_sigma * k,
                          self.gyro_bias_sigma * k)


@dataclass(frozen=True)
class ImuSample:
    timestamp: float
    sensor_id: int
    gyro: np.ndarray   # (3,) rad/s, sensor frame
    accel: np.ndarray  # (3,) m/s^2 specific force, sensor frame


@dataclass
class SegmentKinematics:
    """World-frame motion state of every segment at every sample time."""
    R: np.ndarray          # (N, J, 3, 3)
    t: np.ndarray          # (N, J, 3)
    v: np.ndarray          # (N, J, 3)
    a: np.ndarray          # (N, J, 3)
    omega: np.ndarray      # (N, J, 3)
    omega_dot: np.ndarray  # (N, J, 3)


def segment_kinematics(skeleton: HandSkeleton, script: MotionScript,
                       ts: np.ndarray) -> SegmentKinematics:
    """Exact velocity/acceleration recursion over the kinematic tree."""
    st = script.sample_state_arrays(ts)
    N, J = len(st["t"]), skeleton.n_joints
    R = np.empty((N, J, 3, 3))
    t = np.empty((N, J, 3))
    v = np.empty((N, J, 3))
    a = np.empty((N, J, 3))
    om = np.empty((N, J, 3))
    omd = np.empty((N, J, 3))
    phi, phid, phidd = st["angles"], st["angle_rates"], st["angle_accels"]
    for j in range(J):
        p = int(skeleton.parents[j])
        if p < 0:
            Rj = st["wrist_rotation"].copy()
            t[:, j] = st["wrist_translation"]
            v[:, j] = st["velocity"]
            a[:, j] = st["acceleration"]
            w = st["omega_world"].copy()
            wd = st["omega_dot_world"].copy()
        else:
            r = np.einsum("nxy,y->nx", R[:, p], skeleton.offsets[j])
            t[:, j] = t[:, p] + r
            v[:, j] = v[:, p] + np.cross(om[:, p], r)
            a[:, j] = (a[:, p] + np.cross(omd[:, p], r)
                       + np.cross(om[:, p], np.cross(om[:, p], r)))
            Rj = R[:, p] @ skeleton.rest_rots[j]
            w = om[:, p].copy()
            wd = omd[:, p].copy()
        for k in skeleton.joint_dofs[j]:
            d = skeleton.dofs[k]
            axis_w = np.einsum("nxy,y->nx", Rj, d.axis)
            # the hinge axis itself rotates with everything upstream of it
            wd = wd + np.cross(w, axis_w) * phid[:, k, None] + axis_w * phidd[:, k, None]
            w = w + axis_w * phid[:, k, None]
            Rj = Rj @ axis_angle_matrix(d.axis, phi[:, k])
        R[:, j] = Rj
        om[:, j] = w
        omd[:, j] = wd
    return SegmentKinematics(R, t, v, a, om, omd)


@dataclass
class SensorKinematics:
    """World-frame motion of every sensor frame at every sample time."""
    R: np.ndarray      # (N, S, 3, 3) world-from-sensor
    p: np.ndarray      # (N, S, 3)
    v: np.ndarray      # (N, S, 3)
    p_ddot: np.ndarray  # (N, S, 3) world acceleration of the sensor point
    omega: np.ndarray  # (N, S, 3) world angular velocity


def sensor_kinematics(skeleton: HandSkeleton, layout: SensorLayout,
                      script: MotionScript, ts: np.ndarray) -> SensorKinematics:
    seg = segment_kinematics(skeleton, script, ts)
    si = layout.segments
    r = np.einsum("nsxy,sy->nsx", seg.R[:, si], layout.offsets)
    p = seg.t[:, si] + r
    v = seg.v[:, si] + np.cross(seg.omega[:, si], r)
    pdd = (seg.a[:, si] + np.cross(seg.omega_dot[:, si], r)
           + np.cross(seg.omega[:, si], np.cross(seg.omega[:, si], r)))
    R = seg.R[:, si] @ layout.rotations
    return SensorKinematics(R, p, v, pdd, seg.omega[:, si])


def imu_clean(skeleton: HandSkeleton, layout: SensorLayout,
              script: MotionScript, ts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Noise-free body-frame readings: gyro (N, S, 3) and accel (N, S, 3)."""
    sk = sensor_kinematics(skeleton, layout, script, ts)
    gyro = np.einsum("nsxy,nsx->nsy", sk.R, sk.omega)
    accel = np.einsum("nsxy,nsx->nsy", sk.R, sk.p_ddot - GRAVITY_WORLD)
    return gyro, accel


def apply_imu_noise(gyro: np.ndarray, accel: np.ndarray, noise: NoiseModel,
                    rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Additive white noise plus a constant per-sensor gyro bias. Draw order
    is fixed (bias, gyro noise, accel noise) so streams are reproducible."""
    n_sensors = gyro.shape[1]
    bias = rng.normal(0.0, noise.gyro_bias_sigma, (n_sensors, 3))
    g = gyro + bias[None] + rng.normal(0.0, noise.gyro_sigma, gyro.shape)
    a = accel + rng.normal(0.0, noise.accel_sigma, accel.shape)
    return g, a


def imu_sample_times(t0: float, t1: float, rate_hz: float = IMU_RATE_HZ) -> np.ndarray:
    """Sample grid t0, t0 + 1/rate, ... inclusive of the last point <= t1."""
    n = int(np.floor((t1 - t0) * rate_hz + 1e-9)) + 1
    return t0 + np.arange(n) / rate_hz


def simulate_imu(script: MotionScript, skeleton: HandSkeleton,
                 layout: SensorLayout, noise: NoiseModel | None,
                 seed: int | np.random.SeedSequence | None,
                 rate_hz: float = IMU_RATE_HZ) -> list[ImuSample]:
    """Full-sequence simulation as a flat, time-major sample list."""
    ts = imu_sample_times(script.t0, script.t1, rate_hz)
    gyro, accel = imu_clean(skeleton, layout, script, ts)
    if noise is not None:
        rng = np.random.default_rng(seed)
        gyro, accel = apply_imu_noise(gyro, accel, noise, rng)
    return [ImuSample(float(t), s, gyro[i, s].copy(), accel[i, s].copy())
            for i, t in enumerate(ts) for s in range(layout.n_sensors)]
