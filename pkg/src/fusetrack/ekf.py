"""Post-hoc extended Kalman filter over the articulated hand state.

The filter fuses a world-landmark measurement stream (ground truth plus
noise as a stand-in, or a vision network's output) with per-sensor gyro
rates. The mean carries joint angles, joint rates, and the wrist rigid
transform with linear velocity; the covariance lives on the error state
[dphi, dphi_dot, dtheta, dtrans, dvel] with the wrist rotation error as a
world-frame tangent vector, 53 dimensions total.

The process model is constant velocity. Both the random-walk and the
white-acceleration parts of the process noise use their exact discretization,
so covariance propagation composes: predicting twice by dt equals one
predict of 2 dt to machine precision. Updates are Joseph-form and every
returned covariance is symmetrized.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import DIP_FROM_PIP, THUMB_MCP_FROM_CMC
from .layout import SensorLayout, finger_sensor_chains
from .pipeline import align_frame
from .rotations import (matrix_to_quat, quat_from_rotvec, quat_mul,
                        quat_normalize, quat_to_matrix, rotvec_to_matrix)
from .skeleton import (N_DOF, HandPose, HandSkeleton, fk_root_batch,
                       fk_world_batch)

# error-state layout
PHI = slice(0, N_DOF)
RATE = slice(N_DOF, 2 * N_DOF)
ROT = slice(2 * N_DOF, 2 * N_DOF + 3)
TRA = slice(2 * N_DOF + 3, 2 * N_DOF + 6)
VEL = slice(2 * N_DOF + 6, 2 * N_DOF + 9)
ERR_DIM = 2 * N_DOF + 9


@dataclass(frozen=True)
class EkfConfig:
    """Noise intensities and runner knobs.

    q_* are continuous-time intensities: *_walk terms grow the named block's
    variance linearly in dt, q_rate and q_vel drive the constant-velocity
    pairs as white accelerations. r_* are measurement sigmas, p0_* initial
    variances.
    """
    q_angle: float = 1e-4     # rad^2/s, angle random walk
    q_rate: float = 4e-2      # rad^2/s^3, white joint acceleration
    q_rot: float = 1e-5       # rad^2/s, wrist orientation random walk
    q_trans: float = 1e-8     # m^2/s, wrist translation random walk
    q_vel: float = 1e-2       # m^2/s^3, white linear acceleration
    r_landmark: float = 3e-3  # m per axis
    r_gyro: float = 1e-2      # rad/s per axis on differenced rates
    gate_sigma: float = 6.0   # per-landmark Mahalanobis gate
    p0_angle: float = 1e-2
    p0_rate: float = 1.0
    p0_rot: float = 1e-4
    p0_trans: float = 1e-6
    p0_vel: float = 1e-2
    fd_step: float = 1e-6
    vision_enabled: bool = True
    split_distal: float = DIP_FROM_PIP      # DIP angle per unit PIP angle
    split_thumb: float = THUMB_MCP_FROM_CMC  # thumb MCP per unit CMC flexion
    r_couple: float = 2e-3    # rad sigma on the soft split-ratio rows


@dataclass
class EkfState:
    phi: np.ndarray       # (22,)
    phi_dot: np.ndarray   # (22,)
    quat: np.ndarray      # (4,) unit, world from hand root, w first
    trans: np.ndarray     # (3,)
    vel: np.ndarray       # (3,)
    cov: np.ndarray       # (53, 53)

    def validate(self) -> None:
        if abs(np.linalg.norm(self.quat) - 1.0) > 1e-9:
            raise ValueError("quaternion drifted off unit norm")
        if self.cov.shape != (ERR_DIM, ERR_DIM):
            raise ValueError(f"covariance shape {self.cov.shape}")
        if np.abs(self.cov - self.cov.T).max() > 1e-9:
            raise ValueError("covariance not symmetric")


@dataclass
class TrackResult:
    """Per-frame pose estimates from one tracking method."""
    method: str
    frame_ts: np.ndarray
    poses: list
    translation_valid: bool = True
    diagnostics: dict = field(default_factory=dict)


def initial_state(pose: HandPose, cfg: EkfConfig) -> EkfState:
    """Filter state pinned to a calibrated pose with zero rates."""
    d = np.empty(ERR_DIM)
    d[PHI] = cfg.p0_angle
    d[RATE] = cfg.p0_rate
    d[ROT] = cfg.p0_rot
    d[TRA] = cfg.p0_trans
    d[VEL] = cfg.p0_vel
    return EkfState(
        phi=np.asarray(pose.angles, dtype=np.float64).copy(),
        phi_dot=np.zeros(N_DOF),
        quat=matrix_to_quat(np.asarray(pose.wrist_rotation)),
        trans=np.asarray(pose.wrist_translation, dtype=np.float64).copy(),
        vel=np.zeros(3),
        cov=np.diag(d),
    )


def _sym(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + P.T)


def coupling_pairs(skeleton: HandSkeleton, layout: SensorLayout,
                   cfg: EkfConfig) -> list[tuple[int, int, float]]:
    """(leader DoF, follower DoF, ratio) for every flexion pair no sensor
    separates. A finger's flexion axes are mutually parallel, so differenced
    gyro rates see each sensor-bracketed group only as a sum; the split
    inside a two-DoF group is unobservable to any orientation sensor."""
    pairs = []
    for rec in finger_sensor_chains(skeleton, layout):
        for dofs, ratio in ((rec["prox_flex"], cfg.split_thumb),
                            (rec["dist_flex"], cfg.split_distal)):
            if len(dofs) == 2:
                pairs.append((dofs[0], dofs[1], ratio))
    return pairs


def ekf_update_coupling(state: EkfState, pairs: list[tuple[int, int, float]],
                        cfg: EkfConfig) -> EkfState:
    """Soft split-ratio rows for the sensor-unresolvable flexion pairs.

    Zero-valued pseudo-measurements of follower - ratio * leader, on both
    the angles and the rates, let the filter place each within-pair sum the
    way the motion model couples the DoFs instead of leaving that direction
    to drift. The rows are exactly linear, so this is a plain Kalman update.
    """
    if not pairs:
        return state
    H = np.zeros((2 * len(pairs), ERR_DIM))
    innov = np.empty(2 * len(pairs))
    for j, (a, b, ratio) in enumerate(pairs):
        H[2 * j, b] = 1.0
        H[2 * j, a] = -ratio
        innov[2 * j] = ratio * state.phi[a] - state.phi[b]
        H[2 * j + 1, N_DOF + b] = 1.0
        H[2 * j + 1, N_DOF + a] = -ratio
        innov[2 * j + 1] = ratio * state.phi_dot[a] - state.phi_dot[b]
    Rm = cfg.r_couple ** 2 * np.eye(H.shape[0])
    dx, cov = kalman_step(state.cov, H, Rm, innov)
    return _apply_delta(state, dx, cov)


def process_noise(dt: float, cfg: EkfConfig) -> np.ndarray:
    """Exactly discretized process noise for one predict of length dt."""
    Q = np.zeros((ERR_DIM, ERR_DIM))
    k = np.arange(N_DOF)
    Q[k, k] = cfg.q_angle * dt + cfg.q_rate * dt ** 3 / 3.0
    Q[k, N_DOF + k] = Q[N_DOF + k, k] = cfg.q_rate * dt ** 2 / 2.0
    Q[N_DOF + k, N_DOF + k] = cfg.q_rate * dt
    r = np.arange(ROT.start, ROT.stop)
    Q[r, r] = cfg.q_rot * dt
    t = np.arange(TRA.start, TRA.stop)
    Q[t, t] = cfg.q_trans * dt + cfg.q_vel * dt ** 3 / 3.0
    Q[t, t + 3] = Q[t + 3, t] = cfg.q_vel * dt ** 2 / 2.0
    Q[t + 3, t + 3] = cfg.q_vel * dt
    return Q


def ekf_predict(state: EkfState, dt: float, cfg: EkfConfig,
                wrist_omega: np.ndarray | None = None) -> EkfState:
    """Constant-velocity propagation of mean and covariance.

    The wrist quaternion has no rate state of its own. By default it is held
    (pure constant-velocity model); when the measured base angular velocity
    is known, pass it as wrist_omega (world frame, rad/s) and the quaternion
    is propagated with it as a control input, the world-frame rotation error
    transported along.
    """
    if dt <= 0:
        raise ValueError(f"predict needs dt > 0, got {dt}")
    F = np.eye(ERR_DIM)
    F[PHI, RATE] = dt * np.eye(N_DOF)
    F[TRA, VEL] = dt * np.eye(3)
    quat = state.quat.copy()
    if wrist_omega is not None:
        inc = np.asarray(wrist_omega, dtype=np.float64) * dt
        quat = quat_normalize(quat_mul(quat_from_rotvec(inc), quat))
        F[ROT, ROT] = rotvec_to_matrix(inc)
    return replace(
        state,
        phi=state.phi + dt * state.phi_dot,
        phi_dot=state.phi_dot.copy(),
        trans=state.trans + dt * state.vel,
        vel=state.vel.copy(),
        quat=quat,
        cov=_sym(F @ state.cov @ F.T + process_noise(dt, cfg)),
    )


def kalman_step(P: np.ndarray, H: np.ndarray, R: np.ndarray,
                innovation: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One linear update in Joseph form: returns (state delta, new P)."""
    S = H @ P @ H.T + R
    K = np.linalg.solve(S, H @ P).T
    dx = K @ innovation
    A = np.eye(P.shape[0]) - K @ H
    return dx, _sym(A @ P @ A.T + K @ R @ K.T)


def _apply_delta(state: EkfState, dx: np.ndarray, cov: np.ndarray) -> EkfState:
    # rotation error is a world-frame tangent: left-multiply onto the mean
    quat = quat_normalize(quat_mul(quat_from_rotvec(dx[ROT]), state.quat))
    return EkfState(state.phi + dx[PHI], state.phi_dot + dx[RATE], quat,
                    state.trans + dx[TRA], state.vel + dx[VEL], cov)


# ---------------------------------------------------------------------------
# Vision update
# ---------------------------------------------------------------------------

def vision_jacobian(state: EkfState, skeleton: HandSkeleton,
                    vis_idx: np.ndarray, step: float) -> tuple[np.ndarray, np.ndarray]:
    """Predicted visible landmarks and their central-difference Jacobian.

    Angle columns perturb the FK input in one batched call. The root-frame
    landmarks do not depend on the wrist transform, so the rotation columns
    reuse the base FK under perturbed wrist rotations, and the translation
    columns are the exact central difference of t +/- step, an identity
    per landmark.
    """
    n = len(vis_idx)
    R = quat_to_matrix(state.quat)
    phis = np.tile(state.phi, (2 * N_DOF + 1, 1))
    for k in range(N_DOF):
        phis[2 * k, k] += step
        phis[2 * k + 1, k] -= step
    lm = fk_root_batch(skeleton, phis).landmarks[:, vis_idx]
    base = lm[-1]
    H = np.zeros((3 * n, ERR_DIM))
    for k in range(N_DOF):
        H[:, k] = ((lm[2 * k] - lm[2 * k + 1]) @ R.T).ravel() / (2 * step)
    rot_cols = np.empty((3 * n, 3))
    for i in range(3):
        rv = np.zeros(3)
        rv[i] = step
        dR = rotvec_to_matrix(rv) @ R - rotvec_to_matrix(-rv) @ R
        rot_cols[:, i] = (base @ dR.T).ravel() / (2 * step)
    H[:, ROT] = rot_cols
    H[:, TRA] = np.tile(np.eye(3), (n, 1))
    h0 = base @ R.T + state.trans
    return h0, H


def ekf_update_vision(state: EkfState, landmarks: np.ndarray,
                      visibility: np.ndarray, skeleton: HandSkeleton,
                      cfg: EkfConfig) -> EkfState:
    """Measurement update against visible world landmarks.

    Landmarks whose innovation exceeds the configured Mahalanobis gate are
    dropped for this update; a frame with nothing visible is a no-op.
    """
    vis_idx = np.flatnonzero(np.asarray(visibility, dtype=bool))
    if vis_idx.size == 0:
        return state
    h0, H = vision_jacobian(state, skeleton, vis_idx, cfg.fd_step)
    r = (np.asarray(landmarks, dtype=np.float64)[vis_idx] - h0).ravel()
    Rm = cfg.r_landmark ** 2 * np.eye(3 * vis_idx.size)
    S = H @ state.cov @ H.T + Rm
    keep_rows = []
    for j in range(vis_idx.size):
        rows = slice(3 * j, 3 * j + 3)
        m = r[rows] @ np.linalg.solve(S[rows, rows], r[rows])
        if m <= cfg.gate_sigma ** 2:
            keep_rows.extend(range(3 * j, 3 * j + 3))
    if not keep_rows:
        return state
    keep_rows = np.asarray(keep_rows)
    dx, cov = kalman_step(state.cov, H[keep_rows],
                          Rm[np.ix_(keep_rows, keep_rows)], r[keep_rows])
    return _apply_delta(state, dx, cov)


# ---------------------------------------------------------------------------
# Gyro update
# ---------------------------------------------------------------------------

def sensor_dof_mask(skeleton: HandSkeleton, layout: SensorLayout) -> np.ndarray:
    """(S, 22) float mask: DoF k rotates sensor s when its joint lies on the
    path from the root to the sensor's segment, that node included."""
    mask = np.zeros((layout.n_sensors, N_DOF))
    for s, seg in enumerate(layout.segments):
        j = int(seg)
        while j >= 0:
            for k in skeleton.joint_dofs[j]:
                mask[s, k] = 1.0
            j = int(skeleton.parents[j])
    return mask


def ekf_update_gyro(state: EkfState, gyro: np.ndarray, layout: SensorLayout,
                    skeleton: HandSkeleton, cfg: EkfConfig,
                    dof_mask: np.ndarray | None = None) -> EkfState:
    """Joint-rate update from gyro rates differenced against a base sensor.

    Each sensor's reading is rotated to the world frame with the current
    pose estimate; subtracting the least-articulated sensor (the wrist unit
    in the stock layout) cancels the unmodeled base angular velocity, and
    what remains is linear in the joint rates. The Jacobian is taken by
    central differences in phi_dot with the kinematics held fixed.
    """
    if dof_mask is None:
        dof_mask = sensor_dof_mask(skeleton, layout)
    ref = int(np.argmin(dof_mask.sum(axis=1)))
    res = fk_root_batch(skeleton, state.phi)
    Rq = quat_to_matrix(state.quat)
    axes_w = res.axes[0] @ Rq.T
    R_ws = (Rq @ res.seg_R[0])[layout.segments] @ layout.rotations
    w_world = np.einsum("sxy,sy->sx", R_ws, np.asarray(gyro, dtype=np.float64))
    others = [s for s in range(layout.n_sensors) if s != ref]
    dmask = dof_mask[others] - dof_mask[ref]

    def h(rates: np.ndarray) -> np.ndarray:
        return ((dmask * rates) @ axes_w).ravel()

    z = (w_world[others] - w_world[ref]).ravel()
    Hr = np.empty((z.size, N_DOF))
    step = cfg.fd_step
    for k in range(N_DOF):
        e = np.zeros(N_DOF)
        e[k] = step
        Hr[:, k] = (h(state.phi_dot + e) - h(state.phi_dot - e)) / (2 * step)
    H = np.zeros((z.size, ERR_DIM))
    H[:, RATE] = Hr
    Rm = cfg.r_gyro ** 2 * np.eye(z.size)
    dx, cov = kalman_step(state.cov, H, Rm, z - h(state.phi_dot))
    return _apply_delta(state, dx, cov)


# ---------------------------------------------------------------------------
# Sequence runner
# ---------------------------------------------------------------------------

def _emit(state: EkfState, skeleton: HandSkeleton) -> HandPose:
    return HandPose(skeleton.clamp_angles(state.phi),
                    quat_to_matrix(state.quat), state.trans.copy())


def run_ekf(seq, layout: SensorLayout, skeleton: HandSkeleton,
            cfg: EkfConfig | None = None, landmarks: np.ndarray | None = None,
            visibility: np.ndarray | None = None, landmark_sigma: float = 0.0,
            seed: int = 0, initial_pose: HandPose | None = None) -> TrackResult:
    """Filter one capture sequence and emit a pose per camera frame.

    The landmark stream defaults to ground-truth world landmarks, optionally
    perturbed with landmark_sigma noise; pass a (F, 21, 3) array to feed a
    vision network's output instead. The filter is calibrated to the first
    frame's ground-truth pose unless initial_pose overrides it, and poses
    are snapshotted at the IMU sample nearest each frame, after that frame's
    vision update.
    """
    cfg = cfg or EkfConfig()
    pairs = coupling_pairs(skeleton, layout, cfg)
    if landmarks is None:
        landmarks = fk_world_batch(skeleton, seq.gt_phi, seq.gt_wrist_R,
                                   seq.gt_wrist_t)
        if landmark_sigma > 0:
            rng = np.random.default_rng(seed)
            landmarks = landmarks + rng.normal(0.0, landmark_sigma,
                                               landmarks.shape)
    if visibility is None:
        visibility = seq.visibility
    frames_at: dict[int, list[int]] = {}
    for f, t in enumerate(seq.frame_ts):
        frames_at.setdefault(align_frame(t, seq.imu_ts), []).append(f)

    dof_mask = sensor_dof_mask(skeleton, layout)
    # the least-articulated sensor rides the root segment and therefore
    # measures the base angular velocity the state does not model
    ref = int(np.argmin(dof_mask.sum(axis=1)))
    base_mount = layout.rotations[ref]
    state = initial_state(initial_pose or seq.gt_pose(0), cfg)
    poses: list[HandPose] = [None] * len(seq.frame_ts)

    def handle_frames(i: int) -> None:
        for f in frames_at.get(i, ()):
            nonlocal state
            if cfg.vision_enabled:
                state = ekf_update_vision(state, landmarks[f], visibility[f],
                                          skeleton, cfg)
            poses[f] = _emit(state, skeleton)

    state = ekf_update_gyro(state, seq.imu_gyro[0], layout, skeleton, cfg,
                            dof_mask)
    state = ekf_update_coupling(state, pairs, cfg)
    handle_frames(0)
    for i in range(1, len(seq.imu_ts)):
        # Midpoint stepping: the gyro average over [i-1, i] is applied at the
        # interval midpoint, where its linearization (world rotation, axes)
        # actually holds; predicting in two half steps is exact for both the
        # mean and the covariance thanks to the semigroup form of Q.
        dt = float(seq.imu_ts[i] - seq.imu_ts[i - 1])
        avg = 0.5 * (seq.imu_gyro[i - 1] + seq.imu_gyro[i])
        omega = quat_to_matrix(state.quat) @ (base_mount @ avg[ref])
        state = ekf_predict(state, 0.5 * dt, cfg, wrist_omega=omega)
        state = ekf_update_gyro(state, avg, layout, skeleton, cfg, dof_mask)
        state = ekf_update_coupling(state, pairs, cfg)
        omega = quat_to_matrix(state.quat) @ (base_mount @ avg[ref])
        state = ekf_predict(state, 0.5 * dt, cfg, wrist_omega=omega)
        handle_frames(i)
    return TrackResult("ekf", seq.frame_ts.copy(), poses,
                       translation_valid=True,
                       diagnostics={"final_cov_trace": float(np.trace(state.cov))})
