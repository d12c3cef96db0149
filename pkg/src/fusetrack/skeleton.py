"""Articulated hand skeleton and forward kinematics.

The skeleton is a tree of rigid segments. Each joint node contributes zero or
more hinge DoFs applied in listed order about fixed local axes, after an
optional constant rest rotation. Landmarks are points rigidly attached to
segment frames; forward kinematics maps a 22-vector of joint angles plus a
wrist rigid transform to 21 landmark positions.

The FK core also records, per DoF, the world-side rotation axis and joint
origin at evaluation time. Those make the analytic landmark Jacobian a single
cross product per (landmark, DoF) pair, which the model's pose head and the
Jacobian tests reuse.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .configio import ConfigError, load_packaged_yaml, require_schema
from .rotations import axis_angle_matrix, euler_zyx_deg_to_matrix, is_rotation

N_DOF = 22
N_LANDMARKS = 21
FINGERTIP_LANDMARKS = (4, 8, 12, 16, 20)

DEFAULT_SKELETON_FILE = "skeleton_right_22dof.yaml"


@dataclass(frozen=True)
class Dof:
    name: str
    kind: str            # "flexion" | "abduction"
    joint: int           # node index the hinge lives at
    axis: np.ndarray     # unit axis in the node's local frame, shape (3,)
    limits: tuple[float, float]


@dataclass
class HandSkeleton:
    name: str
    joint_names: list[str]
    parents: np.ndarray          # (J,) int, -1 for root
    offsets: np.ndarray          # (J, 3) meters, in parent frame
    rest_rots: np.ndarray        # (J, 3, 3) applied after the offset, before DoFs
    dofs: list[Dof]              # length 22, global DoF order
    landmark_joints: np.ndarray  # (21,) int
    landmark_offsets: np.ndarray  # (21, 3)
    landmark_names: list[str]
    fingers: dict[str, list[int]]          # finger name -> landmark indices
    fingertips: tuple[int, ...] = FINGERTIP_LANDMARKS

    # derived, filled in __post_init__
    joint_dofs: list[list[int]] = field(default_factory=list)
    children: list[list[int]] = field(default_factory=list)
    downstream: np.ndarray = None  # (22, 21) bool: landmark moves under DoF
    bones: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        J = len(self.joint_names)
        self.joint_dofs = [[] for _ in range(J)]
        for k, d in enumerate(self.dofs):
            self.joint_dofs[d.joint].append(k)
        self.children = [[] for _ in range(J)]
        for j, p in enumerate(self.parents):
            if p >= 0:
                self.children[p].append(j)
        # subtree membership per joint, then lift to (dof, landmark) pairs
        in_subtree = np.zeros((J, J), dtype=bool)
        for j in reversed(range(J)):
            in_subtree[j, j] = True
            for c in self.children[j]:
                in_subtree[j] |= in_subtree[c]
        self.downstream = np.zeros((N_DOF, N_LANDMARKS), dtype=bool)
        for k, d in enumerate(self.dofs):
            self.downstream[k] = in_subtree[d.joint][self.landmark_joints]
        # landmark-space bone list: connect each landmark to the nearest
        # ancestor joint that also carries a landmark
        joint_to_landmark = {int(j): i for i, j in enumerate(self.landmark_joints)}
        self.bones = []
        for i, j in enumerate(self.landmark_joints):
            p = int(self.parents[j])
            while p >= 0 and p not in joint_to_landmark:
                p = int(self.parents[p])
            if p >= 0:
                self.bones.append((joint_to_landmark[p], i))
            elif int(j) != int(self.landmark_joints[0]):
                self.bones.append((0, i))

    @property
    def n_joints(self) -> int:
        return len(self.joint_names)

    def dof_names(self) -> list[str]:
        return [d.name for d in self.dofs]

    def dof_limits(self) -> np.ndarray:
        """(22, 2) lower/upper joint angle limits in radians."""
        return np.array([d.limits for d in self.dofs])

    def clamp_angles(self, phi: np.ndarray) -> np.ndarray:
        lim = self.dof_limits()
        return np.clip(phi, lim[:, 0], lim[:, 1])


@dataclass
class HandPose:
    """Joint angles plus the wrist rigid transform (world from hand root)."""
    angles: np.ndarray             # (22,) radians
    wrist_rotation: np.ndarray     # (3, 3)
    wrist_translation: np.ndarray  # (3,) meters

    def validate(self, skeleton: HandSkeleton | None = None) -> None:
        a = np.asarray(self.angles, dtype=np.float64)
        if a.shape != (N_DOF,):
            raise ValueError(f"angles shape {a.shape}, expected ({N_DOF},)")
        if not np.all(np.isfinite(a)):
            raise ValueError("non-finite joint angles")
        if not is_rotation(np.asarray(self.wrist_rotation), tol=1e-9):
            raise ValueError("wrist_rotation is not a rotation matrix (tol 1e-9)")
        t = np.asarray(self.wrist_translation, dtype=np.float64)
        if t.shape != (3,) or not np.all(np.isfinite(t)):
            raise ValueError("wrist_translation must be a finite 3-vector")
        if skeleton is not None:
            lim = skeleton.dof_limits()
            low = a < lim[:, 0] - 1e-12
            high = a > lim[:, 1] + 1e-12
            if low.any() or high.any():
                bad = np.nonzero(low | high)[0]
                names = ", ".join(skeleton.dofs[int(k)].name for k in bad)
                raise ValueError(f"joint angles out of limits: {names}")

    @staticmethod
    def identity() -> "HandPose":
        return HandPose(np.zeros(N_DOF), np.eye(3), np.zeros(3))


# ---------------------------------------------------------------------------
# Construction from config
# ---------------------------------------------------------------------------

def skeleton_from_config(cfg: dict) -> HandSkeleton:
    require_schema(cfg, 1, "skeleton")
    joints = cfg["joints"]
    limits = cfg["joint_limits_rad"]
    names, parents, offsets, rests = [], [], [], []
    dofs: list[Dof] = []
    for j, node in enumerate(joints):
        names.append(node["name"])
        parent = int(node["parent"])
        if parent >= j or (parent < 0 and j != 0):
            raise ConfigError(f"joint {node['name']}: parent must precede child")
        parents.append(parent)
        offsets.append(np.asarray(node["offset"], dtype=np.float64))
        rot = node.get("rest_rotation_zyx_deg")
        rests.append(euler_zyx_deg_to_matrix(rot) if rot else np.eye(3))
        for d in node.get("dofs", []):
            kind = d["kind"]
            if kind not in limits:
                raise ConfigError(f"dof {d['name']}: unknown kind {kind!r}")
            axis = np.asarray(d["axis"], dtype=np.float64)
            norm = np.linalg.norm(axis)
            if not 0.999999 < norm < 1.000001:
                raise ConfigError(f"dof {d['name']}: axis must be unit length")
            dofs.append(Dof(d["name"], kind, j, axis / norm, tuple(limits[kind])))
    if len(dofs) != N_DOF:
        raise ConfigError(f"skeleton defines {len(dofs)} DoFs, expected {N_DOF}")

    lm = cfg["landmarks"]
    if len(lm) != N_LANDMARKS:
        raise ConfigError(f"{len(lm)} landmarks, expected {N_LANDMARKS}")
    lm_joints = np.array([int(e["joint"]) for e in lm])
    lm_offsets = np.array([e.get("offset", [0.0, 0.0, 0.0]) for e in lm], dtype=np.float64)
    if lm_joints.min() < 0 or lm_joints.max() >= len(names):
        raise ConfigError("landmark joint index out of range")

    fingers = {k: list(v) for k, v in cfg["fingers"].items()}
    tips = tuple(cfg["fingertip_landmarks"])
    if tips != FINGERTIP_LANDMARKS:
        raise ConfigError(f"fingertip landmark indices {tips} do not match "
                          f"the expected ordering {FINGERTIP_LANDMARKS}")
    return HandSkeleton(
        name=cfg.get("name", "hand"),
        joint_names=names,
        parents=np.array(parents),
        offsets=np.stack(offsets),
        rest_rots=np.stack(rests),
        dofs=dofs,
        landmark_joints=lm_joints,
        landmark_offsets=lm_offsets,
        landmark_names=[e["name"] for e in lm],
        fingers=fingers,
    )


def default_skeleton() -> HandSkeleton:
    return skeleton_from_config(load_packaged_yaml(DEFAULT_SKELETON_FILE))


# ---------------------------------------------------------------------------
# Forward kinematics
# ---------------------------------------------------------------------------

@dataclass
class FkResult:
    """Root-frame FK of a batch of angle vectors, with per-DoF hinge records."""
    landmarks: np.ndarray   # (B, 21, 3) in the hand-root frame
    axes: np.ndarray        # (B, 22, 3) world-side hinge axes
    origins: np.ndarray     # (B, 22, 3) hinge pivot points
    seg_R: np.ndarray       # (B, J, 3, 3) segment orientations
    seg_t: np.ndarray       # (B, J, 3) segment origins


def fk_root_batch(skeleton: HandSkeleton, phi: np.ndarray) -> FkResult:
    """Evaluate FK in the hand-root frame for a batch of angle vectors.

    phi: (B, 22) or (22,). All outputs are batched; the root frame is the
    identity, so world poses follow by one rigid transform.
    """
    phi = np.asarray(phi, dtype=np.float64)
    squeeze = phi.ndim == 1
    if squeeze:
        phi = phi[None]
    B = phi.shape[0]
    J = skeleton.n_joints
    seg_R = np.empty((B, J, 3, 3))
    seg_t = np.empty((B, J, 3))
    axes = np.empty((B, N_DOF, 3))
    origins = np.empty((B, N_DOF, 3))
    for j in range(J):
        p = skeleton.parents[j]
        if p < 0:
            R = np.broadcast_to(np.eye(3), (B, 3, 3)).copy()
            t = np.zeros((B, 3))
        else:
            Rp = seg_R[:, p]
            t = seg_t[:, p] + (Rp @ skeleton.offsets[j])
            R = Rp @ skeleton.rest_rots[j]
        for k in skeleton.joint_dofs[j]:
            d = skeleton.dofs[k]
            axes[:, k] = R @ d.axis
            origins[:, k] = t
            R = R @ axis_angle_matrix(d.axis, phi[:, k])
        seg_R[:, j] = R
        seg_t[:, j] = t
    lj = skeleton.landmark_joints
    landmarks = seg_t[:, lj] + np.einsum(
        "bjxy,jy->bjx", seg_R[:, lj], skeleton.landmark_offsets)
    return FkResult(landmarks, axes, origins, seg_R, seg_t)


def forward_kinematics(skeleton: HandSkeleton, pose: HandPose) -> np.ndarray:
    """World-frame landmark positions, shape (21, 3)."""
    res = fk_root_batch(skeleton, pose.angles)
    R = np.asarray(pose.wrist_rotation, dtype=np.float64)
    t = np.asarray(pose.wrist_translation, dtype=np.float64)
    return res.landmarks[0] @ R.T + t


def fk_world_batch(skeleton: HandSkeleton, phi: np.ndarray,
                   wrist_R: np.ndarray, wrist_t: np.ndarray) -> np.ndarray:
    """Batched world-frame FK: (B, 22), (B, 3, 3), (B, 3) -> (B, 21, 3)."""
    res = fk_root_batch(skeleton, phi)
    return np.einsum("bxy,bly->blx", wrist_R, res.landmarks) + wrist_t[:, None, :]


def segment_frames(skeleton: HandSkeleton, pose: HandPose) -> tuple[np.ndarray, np.ndarray]:
    """World pose of every segment frame: (J, 3, 3) rotations, (J, 3) origins."""
    res = fk_root_batch(skeleton, pose.angles)
    R = np.asarray(pose.wrist_rotation, dtype=np.float64)
    t = np.asarray(pose.wrist_translation, dtype=np.float64)
    return R @ res.seg_R[0], res.seg_t[0] @ R.T + t


def landmark_jacobian(skeleton: HandSkeleton, phi: np.ndarray) -> np.ndarray:
    """Analytic d(landmark)/d(angle) in the root frame, shape (B, 21, 3, 22).

    Hinge DoF k moves landmark l by axis_k x (p_l - origin_k) when l lies in
    the subtree below the hinge, else not at all.
    """
    res = fk_root_batch(skeleton, phi)
    diff = res.landmarks[:, None, :, :] - res.origins[:, :, None, :]  # (B,22,21,3)
    vel = np.cross(res.axes[:, :, None, :], diff)
    vel *= skeleton.downstream[None, :, :, None]
    return np.transpose(vel, (0, 2, 3, 1))


def pull_back_landmark_grads(skeleton: HandSkeleton, res: FkResult,
                             grad_landmarks: np.ndarray) -> np.ndarray:
    """Chain-rule adjoint of fk_root_batch: (B, 21, 3) grads -> (B, 22)."""
    diff = res.landmarks[:, None, :, :] - res.origins[:, :, None, :]
    vel = np.cross(res.axes[:, :, None, :], diff)
    vel *= skeleton.downstream[None, :, :, None]
    return np.einsum("bklx,blx->bk", vel, grad_landmarks)
