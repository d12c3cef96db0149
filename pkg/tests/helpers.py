"""Shared oracles and fixtures for the test suite.

Oracles here are deliberately written against different primitives than the
library (scipy Rotation, dense 4x4 composition, brute-force search) so that
agreement is evidence, not tautology.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial.transform import Rotation as ScipyRot

from fusetrack.skeleton import HandPose, HandSkeleton


def oracle_forward_kinematics(skeleton: HandSkeleton, pose: HandPose) -> np.ndarray:
    """Dense homogeneous-matrix FK, one 4x4 composition per joint and hinge."""
    wrist = np.eye(4)
    wrist[:3, :3] = pose.wrist_rotation
    wrist[:3, 3] = pose.wrist_translation
    frames: list[np.ndarray] = []
    for j in range(skeleton.n_joints):
        p = int(skeleton.parents[j])
        base = frames[p] if p >= 0 else wrist
        step = np.eye(4)
        step[:3, 3] = skeleton.offsets[j]
        step[:3, :3] = skeleton.rest_rots[j]
        T = base @ step
        for k in skeleton.joint_dofs[j]:
            d = skeleton.dofs[k]
            hinge = np.eye(4)
            hinge[:3, :3] = ScipyRot.from_rotvec(d.axis * pose.angles[k]).as_matrix()
            T = T @ hinge
        frames.append(T)
    out = np.empty((len(skeleton.landmark_joints), 3))
    for i, j in enumerate(skeleton.landmark_joints):
        h = frames[int(j)] @ np.append(skeleton.landmark_offsets[i], 1.0)
        out[i] = h[:3]
    return out


def random_pose(skeleton: HandSkeleton, rng: np.random.Generator,
                wrist: bool = True) -> HandPose:
    lim = skeleton.dof_limits()
    ang = rng.uniform(lim[:, 0], lim[:, 1])
    if wrist:
        R = ScipyRot.random(random_state=rng).as_matrix()
        t = rng.uniform(-0.5, 0.5, 3)
    else:
        R, t = np.eye(3), np.zeros(3)
    return HandPose(ang, R, t)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    return ScipyRot.random(random_state=rng).as_matrix()
