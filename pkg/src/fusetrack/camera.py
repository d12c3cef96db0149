"""Pinhole camera and low-resolution hand rasterization.

The observation is a small monochrome raster: visible skeleton segments drawn
as antialiased capsules plus discs at visible landmarks, intensities in
[0, 1]. Occluded landmarks and any segment touching one are omitted, which is
how grasp occlusion reaches the vision stream.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .skeleton import HandPose, HandSkeleton, forward_kinematics

# capsule radius of a rendered finger segment, meters
LIMB_RADIUS_M = 0.007


@dataclass
class CameraModel:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    R_wc: np.ndarray  # camera-from-world rotation, +z forward
    eye: np.ndarray   # camera center, world frame
    near: float = 0.05

    def project(self, pts_w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """World points (M, 3) -> pixel coords (M, 2) and camera depth (M,).

        Points behind the camera get depth <= 0; their pixel coords are
        meaningless and must be gated by the caller.
        """
        pc = (np.atleast_2d(pts_w) - self.eye) @ self.R_wc.T
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * pc[:, 0] / z + self.cx
            v = self.fy * pc[:, 1] / z + self.cy
        return np.stack([u, v], axis=-1), z


def look_at_camera(eye, target, up=(0.0, 1.0, 0.0), fov_deg: float = 45.0,
                   width: int = 32, height: int = 32) -> CameraModel:
    """Camera at `eye` with +z toward `target`; principal point at the
    geometric image center."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:
        raise ValueError("up vector parallel to view direction")
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R_wc = np.stack([right, down, fwd])  # rows: camera axes in world
    fx = (width / 2.0) / np.tan(np.deg2rad(fov_deg) / 2.0)
    fy = fx
    return CameraModel(width, height, fx, fy,
                       (width - 1) / 2.0, (height - 1) / 2.0, R_wc, eye)


def render_observation(pose: HandPose, camera: CameraModel,
                       skeleton: HandSkeleton,
                       occluded: frozenset[int] | set[int] = frozenset(),
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Rasterize a pose -> (raster (H, W) float32 in [0, 1], visibility (21,) bool).

    A landmark is visible when not occluded, in front of the near plane, and
    inside the image bounds. Segments render only if both endpoints are
    visible.
    """
    lm = forward_kinematics(skeleton, pose)
    uv, z = camera.project(lm)
    H, W = camera.height, camera.width
    in_front = z > camera.near
    in_bounds = ((uv[:, 0] >= -0.5) & (uv[:, 0] <= W - 0.5)
                 & (uv[:, 1] >= -0.5) & (uv[:, 1] <= H - 0.5))
    visible = in_front & in_bounds
    if occluded:
        visible = visible.copy()
        visible[list(occluded)] = False

    raster = np.zeros((H, W), dtype=np.float32)
    ys, xs = np.mgrid[0:H, 0:W]
    for a, b in skeleton.bones:
        if visible[a] and visible[b]:
            r_px = LIMB_RADIUS_M * camera.fx / max(float(min(z[a], z[b])), camera.near)
            _draw_capsule(raster, xs, ys, uv[a], uv[b], r_px)
    for i in range(len(lm)):
        if visible[i]:
            r_px = LIMB_RADIUS_M * camera.fx / max(float(z[i]), camera.near)
            _draw_capsule(raster, xs, ys, uv[i], uv[i], r_px)
    return raster, visible


def _draw_capsule(raster, xs, ys, p0, p1, radius_px: float) -> None:
    """Max-composite an antialiased capsule from p0 to p1 into the raster."""
    radius_px = float(np.clip(radius_px, 0.45, 4.0))
    lo_x = int(max(0, np.floor(min(p0[0], p1[0]) - radius_px - 1)))
    hi_x = int(min(raster.shape[1], np.ceil(max(p0[0], p1[0]) + radius_px + 2)))
    lo_y = int(max(0, np.floor(min(p0[1], p1[1]) - radius_px - 1)))
    hi_y = int(min(raster.shape[0], np.ceil(max(p0[1], p1[1]) + radius_px + 2)))
    if lo_x >= hi_x or lo_y >= hi_y:
        return
    px = xs[lo_y:hi_y, lo_x:hi_x]
    py = ys[lo_y:hi_y, lo_x:hi_x]
    d = np.stack([px - p0[0], py - p0[1]], axis=-1).astype(np.float64)
    seg = np.array([p1[0] - p0[0], p1[1] - p0[1]])
    len2 = float(seg @ seg)
    if len2 > 1e-12:
        t = np.clip((d @ seg) / len2, 0.0, 1.0)
        d = d - t[..., None] * seg
    dist = np.sqrt((d ** 2).sum(-1))
    patch = np.clip(radius_px + 0.5 - dist, 0.0, 1.0)
    np.maximum(raster[lo_y:hi_y, lo_x:hi_x], patch.astype(np.float32),
               out=raster[lo_y:hi_y, lo_x:hi_x])


@dataclass
class OcclusionSchedule:
    """Timed occlusion intervals: (start s, end s, landmark index set)."""
    intervals: list[tuple[float, float, frozenset[int]]] = field(default_factory=list)

    def validate(self, duration: float) -> None:
        for t0, t1, idx in self.intervals:
            if not (0.0 <= t0 < t1 <= duration + 1e-9):
                raise ValueError(f"occlusion interval [{t0}, {t1}] outside script")
            if idx and (min(idx) < 0 or max(idx) >= 21):
                raise ValueError("occluded landmark index out of range")

    def occluded_at(self, t: float) -> frozenset[int]:
        out: set[int] = set()
        for t0, t1, idx in self.intervals:
            if t0 <= t < t1:
                out |= idx
        return frozenset(out)
