"""Synthetic paired-capture dataset generation.

Each sequence is a scripted hand motion rendered two ways: low-resolution
camera rasters at 60 Hz and strapdown IMU readings at 200 Hz, with per-frame
ground truth. Sequences carry an occlusion regime tag:

  open_hand      free motion, nothing hidden from the camera
  partial_grasp  grasp phases hide 1-3 fingers
  full_grasp     grasp phases hide 4-5 fingers

Grasp phases curl the chosen fingers and simultaneously occlude their
landmarks, mimicking how holding an object both bends and hides the hand.

Generated finger angles respect two fixed coupling ratios (DIP follows PIP,
thumb MCP follows CMC flexion) so the distal joint split stays observable
for orientation-only tracking; splines preserve the couplings exactly since
spline evaluation is linear in keyframe values.

Everything is derived from (master_seed, sequence_index); regeneration is
byte-identical, and generation parallelism never reorders output.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import container
from .camera import CameraModel, OcclusionSchedule, look_at_camera, render_observation
from .configio import ConfigError, dump_yaml, load_yaml
from .imusim import NoiseModel, apply_imu_noise, imu_clean, imu_sample_times
from .layout import SensorLayout, default_layout
from .motion import MotionScript
from .parallel import ordered_map
from .rotations import matrix_to_rotvec, rotvec_to_matrix
from .skeleton import HandPose, HandSkeleton, N_DOF, default_skeleton

REGIMES = ("open_hand", "partial_grasp", "full_grasp")

# generator-side coupling ratios; orientation-only tracking uses the same
# values to split summed flexions (see imu_tracker)
DIP_FROM_PIP = 0.66
THUMB_MCP_FROM_CMC = 0.8

FINGER_ORDER = ("thumb", "index", "middle", "ring", "pinky")


@dataclass
class DatasetConfig:
    out_dir: str = "dataset"
    n_sequences: int = 60
    duration_s: float = 10.0
    frame_rate_hz: float = 60.0
    imu_rate_hz: float = 200.0
    raster_size: int = 32
    master_seed: int = 20260815
    regime_fractions: dict = field(default_factory=lambda: {
        "open_hand": 0.2, "partial_grasp": 0.4, "full_grasp": 0.4})
    gyro_sigma: float = 0.005
    accel_sigma: float = 0.05
    gyro_bias_sigma: float = 0.002
    store_noisy_imu: bool = False   # default stores clean signals; noise is
                                    # injected downstream so sweeps can rescale it
    eval_stride: int = 4            # sequence i is eval when i % stride == phase
    eval_phase: int = 2
    speed_warp_fraction: float = 0.25  # train-only fast-motion augmentation
    speed_warp_max: float = 3.0
    camera_fov_deg: float = 45.0
    camera_eye: tuple = (0.0, -0.20, 0.38)
    camera_target: tuple = (0.0, 0.05, 0.0)
    camera_jitter: float = 0.015

    @staticmethod
    def from_dict(d: dict) -> "DatasetConfig":
        cfg = DatasetConfig()
        for k, v in d.items():
            if not hasattr(cfg, k):
                raise ConfigError(f"unknown dataset config field {k!r}")
            setattr(cfg, k, v)
        if cfg.n_sequences < 0:
            raise ConfigError("n_sequences must be >= 0")
        if abs(sum(cfg.regime_fractions.values()) - 1.0) > 1e-9:
            raise ConfigError("regime_fractions must sum to 1")
        for r in cfg.regime_fractions:
            if r not in REGIMES:
                raise ConfigError(f"unknown regime {r!r}")
        if cfg.duration_s <= 1.0:
            raise ConfigError("duration_s must exceed 1 s (window warmup)")
        return cfg

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    def noise_model(self) -> NoiseModel:
        return NoiseModel(self.gyro_sigma, self.accel_sigma, self.gyro_bias_sigma)

    def split_of(self, index: int) -> str:
        return "eval" if index % self.eval_stride == self.eval_phase else "train"


@dataclass
class CaptureSequence:
    seq_id: str
    regime: str
    split: str
    frame_ts: np.ndarray      # (F,)
    rasters: np.ndarray       # (F, H, W) float32
    visibility: np.ndarray    # (F, 21) bool — projection AND occlusion gating
    occl_landmarks: np.ndarray  # (F, 21) bool — occlusion schedule alone
    gt_phi: np.ndarray        # (F, 22)
    gt_wrist_R: np.ndarray    # (F, 3, 3)
    gt_wrist_t: np.ndarray    # (F, 3)
    imu_ts: np.ndarray        # (N,)
    imu_gyro: np.ndarray      # (N, 12, 3)
    imu_accel: np.ndarray     # (N, 12, 3)
    meta: dict

    @property
    def n_frames(self) -> int:
        return len(self.frame_ts)

    def gt_pose(self, f: int) -> HandPose:
        return HandPose(self.gt_phi[f], self.gt_wrist_R[f], self.gt_wrist_t[f])

    def occluded_fingers(self, skeleton: HandSkeleton) -> np.ndarray:
        """(F, 5) bool: finger f occluded at frame when any of its landmarks is."""
        out = np.zeros((self.n_frames, len(FINGER_ORDER)), dtype=bool)
        for fi, name in enumerate(FINGER_ORDER):
            out[:, fi] = self.occl_landmarks[:, skeleton.fingers[name]].any(axis=1)
        return out


# ---------------------------------------------------------------------------
# Script generation
# ---------------------------------------------------------------------------

def _finger_angles(curl: np.ndarray, abd: np.ndarray) -> np.ndarray:
    """Map per-finger curl scalars and abductions to the 22-angle vector.

    curl: (5,) in [0, ~1.4] thumb first; abd: (5,). Couplings DIP_FROM_PIP
    and THUMB_MCP_FROM_CMC are applied exactly.
    """
    phi = np.zeros(N_DOF)
    # thumb: cmc_abd, cmc_flex, mcp_flex, ip_flex at indices 2..5
    phi[2] = abd[0]
    phi[3] = 0.45 * curl[0]
    phi[4] = THUMB_MCP_FROM_CMC * phi[3]
    phi[5] = 0.55 * curl[0]
    for f in range(4):  # index, middle, ring, pinky at 6+4f
        base = 6 + 4 * f
        phi[base] = abd[f + 1]
        phi[base + 1] = 0.62 * curl[f + 1]   # mcp flexion
        phi[base + 2] = 0.85 * curl[f + 1]   # pip
        phi[base + 3] = DIP_FROM_PIP * phi[base + 2]
    return phi


def _phase_timeline(rng: np.random.Generator, duration: float, regime: str):
    """Alternating open/grasp phases; open_hand never grasps."""
    phases = []
    t = 0.0
    grasping = False
    while t < duration:
        # grasp phases run longer than open ones so occluded frames dominate
        # grasp-regime sequences
        length = rng.uniform(1.8, 3.2) if grasping else rng.uniform(0.8, 1.6)
        phases.append((t, min(t + length, duration), grasping))
        t += length
        grasping = (not grasping) and regime != "open_hand"
    return phases


def _grasp_fingers(rng: np.random.Generator, regime: str) -> np.ndarray:
    """Boolean (5,) mask of fingers curled+occluded during a grasp phase."""
    mask = np.zeros(5, dtype=bool)
    if regime == "partial_grasp":
        k = int(rng.integers(1, 4))
    elif regime == "full_grasp":
        k = int(rng.integers(4, 6))
    else:
        return mask
    mask[rng.choice(5, size=k, replace=False)] = True
    return mask


def build_motion(rng: np.random.Generator, skeleton: HandSkeleton, duration: float,
                 regime: str, warp: float = 1.0) -> tuple[MotionScript, OcclusionSchedule]:
    """One scripted sequence: keyframed motion plus its occlusion schedule.

    warp > 1 squeezes a longer scripted motion into `duration`, scaling all
    rates up by the factor without changing the pose distribution.
    """
    scripted = duration * warp
    phases = _phase_timeline(rng, scripted, regime)
    phase_fingers = [_grasp_fingers(rng, regime) for _ in phases]

    times = [0.0]
    while times[-1] < scripted:
        times.append(times[-1] + rng.uniform(0.7, 1.3))
    times[-1] = scripted
    if times[-1] - times[-2] < 0.3:
        del times[-2]
    times = np.array(times)

    def phase_at(t):
        for i, (t0, t1, g) in enumerate(phases):
            if t0 <= t < t1 or (i == len(phases) - 1 and t >= t1):
                return i
        return len(phases) - 1

    lim = skeleton.dof_limits()
    poses = []
    trans = np.array([0.0, 0.01, 0.02])
    rot = np.eye(3)
    for tk in times:
        pi = phase_at(tk)
        grasping = phases[pi][2]
        fingers = phase_fingers[pi]
        curl = np.where(fingers & grasping,
                        rng.uniform(0.95, 1.35, 5), rng.uniform(0.02, 0.38, 5))
        curl += rng.normal(0, 0.04, 5)
        abd = rng.uniform(-0.18, 0.18, 5) * (1.0 - 0.6 * np.clip(curl, 0, 1))
        phi = _finger_angles(np.clip(curl, 0.0, 1.45), abd)
        # small wrist articulation on top of the rigid transform
        phi[0] = rng.uniform(-0.2, 0.45)
        phi[1] = rng.uniform(-0.25, 0.25)
        phi = np.clip(phi, lim[:, 0] + 0.05, lim[:, 1] - 0.05)
        trans = np.clip(trans + rng.normal(0, 0.018, 3),
                        [-0.06, -0.05, -0.02], [0.06, 0.07, 0.06])
        step = rng.normal(0, 0.11, 3)
        rot = rotvec_to_matrix(step) @ rot
        # keep the palm roughly camera-facing: pull back toward identity
        # when the accumulated rotation exceeds ~40 degrees
        rv = matrix_to_rotvec(rot)
        ang = np.linalg.norm(rv)
        if ang > 0.7:
            rot = rotvec_to_matrix(rv * (0.7 / ang))
        poses.append(HandPose(phi, rot.copy(), trans.copy()))

    script = MotionScript(times / warp, poses)

    intervals = []
    for (t0, t1, grasping), fingers in zip(phases, phase_fingers):
        if not grasping or not fingers.any():
            continue
        hidden: set[int] = set()
        for fi in np.nonzero(fingers)[0]:
            lm = skeleton.fingers[FINGER_ORDER[fi]]
            hidden.update(lm[1:])               # pip, dip, tip always
            if rng.random() < 0.5:
                hidden.add(lm[0])               # mcp sometimes
        pad0, pad1 = rng.uniform(-0.08, 0.08, 2)
        a = max(0.0, (t0 + pad0) / warp)
        b = min(duration, (t1 + pad1) / warp)
        if b > a:
            intervals.append((a, b, frozenset(hidden)))
    sched = OcclusionSchedule(intervals)
    sched.validate(duration)
    return script, sched


# ---------------------------------------------------------------------------
# Sequence assembly
# ---------------------------------------------------------------------------

def _jittered_camera(rng: np.random.Generator, cfg: DatasetConfig) -> CameraModel:
    eye = np.asarray(cfg.camera_eye) + rng.normal(0, cfg.camera_jitter, 3)
    target = np.asarray(cfg.camera_target) + rng.normal(0, cfg.camera_jitter / 2, 3)
    fov = cfg.camera_fov_deg + rng.uniform(-3.0, 3.0)
    return look_at_camera(eye, target, fov_deg=fov,
                          width=cfg.raster_size, height=cfg.raster_size)


def regime_assignment(fractions: dict, n: int) -> list[str]:
    """Exact largest-remainder counts, interleaved deterministically."""
    names = [r for r in REGIMES if fractions.get(r, 0) > 0]
    raw = np.array([fractions[r] * n for r in names])
    counts = np.floor(raw).astype(int)
    rem = raw - counts
    for i in np.argsort(-rem)[: n - counts.sum()]:
        counts[i] += 1
    used = np.zeros(len(names), dtype=int)
    out = []
    for i in range(n):
        deficit = counts * (i + 1) / n - used
        pick = int(np.argmax(deficit))
        out.append(names[pick])
        used[pick] += 1
    return out


def generate_sequence(cfg: DatasetConfig, index: int, regime: str,
                      skeleton: HandSkeleton | None = None,
                      layout: SensorLayout | None = None) -> CaptureSequence:
    skeleton = skeleton or default_skeleton()
    layout = layout or default_layout(skeleton)
    ss = np.random.SeedSequence([cfg.master_seed, index])
    rng_script, rng_noise, rng_cam = (np.random.default_rng(s) for s in ss.spawn(3))

    split = cfg.split_of(index)
    warp = 1.0
    if split == "train" and rng_script.random() < cfg.speed_warp_fraction:
        warp = float(rng_script.uniform(1.0, cfg.speed_warp_max))

    script, sched = build_motion(rng_script, skeleton, cfg.duration_s, regime, warp)
    camera = _jittered_camera(rng_cam, cfg)

    n_frames = int(np.floor(cfg.duration_s * cfg.frame_rate_hz + 1e-9)) + 1
    frame_ts = np.arange(n_frames) / cfg.frame_rate_hz
    H = W = cfg.raster_size
    rasters = np.zeros((n_frames, H, W), dtype=np.float32)
    vis = np.zeros((n_frames, 21), dtype=bool)
    occl = np.zeros((n_frames, 21), dtype=bool)
    phi = np.zeros((n_frames, N_DOF))
    wR = np.zeros((n_frames, 3, 3))
    wt = np.zeros((n_frames, 3))
    for f, t in enumerate(frame_ts):
        pose = script.sample_pose(float(t))
        hidden = sched.occluded_at(float(t))
        rasters[f], vis[f] = render_observation(pose, camera, skeleton, hidden)
        occl[f, list(hidden)] = True
        phi[f] = pose.angles
        wR[f] = pose.wrist_rotation
        wt[f] = pose.wrist_translation

    imu_ts = imu_sample_times(0.0, cfg.duration_s, cfg.imu_rate_hz)
    gyro, accel = imu_clean(skeleton, layout, script, imu_ts)
    if cfg.store_noisy_imu:
        gyro, accel = apply_imu_noise(gyro, accel, cfg.noise_model(), rng_noise)

    meta = {
        "seq_index": index,
        "regime": regime,
        "split": split,
        "warp": warp,
        "master_seed": cfg.master_seed,
        "noise": {"gyro_sigma": cfg.gyro_sigma, "accel_sigma": cfg.accel_sigma,
                  "gyro_bias_sigma": cfg.gyro_bias_sigma,
                  "stored_noisy": bool(cfg.store_noisy_imu)},
        "camera": {"eye": list(np.round(camera.eye, 12)),
                   "fx": camera.fx, "fy": camera.fy,
                   "cx": camera.cx, "cy": camera.cy,
                   "R_wc": np.round(camera.R_wc, 15).tolist(),
                   "width": camera.width, "height": camera.height},
    }
    return CaptureSequence(f"seq_{index:04d}", regime, split, frame_ts, rasters,
                           vis, occl, phi, wR, wt, imu_ts, gyro, accel, meta)


# ---------------------------------------------------------------------------
# On-disk dataset
# ---------------------------------------------------------------------------

def save_sequence(seq: CaptureSequence, path: Path) -> None:
    arrays = {
        "frame_ts": seq.frame_ts,
        "rasters": seq.rasters.astype(np.float32),
        "visibility": seq.visibility.astype(np.uint8),
        "occl_landmarks": seq.occl_landmarks.astype(np.uint8),
        "gt_phi": seq.gt_phi,
        "gt_wrist_R": seq.gt_wrist_R,
        "gt_wrist_t": seq.gt_wrist_t,
        "imu_ts": seq.imu_ts,
        "imu_gyro": seq.imu_gyro,
        "imu_accel": seq.imu_accel,
    }
    container.write_text_block(arrays, "meta",
                               json.dumps(seq.meta, sort_keys=True))
    container.write_arrays(path, arrays)


def load_sequence(path: Path) -> CaptureSequence:
    arrs = container.read_arrays(path)
    meta = json.loads(container.read_text_block(arrs, "meta"))
    return CaptureSequence(
        seq_id=f"seq_{meta['seq_index']:04d}",
        regime=meta["regime"],
        split=meta["split"],
        frame_ts=arrs["frame_ts"],
        rasters=arrs["rasters"],
        visibility=arrs["visibility"].astype(bool),
        occl_landmarks=arrs["occl_landmarks"].astype(bool),
        gt_phi=arrs["gt_phi"],
        gt_wrist_R=arrs["gt_wrist_R"],
        gt_wrist_t=arrs["gt_wrist_t"],
        imu_ts=arrs["imu_ts"],
        imu_gyro=arrs["imu_gyro"],
        imu_accel=arrs["imu_accel"],
        meta=meta,
    )


def _worker(args) -> str:
    cfg_dict, index, regime, out_dir = args
    cfg = DatasetConfig.from_dict(cfg_dict)
    seq = generate_sequence(cfg, index, regime)
    fname = f"{seq.seq_id}.avht"
    save_sequence(seq, Path(out_dir) / fname)
    return fname


def generate_dataset(cfg: DatasetConfig, out_dir: str | Path) -> dict:
    """Generate every sequence and write manifest + blobs; returns manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    regimes = regime_assignment(cfg.regime_fractions, cfg.n_sequences)
    tasks = [(cfg.to_dict(), i, regimes[i], str(out)) for i in range(cfg.n_sequences)]
    files = ordered_map(_worker, tasks)
    manifest = {
        "schema_version": 1,
        "master_seed": cfg.master_seed,
        "config": cfg.to_dict(),
        "sequences": [
            {"id": f"seq_{i:04d}", "file": files[i], "regime": regimes[i],
             "split": cfg.split_of(i)}
            for i in range(cfg.n_sequences)
        ],
    }
    dump_yaml(manifest, out / "manifest.yaml")
    return manifest


def load_manifest(dataset_dir: str | Path) -> dict:
    path = Path(dataset_dir) / "manifest.yaml"
    manifest = load_yaml(path)
    if manifest.get("schema_version") != 1:
        raise ConfigError(f"{path}: unsupported manifest schema")
    return manifest


def load_split(dataset_dir: str | Path, split: str | None = None) -> list[CaptureSequence]:
    """Load all sequences, optionally filtered to 'train' or 'eval'."""
    root = Path(dataset_dir)
    manifest = load_manifest(root)
    out = []
    for entry in manifest["sequences"]:
        if split is not None and entry["split"] != split:
            continue
        out.append(load_sequence(root / entry["file"]))
    return out
