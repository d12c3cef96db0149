"""Multi-rate stream alignment and IMU feature-window extraction.

Each 60 Hz frame is aligned to its nearest 200 Hz IMU sample (ties toward the
earlier sample) and paired with a 14-timestep feature window: one unit-norm
gravity-direction channel per sensor (complementary filter) plus the raw gyro
channels of all sensors except one configured redundancy, 23 channels total.

The pipeline also owns the sensitivity perturbations: window-level noise
injection scaled against the native sensor noise floor, temporal realignment
by a signed shift, and the training-time image augmentation.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .configio import ConfigError
from .dataset import CaptureSequence
from .imusim import GRAVITY_WORLD, NoiseModel
from .layout import SensorLayout
from .rotations import rotvec_to_matrix
from .skeleton import HandPose, HandSkeleton

WINDOW_LEN = 14
N_CHANNELS = 23
GRAVITY_MAG = float(np.linalg.norm(GRAVITY_WORLD))


class WarmupError(Exception):
    """Frame preceding the first full IMU window; caller skips the frame."""


@dataclass
class ImuWindow:
    data: np.ndarray                      # (14, 23, 3) float64
    frame_timestamp: float                # the aligned IMU sample's timestamp
    channel_map: list[tuple[int, str]]    # 23 entries of (sensor_id, kind)

    def validate(self) -> None:
        if self.data.shape != (WINDOW_LEN, N_CHANNELS, 3):
            raise ValueError(f"window shape {self.data.shape}, "
                             f"expected {(WINDOW_LEN, N_CHANNELS, 3)}")
        if len(self.channel_map) != N_CHANNELS:
            raise ValueError("channel_map must list 23 channels")
        grav = [i for i, (_, kind) in enumerate(self.channel_map) if kind == "gravity"]
        norms = np.linalg.norm(self.data[:, grav, :], axis=-1)
        if np.abs(norms - 1.0).max() > 1e-6:
            raise ValueError("gravity channels must be unit norm")


@dataclass
class AlignedSample:
    window: ImuWindow
    raster: np.ndarray        # (H, W) float32
    visibility: np.ndarray    # (21,) bool
    pose: HandPose            # ground truth
    regime: str
    seq_id: str
    frame_index: int
    frame_ts: float
    occl_landmarks: np.ndarray  # (21,) bool, schedule-driven
    occl_fingers: np.ndarray    # (5,) bool


@dataclass
class PipelineConfig:
    window_inclusive: bool = True      # window ends at the aligned sample
    excluded_gyro_sensor: str = "hand_back"
    gravity_blend: float = 0.02        # complementary filter coefficient
    noise_scale: float = 0.0           # x native floor injected into windows
    time_shift: float = 0.0            # seconds, |dt| <= shift bound
    shift_bound: float = 0.4
    noise_seed: int = 7130
    noise_floor: NoiseModel = field(default_factory=NoiseModel)

    def validate(self) -> None:
        if self.noise_scale < 0:
            raise ConfigError("noise_scale must be >= 0")
        if abs(self.time_shift) > self.shift_bound + 1e-12:
            raise ConfigError(
                f"time_shift {self.time_shift} exceeds bound {self.shift_bound}")


def channel_map_for(layout: SensorLayout, excluded_gyro: str = "hand_back",
                    ) -> list[tuple[int, str]]:
    """12 gravity channels then the gyro channels of every other sensor."""
    if excluded_gyro not in layout.sensor_names:
        raise ConfigError(f"excluded gyro sensor {excluded_gyro!r} not in layout")
    skip = layout.sensor_index(excluded_gyro)
    cmap = [(s, "gravity") for s in range(layout.n_sensors)]
    cmap += [(s, "gyro") for s in range(layout.n_sensors) if s != skip]
    return cmap


# ---------------------------------------------------------------------------
# Alignment and extraction
# ---------------------------------------------------------------------------

def align_frame(frame_ts: float, imu_timestamps: np.ndarray) -> int:
    """Index of the IMU sample nearest frame_ts; exact ties go earlier."""
    ts = np.asarray(imu_timestamps)
    if len(ts) == 0:
        raise ValueError("empty IMU stream")
    hi = int(np.searchsorted(ts, frame_ts))
    if hi == 0:
        return 0
    if hi >= len(ts):
        return len(ts) - 1
    lo = hi - 1
    return lo if frame_ts - ts[lo] <= ts[hi] - frame_ts else hi


def extract_window(aligned_index: int, gyro: np.ndarray, gravity: np.ndarray,
                   imu_ts: np.ndarray, channel_map: list[tuple[int, str]],
                   inclusive: bool = True) -> ImuWindow:
    """Assemble the (14, 23, 3) window ending at (or just before) the aligned
    sample. gyro and gravity are (N, 12, 3) full-sequence streams."""
    end = aligned_index + 1 if inclusive else aligned_index
    start = end - WINDOW_LEN
    if start < 0:
        raise WarmupError(
            f"aligned index {aligned_index} lacks {WINDOW_LEN} samples of history")
    data = np.empty((WINDOW_LEN, len(channel_map), 3))
    for c, (sensor, kind) in enumerate(channel_map):
        src = gravity if kind == "gravity" else gyro
        data[:, c, :] = src[start:end, sensor, :]
    return ImuWindow(data, float(imu_ts[aligned_index]), list(channel_map))


# ---------------------------------------------------------------------------
# Gravity estimation
# ---------------------------------------------------------------------------

def gravity_filter(gyro: np.ndarray, accel: np.ndarray, dt: float,
                   blend: float = 0.02) -> np.ndarray:
    """Complementary filter for the body-frame gravity direction.

    Propagate the previous estimate backward through the body rotation
    implied by the gyro, then pull it toward the normalized accelerometer
    direction by `blend`. Initialized from the first accelerometer sample;
    zero-norm accel samples propagate without blending.
    """
    n = len(gyro)
    out = np.empty((n, 3))
    a0 = accel[0]
    norm = np.linalg.norm(a0)
    g = a0 / norm if norm > 1e-9 else np.array([0.0, 0.0, 1.0])
    out[0] = g
    for i in range(1, n):
        g = rotvec_to_matrix(-gyro[i] * dt) @ g
        a = accel[i]
        norm = np.linalg.norm(a)
        if norm > 1e-9:
            g = (1.0 - blend) * g + blend * (a / norm)
        g = g / np.linalg.norm(g)
        out[i] = g
    return out


def estimate_gravity(samples: list) -> np.ndarray:
    """Per-timestep gravity direction from one sensor's ImuSample history."""
    if not samples:
        raise ValueError("empty sensor history")
    ids = {s.sensor_id for s in samples}
    if len(ids) != 1:
        raise ValueError(f"history mixes sensors {sorted(ids)}")
    ts = np.array([s.timestamp for s in samples])
    gyro = np.stack([s.gyro for s in samples])
    accel = np.stack([s.accel for s in samples])
    dt = float(np.mean(np.diff(ts))) if len(ts) > 1 else 0.005
    return gravity_filter(gyro, accel, dt, blend=0.02)


def gravity_streams(gyro: np.ndarray, accel: np.ndarray, dt: float,
                    blend: float = 0.02) -> np.ndarray:
    """gravity_filter across all sensors: (N, 12, 3) -> (N, 12, 3)."""
    return np.stack([gravity_filter(gyro[:, s], accel[:, s], dt, blend)
                     for s in range(gyro.shape[1])], axis=1)


# ---------------------------------------------------------------------------
# Perturbations
# ---------------------------------------------------------------------------

def inject_noise(window: ImuWindow, scale: float, seed,
                 floor: NoiseModel | None = None) -> ImuWindow:
    """Add scale x native-floor Gaussian noise to a window.

    Gyro channels get sigma = scale * gyro floor directly. Gravity channels
    are unit directions whose upstream input is an accelerometer vector of
    magnitude ~9.81, so the floor maps to a direction perturbation of
    sigma = scale * accel floor / 9.81 before re-normalization.
    """
    if scale < 0:
        raise ValueError("noise scale must be >= 0")
    if scale == 0.0:
        return ImuWindow(window.data.copy(), window.frame_timestamp,
                         list(window.channel_map))
    floor = floor or NoiseModel()
    rng = np.random.default_rng(seed)
    sigma = np.array([floor.gyro_sigma if kind == "gyro"
                      else floor.accel_sigma / GRAVITY_MAG
                      for _, kind in window.channel_map])
    data = window.data + scale * sigma[None, :, None] * rng.standard_normal(window.data.shape)
    grav = [i for i, (_, kind) in enumerate(window.channel_map) if kind == "gravity"]
    norms = np.linalg.norm(data[:, grav, :], axis=-1, keepdims=True)
    data[:, grav, :] /= np.maximum(norms, 1e-12)
    return ImuWindow(data, window.frame_timestamp, list(window.channel_map))


def augment_observation(raster: np.ndarray, noise_sigma: float, gamma: float,
                        seed) -> np.ndarray:
    """Gamma curve then additive pixel noise, clamped to [0, 1].

    noise_sigma is on the unit scale (i.e. native 10/255); gamma must be
    positive. Deterministic per seed.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    out = np.clip(raster.astype(np.float64), 0.0, 1.0) ** gamma
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        out = out + rng.normal(0.0, noise_sigma, out.shape)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# Sample assembly
# ---------------------------------------------------------------------------

def build_samples(seq: CaptureSequence, layout: SensorLayout,
                  skeleton: HandSkeleton, cfg: PipelineConfig,
                  frame_stride: int = 1) -> list[AlignedSample]:
    """Aligned, windowed samples for one sequence, in frame order.

    Applies the configured temporal shift (windows extracted as if frames
    occurred at frame_ts + dt) and window-level noise injection. Frames
    without enough IMU history, or whose shifted target falls outside the
    stream, are skipped.
    """
    cfg.validate()
    cmap = channel_map_for(layout, cfg.excluded_gyro_sensor)
    dt_imu = float(np.mean(np.diff(seq.imu_ts)))
    gravity = gravity_streams(seq.imu_gyro, seq.imu_accel, dt_imu, cfg.gravity_blend)
    occl_f = seq.occluded_fingers(skeleton)
    out: list[AlignedSample] = []
    for f in range(0, seq.n_frames, frame_stride):
        target = float(seq.frame_ts[f]) + cfg.time_shift
        idx = align_frame(target, seq.imu_ts)
        if abs(seq.imu_ts[idx] - target) > 0.75 * dt_imu:
            continue  # shifted beyond the recorded stream
        try:
            window = extract_window(idx, seq.imu_gyro, gravity, seq.imu_ts,
                                    cmap, cfg.window_inclusive)
        except WarmupError:
            continue
        if cfg.noise_scale > 0:
            ss = np.random.SeedSequence([cfg.noise_seed, seq.meta["seq_index"], f])
            window = inject_noise(window, cfg.noise_scale, ss, cfg.noise_floor)
        out.append(AlignedSample(
            window=window,
            raster=seq.rasters[f],
            visibility=seq.visibility[f],
            pose=seq.gt_pose(f),
            regime=seq.regime,
            seq_id=seq.seq_id,
            frame_index=f,
            frame_ts=float(seq.frame_ts[f]),
            occl_landmarks=seq.occl_landmarks[f],
            occl_fingers=occl_f[f],
        ))
    return out


def shift_alignment(seq: CaptureSequence, layout: SensorLayout,
                    skeleton: HandSkeleton, cfg: PipelineConfig,
                    dt: float, frame_stride: int = 1) -> list[AlignedSample]:
    """build_samples with the alignment shifted by dt seconds."""
    shifted = replace(cfg, time_shift=dt)
    return build_samples(seq, layout, skeleton, shifted, frame_stride)
