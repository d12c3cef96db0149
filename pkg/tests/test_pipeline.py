"""Alignment, windowing, gravity filtering, and perturbation tests."""

import numpy as np
import pytest

from fusetrack.configio import ConfigError
from fusetrack.dataset import DatasetConfig, generate_sequence
from fusetrack.imusim import ImuSample, NoiseModel
from fusetrack.layout import default_layout
from fusetrack.pipeline import (
    N_CHANNELS,
    WINDOW_LEN,
    AlignedSample,
    ImuWindow,
    PipelineConfig,
    WarmupError,
    align_frame,
    augment_observation,
    build_samples,
    channel_map_for,
    estimate_gravity,
    extract_window,
    gravity_filter,
    gravity_streams,
    inject_noise,
    shift_alignment,
)
from fusetrack.rotations import rotvec_to_matrix
from fusetrack.skeleton import default_skeleton

SKEL = default_skeleton()
LAYOUT = default_layout(SKEL)
CMAP = channel_map_for(LAYOUT)


@pytest.fixture(scope="module")
def short_seq():
    cfg = DatasetConfig(duration_s=3.0, master_seed=4242)
    return cfg, generate_sequence(cfg, index=1, regime="partial_grasp",
                                  skeleton=SKEL, layout=LAYOUT)


def synthetic_streams(n=40, n_sensors=12):
    """gyro[k, s] = [k, s, 0]; gravity = sensor-distinct unit vectors."""
    gyro = np.zeros((n, n_sensors, 3))
    gyro[:, :, 0] = np.arange(n)[:, None]
    gyro[:, :, 1] = np.arange(n_sensors)[None, :]
    grav = np.zeros((n, n_sensors, 3))
    theta = 0.1 * np.arange(n_sensors)
    grav[:, :, 0] = np.sin(theta)[None, :]
    grav[:, :, 2] = np.cos(theta)[None, :]
    ts = np.arange(n) / 200.0
    return gyro, grav, ts


# ---------------------------------------------------------------------------
# Alignment
# ---------------------------------------------------------------------------

def test_align_frame_nearest_and_ties():
    ts = np.arange(100) * 0.005
    assert align_frame(0.1003, ts) == 20
    assert align_frame(0.1025, ts) == 20   # exact midpoint goes earlier
    assert align_frame(0.1026, ts) == 21
    assert align_frame(0.100, ts) == 20    # exact hit
    assert align_frame(-5.0, ts) == 0
    assert align_frame(99.0, ts) == 99


def test_align_frame_brute_force_oracle():
    rng = np.random.default_rng(3)
    ts = np.cumsum(rng.uniform(0.003, 0.007, 300))
    for t in rng.uniform(ts[0] - 0.01, ts[-1] + 0.01, 500):
        # argmin returns the first (earlier) index on ties
        assert align_frame(t, ts) == int(np.argmin(np.abs(ts - t)))


# ---------------------------------------------------------------------------
# Window extraction
# ---------------------------------------------------------------------------

def test_extract_window_channel_slots():
    gyro, grav, ts = synthetic_streams()
    w = extract_window(20, gyro, grav, ts, CMAP)
    w.validate()
    assert w.frame_timestamp == ts[20]
    for c, (sensor, kind) in enumerate(CMAP):
        if kind == "gravity":
            expect = np.array([np.sin(0.1 * sensor), 0.0, np.cos(0.1 * sensor)])
            assert np.array_equal(w.data[:, c, :], np.tile(expect, (WINDOW_LEN, 1)))
        else:
            assert np.array_equal(w.data[:, c, 0], np.arange(7, 21))  # rows 7..20
            assert np.all(w.data[:, c, 1] == sensor)


def test_extract_window_warmup_boundary():
    gyro, grav, ts = synthetic_streams()
    with pytest.raises(WarmupError):
        extract_window(12, gyro, grav, ts, CMAP)
    w = extract_window(13, gyro, grav, ts, CMAP)
    assert w.data[0, 12, 0] == 0.0 and w.data[-1, 12, 0] == 13.0

    with pytest.raises(WarmupError):
        extract_window(13, gyro, grav, ts, CMAP, inclusive=False)
    w = extract_window(14, gyro, grav, ts, CMAP, inclusive=False)
    assert w.data[0, 12, 0] == 0.0 and w.data[-1, 12, 0] == 13.0


def test_window_validate_rejects_bad():
    gyro, grav, ts = synthetic_streams()
    w = extract_window(20, gyro, grav, ts, CMAP)
    bad = ImuWindow(w.data[:10], w.frame_timestamp, w.channel_map)
    with pytest.raises(ValueError):
        bad.validate()
    data = w.data.copy()
    data[3, 2, :] *= 1.5  # de-normalize one gravity row
    with pytest.raises(ValueError):
        ImuWindow(data, w.frame_timestamp, w.channel_map).validate()


def test_channel_map_layout():
    assert len(CMAP) == N_CHANNELS == 23
    assert CMAP[:12] == [(s, "gravity") for s in range(12)]
    skip = LAYOUT.sensor_index("hand_back")
    assert [s for s, k in CMAP[12:]] == [s for s in range(12) if s != skip]
    assert all(k == "gyro" for _, k in CMAP[12:])
    with pytest.raises(ConfigError):
        channel_map_for(LAYOUT, excluded_gyro="elbow")


# ---------------------------------------------------------------------------
# Gravity filter
# ---------------------------------------------------------------------------

def test_gravity_static_exact():
    n = 200  # 1 s at 200 Hz
    gyro = np.zeros((n, 3))
    accel = np.tile([0.0, 0.0, 9.81], (n, 1))
    g = gravity_filter(gyro, accel, dt=0.005)
    assert np.abs(g - [0, 0, 1]).max() < 1e-12
    # contract: within 1e-3 of normalize(accel) after 0.5 s
    assert np.linalg.norm(g[100:] - [0, 0, 1], axis=1).max() < 1e-3


def test_gravity_rotating_matches_propagated_truth():
    omega = np.array([0.8, -0.4, 0.3])
    dt = 0.005
    n = 400  # 2 s
    truth = np.empty((n, 3))
    accel = np.empty((n, 3))
    R = np.eye(3)
    for i in range(n):
        truth[i] = R.T @ [0, 0, 1]
        accel[i] = R.T @ [0, 0, 9.81]
        R = R @ rotvec_to_matrix(omega * dt)
    g = gravity_filter(np.tile(omega, (n, 1)), accel, dt)
    cosang = np.clip(np.sum(g * truth, axis=1), -1, 1)
    ang = np.degrees(np.arccos(cosang))
    assert ang[100:].max() < 1.0  # after 0.5 s warmup


def test_gravity_perturbed_init_decays():
    n = 400
    gyro = np.zeros((n, 3))
    accel = np.tile([0.0, 0.0, 9.81], (n, 1))
    accel[0] = 9.81 * np.array([np.sin(1.0), 0.0, np.cos(1.0)])  # 57 deg off
    g = gravity_filter(gyro, accel, dt=0.005)
    err = np.arccos(np.clip(g[:, 2], -1, 1))
    assert err[200] < 0.03          # mostly recovered after 1 s
    assert err[200] < err[20] / 5.0 # and strictly contracting


def test_gravity_zero_norm_accel_guard():
    n = 100
    gyro = np.tile([0.0, 0.5, 0.0], (n, 1))
    accel = np.tile([0.0, 0.0, 9.81], (n, 1))
    accel[40:60] = 0.0
    g = gravity_filter(gyro, accel, dt=0.005)
    assert np.all(np.isfinite(g))
    assert np.abs(np.linalg.norm(g, axis=1) - 1).max() < 1e-12


def test_estimate_gravity_sample_list():
    n = 50
    samples = [ImuSample(timestamp=i / 200.0, sensor_id=3,
                         gyro=np.array([0.1, 0.0, 0.0]),
                         accel=np.array([0.0, 1.0, 9.7]))
               for i in range(n)]
    g = estimate_gravity(samples)
    ref = gravity_filter(np.tile([0.1, 0, 0], (n, 1)),
                         np.tile([0, 1.0, 9.7], (n, 1)), dt=0.005)
    assert np.array_equal(g, ref)
    mixed = samples[:10] + [ImuSample(0.1, 4, samples[0].gyro, samples[0].accel)]
    with pytest.raises(ValueError):
        estimate_gravity(mixed)
    with pytest.raises(ValueError):
        estimate_gravity([])


# ---------------------------------------------------------------------------
# Noise injection
# ---------------------------------------------------------------------------

def base_window():
    gyro, grav, ts = synthetic_streams()
    gyro *= 0.01
    return extract_window(25, gyro, grav, ts, CMAP)


def test_inject_noise_zero_scale_identity():
    w = base_window()
    out = inject_noise(w, 0.0, seed=99)
    assert np.array_equal(out.data, w.data)
    assert out.data is not w.data
    assert out.frame_timestamp == w.frame_timestamp


def test_inject_noise_gyro_std_within_two_percent():
    w = base_window()
    scale = 1.3
    floor = NoiseModel()
    diffs = []
    for seed in range(260):  # 260 * 14 * 11 * 3 > 1.2e5 scalar draws
        out = inject_noise(w, scale, seed=seed, floor=floor)
        diffs.append((out.data - w.data)[:, 12:, :].ravel())
    std = np.concatenate(diffs).std()
    assert abs(std - scale * floor.gyro_sigma) / (scale * floor.gyro_sigma) < 0.02


def test_inject_noise_gravity_rows_stay_unit_and_move():
    w = base_window()
    out1 = inject_noise(w, 1.0, seed=5)
    out2 = inject_noise(w, 2.0, seed=5)
    for out in (out1, out2):
        norms = np.linalg.norm(out.data[:, :12, :], axis=-1)
        assert np.abs(norms - 1).max() < 1e-12

    def mean_angle(out):
        dots = np.clip(np.sum(out.data[:, :12, :] * w.data[:, :12, :], -1), -1, 1)
        return np.arccos(dots).mean()

    a1, a2 = mean_angle(out1), mean_angle(out2)
    assert a1 > 0
    assert 1.6 < a2 / a1 < 2.4  # roughly linear in scale for small noise


def test_inject_noise_deterministic_per_seed():
    w = base_window()
    a = inject_noise(w, 1.0, seed=123)
    b = inject_noise(w, 1.0, seed=123)
    c = inject_noise(w, 1.0, seed=124)
    assert np.array_equal(a.data, b.data)
    assert not np.array_equal(a.data, c.data)


def test_inject_noise_negative_scale_rejected():
    with pytest.raises(ValueError):
        inject_noise(base_window(), -0.1, seed=0)


# ---------------------------------------------------------------------------
# Image augmentation
# ---------------------------------------------------------------------------

def test_augment_gamma_oracle():
    raster = np.full((32, 32), 0.25, dtype=np.float32)
    out = augment_observation(raster, noise_sigma=0.0, gamma=2.0, seed=0)
    assert np.all(out == np.float32(0.0625))
    same = augment_observation(raster, noise_sigma=0.0, gamma=1.0, seed=0)
    assert np.array_equal(same, raster)
    with pytest.raises(ValueError):
        augment_observation(raster, noise_sigma=0.0, gamma=0.0, seed=0)


def test_augment_noise_std_within_five_percent():
    raster = np.full((256, 256), 0.5, dtype=np.float32)
    sigma = 10.0 / 255.0
    out = augment_observation(raster, noise_sigma=sigma, gamma=1.0, seed=11)
    std = (out.astype(np.float64) - 0.5).std()
    assert abs(std - sigma) / sigma < 0.05


def test_augment_clamps_and_reproduces():
    rng = np.random.default_rng(0)
    raster = rng.uniform(0.8, 1.0, (32, 32)).astype(np.float32)
    a = augment_observation(raster, noise_sigma=0.5, gamma=0.7, seed=2)
    b = augment_observation(raster, noise_sigma=0.5, gamma=0.7, seed=2)
    assert np.array_equal(a, b)
    assert a.max() <= 1.0 and a.min() >= 0.0
    assert a.dtype == np.float32


# ---------------------------------------------------------------------------
# Sample assembly on a generated sequence
# ---------------------------------------------------------------------------

def test_build_samples_exact_count(short_seq):
    _, seq = short_seq
    samples = build_samples(seq, LAYOUT, SKEL, PipelineConfig())
    # frames 0..3 align to IMU indices 0, 3, 7, 10: all short of 14 samples
    assert seq.n_frames == 181
    assert len(samples) == 181 - 4
    assert samples[0].frame_index == 4
    assert [s.frame_index for s in samples] == list(range(4, 181))


def test_build_samples_timestamp_contract(short_seq):
    _, seq = short_seq
    for s in build_samples(seq, LAYOUT, SKEL, PipelineConfig()):
        idx = align_frame(s.frame_ts, seq.imu_ts)
        assert s.window.frame_timestamp == seq.imu_ts[idx]
        s.window.validate()


def test_build_samples_window_content(short_seq):
    _, seq = short_seq
    cfg = PipelineConfig()
    samples = build_samples(seq, LAYOUT, SKEL, cfg)
    grav = gravity_streams(seq.imu_gyro, seq.imu_accel, 1.0 / 200.0)
    pick = samples[40]
    idx = align_frame(pick.frame_ts, seq.imu_ts)
    ref = extract_window(idx, seq.imu_gyro, grav, seq.imu_ts, CMAP)
    assert np.array_equal(pick.window.data, ref.data)
    assert pick.pose.angles.shape == (22,)
    assert pick.raster.shape == (32, 32)
    assert pick.occl_fingers.shape == (5,)


def test_build_samples_gravity_tracks_wrist_attitude(short_seq):
    _, seq = short_seq
    samples = build_samples(seq, LAYOUT, SKEL, PipelineConfig())
    angs = []
    for s in samples:
        g_est = s.window.data[-1, 0, :]              # wrist sensor gravity slot
        g_true = s.pose.wrist_rotation.T @ [0, 0, 1]  # sensor frame == root frame
        angs.append(np.degrees(np.arccos(np.clip(g_est @ g_true, -1, 1))))
    angs = np.array(angs)
    assert np.median(angs) < 5.0
    assert angs.max() < 25.0


def test_shift_alignment_plus_one_sample(short_seq):
    _, seq = short_seq
    plain = build_samples(seq, LAYOUT, SKEL, PipelineConfig())
    shifted = shift_alignment(seq, LAYOUT, SKEL, PipelineConfig(), dt=+0.005)
    # the final frame's shifted target falls past the stream end
    assert len(shifted) == len(plain) - 1
    by_frame = {s.frame_index: s for s in plain}
    for s in shifted:
        ref = by_frame[s.frame_index]
        i_ref = int(round(ref.window.frame_timestamp * 200))
        i_new = int(round(s.window.frame_timestamp * 200))
        assert i_new == i_ref + 1


def test_shift_alignment_minus_point_four(short_seq):
    _, seq = short_seq
    plain = build_samples(seq, LAYOUT, SKEL, PipelineConfig())
    shifted = shift_alignment(seq, LAYOUT, SKEL, PipelineConfig(), dt=-0.4)
    by_frame = {s.frame_index: s for s in plain}
    assert shifted[0].frame_index == 28  # 80 samples of history pushed past warmup
    assert len(shifted) == 181 - 28
    for s in shifted:
        i_ref = int(round(by_frame[s.frame_index].window.frame_timestamp * 200))
        i_new = int(round(s.window.frame_timestamp * 200))
        assert i_new == i_ref - 80


def test_shift_alignment_zero_is_identity(short_seq):
    _, seq = short_seq
    plain = build_samples(seq, LAYOUT, SKEL, PipelineConfig())
    shifted = shift_alignment(seq, LAYOUT, SKEL, PipelineConfig(), dt=0.0)
    assert len(plain) == len(shifted)
    for a, b in zip(plain, shifted):
        assert np.array_equal(a.window.data, b.window.data)
        assert a.frame_index == b.frame_index


def test_shift_alignment_bound_enforced(short_seq):
    _, seq = short_seq
    for dt in (0.41, -0.5):
        with pytest.raises(ConfigError):
            shift_alignment(seq, LAYOUT, SKEL, PipelineConfig(), dt=dt)


def test_build_samples_noise_scale_wiring(short_seq):
    _, seq = short_seq
    clean = build_samples(seq, LAYOUT, SKEL, PipelineConfig(noise_scale=0.0))
    n1 = build_samples(seq, LAYOUT, SKEL, PipelineConfig(noise_scale=1.0))
    n2 = build_samples(seq, LAYOUT, SKEL, PipelineConfig(noise_scale=1.0))
    assert np.array_equal(n1[0].window.data, n2[0].window.data)  # seeded per frame
    assert not np.array_equal(n1[0].window.data, clean[0].window.data)
    n1[0].window.validate()


def test_build_samples_frame_stride(short_seq):
    _, seq = short_seq
    samples = build_samples(seq, LAYOUT, SKEL, PipelineConfig(), frame_stride=3)
    assert [s.frame_index for s in samples] == list(range(6, 181, 3))


def test_aligned_sample_fields(short_seq):
    _, seq = short_seq
    s = build_samples(seq, LAYOUT, SKEL, PipelineConfig())[0]
    assert isinstance(s, AlignedSample)
    assert s.regime == "partial_grasp"
    assert s.seq_id == "seq_0001"
    assert s.visibility.dtype == bool and s.visibility.shape == (21,)
    assert s.occl_landmarks.shape == (21,)
