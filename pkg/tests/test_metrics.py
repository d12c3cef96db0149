"""Metric definitions against independent oracles and hand-computed values."""

import csv
import json
import math

import numpy as np
import pytest
from scipy.optimize import least_squares
from scipy.spatial.transform import Rotation as ScipyRot

from fusetrack import metrics as M
from fusetrack.skeleton import HandPose, default_skeleton, forward_kinematics

from helpers import oracle_forward_kinematics, random_pose, random_rotation

SKEL = default_skeleton()


def random_cloud(rng, n=21, spread=0.08):
    return rng.normal(scale=spread, size=(n, 3))


# ---------------------------------------------------------------------------
# MKPE family
# ---------------------------------------------------------------------------

def test_mkpe_zero_for_identical():
    lm = forward_kinematics(SKEL, HandPose.identity())
    assert M.mkpe(lm, lm) == 0.0


def test_mkpe_uniform_offset_is_offset_length():
    lm = forward_kinematics(SKEL, HandPose.identity())
    assert M.mkpe(lm + np.array([0.003, 0.0, 0.0]), lm) == pytest.approx(3.0)


def test_mkpe_matches_pointwise_sum():
    rng = np.random.default_rng(11)
    pred, gt = random_cloud(rng), random_cloud(rng)
    hand = sum(math.dist(p, g) for p, g in zip(pred, gt)) / len(pred) * 1000.0
    assert M.mkpe(pred, gt) == pytest.approx(hand, rel=1e-12)


def test_mkpe_symmetric():
    rng = np.random.default_rng(12)
    pred, gt = random_cloud(rng), random_cloud(rng)
    assert M.mkpe(pred, gt) == pytest.approx(M.mkpe(gt, pred), rel=1e-12)


def test_mkpe_scales_linearly_about_gt():
    rng = np.random.default_rng(13)
    pred, gt = random_cloud(rng), random_cloud(rng)
    base = M.mkpe(pred, gt)
    for s in (0.25, 2.0, 7.5):
        scaled = gt + s * (pred - gt)
        assert M.mkpe(scaled, gt) == pytest.approx(s * base, rel=1e-9)


def test_mkpe_rejects_mismatched_shapes():
    with pytest.raises(ValueError, match="shape"):
        M.mkpe(np.zeros((21, 3)), np.zeros((20, 3)))


def test_fingertip_perturbation_hand_values():
    # one of five tips off by 5 mm: tips average 1.0 mm, all-21 average 5/21
    lm = forward_kinematics(SKEL, HandPose.identity())
    pred = lm.copy()
    pred[SKEL.fingertips[1]] += np.array([0.0, 0.0, 0.005])
    assert M.fingertip_mkpe(pred, lm, SKEL.fingertips) == pytest.approx(1.0)
    assert M.mkpe(pred, lm) == pytest.approx(5.0 / 21.0)


def test_fingertip_bad_indices_raise():
    lm = forward_kinematics(SKEL, HandPose.identity())
    with pytest.raises(ValueError, match="indices"):
        M.fingertip_mkpe(lm, lm, [4, 8, 99])
    with pytest.raises(ValueError, match="indices"):
        M.fingertip_mkpe(lm, lm, [])


# ---------------------------------------------------------------------------
# Root-transformed landmarks
# ---------------------------------------------------------------------------

def test_root_transform_matches_fk_oracle():
    rng = np.random.default_rng(21)
    pred = random_pose(SKEL, rng, wrist=True)
    gt = random_pose(SKEL, rng, wrist=True)
    swapped = HandPose(pred.angles, gt.wrist_rotation, gt.wrist_translation)
    expect = oracle_forward_kinematics(SKEL, swapped)
    np.testing.assert_allclose(M.root_transform(pred, gt, SKEL), expect,
                               atol=1e-12)


def test_wrist_only_error_vanishes_under_root_transform():
    rng = np.random.default_rng(22)
    gt = random_pose(SKEL, rng, wrist=True)
    pred = HandPose(gt.angles, random_rotation(rng), gt.wrist_translation + 0.05)
    gt_lm = forward_kinematics(SKEL, gt)
    mkpe_t = M.mkpe(M.root_transform(pred, gt, SKEL), gt_lm)
    mkpe_w = M.mkpe(forward_kinematics(SKEL, pred), gt_lm)
    assert mkpe_t < 1e-9
    assert mkpe_w > 1.0
    assert mkpe_t <= mkpe_w


# ---------------------------------------------------------------------------
# PCK-AUC
# ---------------------------------------------------------------------------

def test_pck_auc_perfect_is_100():
    lm = forward_kinematics(SKEL, HandPose.identity())
    assert M.pck_auc(lm, lm) == pytest.approx(100.0)


def test_pck_auc_all_beyond_range_is_zero():
    lm = forward_kinematics(SKEL, HandPose.identity())
    assert M.pck_auc(lm + 1.0, lm) == 0.0


def test_pck_auc_single_keypoint_hand_trapezoid():
    # error exactly 25 mm: curve is 0 on [0,24], 1 on [25,50];
    # area = 24*0 + (0+1)/2 + 25*1 = 25.5 of 50 -> 51%
    pred = np.array([[0.025, 0.0, 0.0]])
    gt = np.zeros((1, 3))
    assert M.pck_auc(pred, gt) == pytest.approx(51.0)


def test_pck_auc_matches_manual_trapezoid():
    rng = np.random.default_rng(31)
    pred, gt = random_cloud(rng, spread=0.02), random_cloud(rng, spread=0.02)
    errs = [math.dist(p, g) * 1000.0 for p, g in zip(pred, gt)]
    thr = list(range(51))
    frac = [sum(e <= t for e in errs) / len(errs) for t in thr]
    area = sum((frac[i] + frac[i + 1]) / 2.0 for i in range(50))
    assert M.pck_auc(pred, gt) == pytest.approx(area / 50.0 * 100.0, rel=1e-12)


def test_pck_auc_monotone_in_single_error():
    rng = np.random.default_rng(32)
    gt = random_cloud(rng, spread=0.01)
    pred = gt + rng.normal(scale=0.004, size=gt.shape)
    prev = M.pck_auc(pred, gt)
    k = 7
    direction = pred[k] - gt[k]
    direction /= np.linalg.norm(direction)
    for grow in (0.002, 0.01, 0.04, 0.2):
        worse = pred.copy()
        worse[k] += grow * direction
        cur = M.pck_auc(worse, gt)
        assert cur <= prev + 1e-12
        prev = cur


# ---------------------------------------------------------------------------
# Procrustes alignment
# ---------------------------------------------------------------------------

def _similarity(rng, pts, scale=None):
    s = scale if scale is not None else rng.uniform(0.5, 2.0)
    R = random_rotation(rng)
    t = rng.normal(size=3)
    return s * pts @ R.T + t


def test_procrustes_recovers_similarity_copy():
    rng = np.random.default_rng(41)
    gt = random_cloud(rng)
    pred = _similarity(rng, gt)
    aligned = M.procrustes_align(pred, gt)
    assert np.abs(aligned - gt).max() < 1e-9


def test_procrustes_linear_part_is_proper_rotation():
    # even for a reflected cloud the fitted map must keep det > 0
    rng = np.random.default_rng(42)
    gt = random_cloud(rng)
    mirrored = gt * np.array([-1.0, 1.0, 1.0])
    aligned = M.procrustes_align(mirrored, gt)
    A = np.column_stack([mirrored, np.ones(len(gt))])
    L, *_ = np.linalg.lstsq(A, aligned, rcond=None)
    linear = L[:3].T
    assert np.linalg.det(linear) > 0.0
    s = np.cbrt(np.linalg.det(linear))
    np.testing.assert_allclose(linear @ linear.T, s * s * np.eye(3), atol=1e-9)


def test_procrustes_degenerate_inputs_raise():
    rng = np.random.default_rng(43)
    line = np.outer(np.linspace(0.0, 1.0, 9), np.array([1.0, 2.0, -0.5]))
    with pytest.raises(ValueError, match="degenerate"):
        M.procrustes_align(line, random_cloud(rng, n=9))
    with pytest.raises(ValueError, match="degenerate"):
        M.procrustes_align(random_cloud(rng, n=9), line)
    with pytest.raises(ValueError, match="3 points"):
        M.procrustes_align(np.zeros((2, 3)), np.zeros((2, 3)))


def _brute_force_pa(pred, gt):
    """Best similarity fit by Levenberg-Marquardt from several starts."""
    def residual(x):
        R = ScipyRot.from_rotvec(x[:3]).as_matrix()
        mapped = math.exp(x[3]) * pred @ R.T + x[4:]
        return (mapped - gt).ravel()

    rng = np.random.default_rng(0)
    best = None
    starts = [np.zeros(7)] + [
        np.concatenate([rng.uniform(-np.pi, np.pi, 3), [0.0], np.zeros(3)])
        for _ in range(6)]
    for x0 in starts:
        sol = least_squares(residual, x0, method="lm", xtol=1e-15, ftol=1e-15)
        if best is None or sol.cost < best.cost:
            best = sol
    R = ScipyRot.from_rotvec(best.x[:3]).as_matrix()
    mapped = math.exp(best.x[3]) * pred @ R.T + best.x[4:]
    return float(np.linalg.norm(mapped - gt, axis=1).mean() * 1000.0)


def test_pa_mpjpe_matches_brute_force_minimizer():
    rng = np.random.default_rng(44)
    gt = random_cloud(rng)
    pred = _similarity(rng, gt) + rng.normal(scale=0.01, size=gt.shape)
    closed = M.pa_mpjpe(pred, gt)
    brute = _brute_force_pa(pred, gt)
    assert closed == pytest.approx(brute, abs=1e-6)
    # closed form is the global optimum; the search cannot beat it
    assert brute >= closed - 1e-9


def test_pa_mpjpe_zero_for_rigid_copy():
    rng = np.random.default_rng(45)
    gt = random_cloud(rng)
    assert M.pa_mpjpe(gt, gt) < 1e-12
    assert M.pa_mpjpe(_similarity(rng, gt, scale=1.0), gt) < 1e-9


def test_pa_mpjpe_invariant_under_similarity_of_pred():
    rng = np.random.default_rng(46)
    gt = random_cloud(rng)
    pred = gt + rng.normal(scale=0.01, size=gt.shape)
    base = M.pa_mpjpe(pred, gt)
    for _ in range(5):
        again = M.pa_mpjpe(_similarity(rng, pred), gt)
        assert abs(again - base) < 1e-9


# ---------------------------------------------------------------------------
# Capsule sampling and PA-MPVPE
# ---------------------------------------------------------------------------

def test_capsule_points_lie_on_bones():
    rng = np.random.default_rng(51)
    lm = forward_kinematics(SKEL, random_pose(SKEL, rng))
    pts = M.capsule_points(lm, SKEL)
    assert pts.shape == (100, 3)
    np.testing.assert_array_equal(pts, M.capsule_points(lm, SKEL))
    for i, (a, b) in enumerate(SKEL.bones):
        for j, f in enumerate(M.CAPSULE_FRACTIONS):
            expect = (1.0 - f) * lm[a] + f * lm[b]
            np.testing.assert_allclose(pts[i * 5 + j], expect, atol=1e-15)


def test_pa_mpvpe_zero_for_rigid_copy():
    rng = np.random.default_rng(52)
    lm = forward_kinematics(SKEL, random_pose(SKEL, rng))
    moved = _similarity(rng, lm, scale=1.0)
    v = M.pa_mpvpe(M.capsule_points(moved, SKEL), M.capsule_points(lm, SKEL))
    assert v < 1e-9
    assert M.pa_mpvpe(M.capsule_points(lm, SKEL),
                      M.capsule_points(lm, SKEL)) < 1e-12


# ---------------------------------------------------------------------------
# F-score
# ---------------------------------------------------------------------------

def test_f_score_identical_is_one():
    rng = np.random.default_rng(61)
    pts = random_cloud(rng)
    assert M.f_score(pts, pts, 5.0) == 1.0


def test_f_score_all_far_is_zero():
    rng = np.random.default_rng(62)
    pts = random_cloud(rng, spread=0.005)
    assert M.f_score(pts, pts + 1.0, 5.0) == 0.0


def test_f_score_hand_counted_mixed_case():
    # precision: pred 0,1 are within 5 mm of a gt point, 2,3 are not -> 1/2
    # recall: gt 0,1 are covered, gt 2 is not -> 2/3; F = 4/7
    pred = np.array([[0.0, 0.0, 0.0], [0.010, 0.0, 0.0],
                     [0.0, 0.030, 0.0], [0.1, 0.1, 0.1]])
    gt = np.array([[0.0, 0.0, 0.001], [0.010, 0.0, 0.002], [0.05, 0.05, 0.05]])
    assert M.f_score(pred, gt, 5.0) == pytest.approx(4.0 / 7.0)


def test_f_score_monotone_in_tau():
    rng = np.random.default_rng(63)
    pred = random_cloud(rng, spread=0.02)
    gt = random_cloud(rng, spread=0.02)
    vals = [M.f_score(pred, gt, tau) for tau in np.linspace(0.0, 60.0, 25)]
    assert all(b >= a - 1e-12 for a, b in zip(vals, vals[1:]))


def test_f_score_rejects_empty():
    with pytest.raises(ValueError, match="empty"):
        M.f_score(np.zeros((0, 3)), np.zeros((1, 3)), 5.0)


# ---------------------------------------------------------------------------
# Angle errors and CDF
# ---------------------------------------------------------------------------

def test_joint_angle_errors_unit_conversion():
    errs = M.joint_angle_errors(np.full(22, 0.1), np.zeros(22))
    np.testing.assert_allclose(errs, 5.729577951308233, rtol=1e-12)
    assert M.joint_angle_errors(np.zeros(22), np.zeros(22)).max() == 0.0


def test_joint_angle_errors_match_loop_oracle():
    rng = np.random.default_rng(71)
    a, b = rng.normal(size=22), rng.normal(size=22)
    hand = [abs(x - y) * 180.0 / math.pi for x, y in zip(a, b)]
    np.testing.assert_allclose(M.joint_angle_errors(a, b), hand, rtol=1e-12)


def test_joint_angle_errors_reject_wrong_shape():
    with pytest.raises(ValueError, match="22"):
        M.joint_angle_errors(np.zeros(21), np.zeros(22))


def test_error_cdf_all_zero_saturates():
    out = M.error_cdf(np.zeros(40))
    np.testing.assert_array_equal(out, 100.0)


def test_error_cdf_empty_raises():
    with pytest.raises(ValueError, match="empty"):
        M.error_cdf([])


def test_error_cdf_matches_sort_and_count():
    rng = np.random.default_rng(72)
    errs = rng.uniform(0.0, 25.0, size=200)
    thr = np.array([0.0, 5.0, 12.5, 30.0])
    hand = [sum(e <= t for e in errs) / len(errs) * 100.0 for t in thr]
    np.testing.assert_allclose(M.error_cdf(errs, thr), hand, rtol=1e-12)


# ---------------------------------------------------------------------------
# Frame bundles and report plumbing
# ---------------------------------------------------------------------------

def _two_poses(seed):
    rng = np.random.default_rng(seed)
    gt = random_pose(SKEL, rng, wrist=True)
    pred = HandPose(np.clip(gt.angles + rng.normal(scale=0.03, size=22),
                            -0.3, 1.8),
                    gt.wrist_rotation, gt.wrist_translation + 0.002)
    return pred, gt


def test_frame_metrics_key_sets_follow_translation_flag():
    pred, gt = _two_poses(81)
    full = M.frame_metrics(pred, gt, SKEL, translation_valid=True)
    assert set(full) == set(M.WORLD_METRICS) | set(M.ROOT_METRICS)
    rel = M.frame_metrics(pred, gt, SKEL, translation_valid=False)
    assert set(rel) == set(M.ROOT_METRICS) | {"PA-MPJPE", "PA-MPVPE"}
    for name in ("MKPE", "F.MKPE", "PCK-AUC", "F@5", "F@15"):
        assert name not in rel


def test_report_aggregate_is_column_mean():
    samples = [M.frame_metrics(*_two_poses(s), SKEL) for s in (82, 83, 84)]
    dof = np.abs(np.random.default_rng(85).normal(size=(3, 22)))
    rep = M.build_report(["a", "b", "c"], samples, dof)
    for i, c in enumerate(rep.columns):
        assert rep.aggregate[c] == pytest.approx(rep.rows[:, i].mean())


def test_report_validate_rejects_out_of_range():
    samples = [M.frame_metrics(*_two_poses(86), SKEL)]
    rep = M.build_report(["a"], samples, np.zeros((1, 22)))
    rep.rows[0, rep.columns.index("MKPE")] = -1.0
    with pytest.raises(ValueError, match="negative"):
        rep.validate()
    rep.rows[0, rep.columns.index("MKPE")] = 1.0
    rep.rows[0, rep.columns.index("F@5")] = 1.5
    with pytest.raises(ValueError, match="F@5"):
        rep.validate()


def test_build_report_rejects_inconsistent_columns():
    pred, gt = _two_poses(87)
    a = M.frame_metrics(pred, gt, SKEL, translation_valid=True)
    b = M.frame_metrics(pred, gt, SKEL, translation_valid=False)
    with pytest.raises(ValueError, match="columns"):
        M.build_report(["a", "b"], [a, b], np.zeros((2, 22)))


def test_report_csv_roundtrip_and_header_note(tmp_path):
    samples = [M.frame_metrics(*_two_poses(s), SKEL) for s in (88, 89)]
    rep = M.build_report(["s0", "s1"], samples, np.ones((2, 22)))
    path = tmp_path / "metrics.csv"
    M.write_report_csv(rep, path)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# PA-MPVPE over 100 capsule points")
    body = [l for l in lines if not l.startswith("#")]
    rows = list(csv.reader(body))
    assert rows[0] == ["sample"] + rep.columns
    assert [r[0] for r in rows[1:]] == ["s0", "s1", "aggregate"]
    got = np.array([[float(v) for v in r[1:]] for r in rows[1:3]])
    np.testing.assert_allclose(got, rep.rows, atol=1e-6)
    footer = np.array([float(v) for v in rows[3][1:]])
    np.testing.assert_allclose(footer, rep.rows.mean(axis=0), atol=1e-6)


def test_summary_json_keyed_by_metric(tmp_path):
    samples = [M.frame_metrics(*_two_poses(90), SKEL)]
    rep = M.build_report(["s0"], samples, np.full((1, 22), 2.0))
    path = tmp_path / "summary.json"
    M.write_summary(rep, path)
    data = json.loads(path.read_text())
    assert set(data["metrics"]) == set(rep.columns)
    assert data["n_samples"] == 1
    assert len(data["dof_degrees_mean"]) == 22
    assert any("capsule" in n for n in data["notes"])
