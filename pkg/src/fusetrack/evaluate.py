"""Evaluation, per-sensor ablation, and sensitivity sweeps.

Five methods share one protocol: the three network modes (fused,
vision_only, imu_only), the classical IMU-only tracker, and the EKF fed
with the vision network's landmark stream. Each produces the same per-frame
metric rows so their CSVs are directly comparable; methods that cannot
observe wrist translation simply lack the world-frame columns.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .configio import ConfigError
from .dataset import FINGER_ORDER, CaptureSequence, load_split
from .ekf import EkfConfig, run_ekf
from .experiment import ExperimentConfig
from .imu_tracker import imu_only_tracker
from .layout import SensorLayout, default_layout
from .metrics import (MetricReport, build_report, frame_metrics,
                      joint_angle_errors, write_report_csv, write_summary)
from .model import MODES, FusionModel, FusionOutput, ModelConfig
from .optim import load_checkpoint
from .pipeline import AlignedSample, PipelineConfig, build_samples
from .skeleton import (HandPose, HandSkeleton, default_skeleton,
                       forward_kinematics, fk_world_batch)

EVAL_METHODS = ("fused", "vision_only", "imu_only", "ekf", "imu_tracker")
FORWARD_CHUNK = 48


@dataclass
class EvalOptions:
    frame_stride: int = 4
    noise_scale: float = 0.0
    time_shift: float = 0.0
    split: str = "eval"
    sensor_mask: np.ndarray | None = None
    dump_attention: bool = False


def load_model(checkpoint: str | Path, skeleton: HandSkeleton,
               layout: SensorLayout) -> FusionModel:
    arrays, _, meta = load_checkpoint(checkpoint)
    cfg = ModelConfig.from_dict(meta.get("model", {}))
    model = FusionModel(cfg, skeleton, layout, seed=0)
    model.load_params(arrays)
    return model


def forward_samples(model: FusionModel, samples: list[AlignedSample],
                    mode: str, sensor_mask=None) -> list[FusionOutput]:
    """Batched inference over aligned samples, chunked at a fixed size."""
    outputs: list[FusionOutput] = []
    for lo in range(0, len(samples), FORWARD_CHUNK):
        chunk = samples[lo:lo + FORWARD_CHUNK]
        windows = np.stack([s.window.data for s in chunk])
        rasters = np.stack([s.raster for s in chunk]).astype(np.float64)
        out = model.forward_batch(windows, rasters, mode=mode,
                                  sensor_mask=sensor_mask)
        outputs.extend(model.output_from_batch(out, i)
                       for i in range(len(chunk)))
    return outputs


def vision_landmark_stream(model: FusionModel, seq: CaptureSequence,
                           skeleton: HandSkeleton) -> np.ndarray:
    """(F, 21, 3) world landmarks decoded by the vision-only network."""
    F = seq.n_frames
    poses = []
    zeros = np.zeros((1, 14, 23, 3))
    for lo in range(0, F, FORWARD_CHUNK):
        rasters = seq.rasters[lo:lo + FORWARD_CHUNK].astype(np.float64)
        out = model.forward_batch(np.broadcast_to(zeros, (len(rasters),) + zeros.shape[1:]),
                                  rasters, mode="vision_only")
        poses.extend(model.output_from_batch(out, i)
                     for i in range(len(rasters)))
    phi = np.stack([p.pose.angles for p in poses])
    R = np.stack([p.pose.wrist_rotation for p in poses])
    t = np.stack([p.pose.wrist_translation for p in poses])
    return fk_world_batch(skeleton, phi, R, t)


# ---------------------------------------------------------------------------
# Per-method evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalResult:
    method: str
    report: MetricReport
    occlusion: dict
    predictions: list            # (sample_id, HandPose)
    attention: list              # (sample_id, a_vis(12,), occl_fingers(5,))
    translation_valid: bool


def _network_eval(model: FusionModel, sequences, skeleton, layout,
                  opts: EvalOptions, mode: str) -> EvalResult:
    pipe = PipelineConfig(noise_scale=opts.noise_scale,
                          time_shift=opts.time_shift)
    ids, rows, dof_rows = [], [], []
    predictions, attention = [], []
    occl = _OcclusionAccumulator(skeleton)
    t_valid = mode != "imu_only"
    for seq in sequences:
        samples = build_samples(seq, layout, skeleton, pipe,
                                opts.frame_stride)
        outputs = forward_samples(model, samples, mode, opts.sensor_mask)
        for s, o in zip(samples, outputs):
            sid = f"{s.seq_id}/{s.frame_index:04d}"
            ids.append(sid)
            rows.append(frame_metrics(o.pose, s.pose, skeleton,
                                      translation_valid=t_valid))
            dof_rows.append(joint_angle_errors(o.pose.angles, s.pose.angles))
            occl.add(o.pose, s.pose, s.occl_fingers)
            predictions.append((sid, o.pose))
            if o.a_vis_valid and opts.dump_attention:
                attention.append((sid, o.a_vis, s.occl_fingers))
    report = build_report(ids, rows, np.stack(dof_rows))
    return EvalResult(mode, report, occl.summary(), predictions, attention,
                      t_valid)


def _tracker_eval(sequences, skeleton, layout, opts: EvalOptions,
                  method: str, vision_model: FusionModel | None) -> EvalResult:
    ids, rows, dof_rows = [], [], []
    predictions = []
    occl = _OcclusionAccumulator(skeleton)
    t_valid = method == "ekf"
    for seq in sequences:
        if method == "imu_tracker":
            result = imu_only_tracker(seq, layout, skeleton, seq.gt_pose(0))
        else:
            landmarks = None
            if vision_model is not None:
                landmarks = vision_landmark_stream(vision_model, seq, skeleton)
            result = run_ekf(seq, layout, skeleton, EkfConfig(),
                             landmarks=landmarks, visibility=seq.visibility)
        occl_f = seq.occluded_fingers(skeleton)
        for f in range(0, seq.n_frames, opts.frame_stride):
            pred, gt = result.poses[f], seq.gt_pose(f)
            sid = f"{seq.seq_id}/{f:04d}"
            ids.append(sid)
            rows.append(frame_metrics(pred, gt, skeleton,
                                      translation_valid=t_valid))
            dof_rows.append(joint_angle_errors(pred.angles, gt.angles))
            occl.add(pred, gt, occl_f[f])
            predictions.append((sid, pred))
    report = build_report(ids, rows, np.stack(dof_rows))
    return EvalResult(method, report, occl.summary(), predictions, [],
                      t_valid)


class _OcclusionAccumulator:
    """Pools root-relative landmark errors split by finger occlusion."""

    def __init__(self, skeleton: HandSkeleton):
        self.skeleton = skeleton
        self.finger_landmarks = [np.array(skeleton.fingers[name])
                                 for name in FINGER_ORDER]
        self.occ_sum = 0.0
        self.occ_n = 0
        self.vis_sum = 0.0
        self.vis_n = 0
        self.frames = 0
        self.occluded_frames = 0

    def add(self, pred: HandPose, gt: HandPose, occl_fingers: np.ndarray) -> None:
        swapped = HandPose(pred.angles, gt.wrist_rotation, gt.wrist_translation)
        err = np.linalg.norm(forward_kinematics(self.skeleton, swapped)
                             - forward_kinematics(self.skeleton, gt), axis=-1)
        self.frames += 1
        if occl_fingers.any():
            self.occluded_frames += 1
        for fi, lms in enumerate(self.finger_landmarks):
            if occl_fingers[fi]:
                self.occ_sum += err[lms].sum()
                self.occ_n += len(lms)
            else:
                self.vis_sum += err[lms].sum()
                self.vis_n += len(lms)

    def summary(self) -> dict:
        return {
            "occluded_frame_fraction": self.occluded_frames / max(self.frames, 1),
            "occluded_landmark_mkpe_t":
                self.occ_sum / self.occ_n * 1000.0 if self.occ_n else None,
            "visible_landmark_mkpe_t":
                self.vis_sum / self.vis_n * 1000.0 if self.vis_n else None,
        }


def evaluate_method(exp: ExperimentConfig, method: str,
                    dataset_dir: str | Path,
                    checkpoint: str | Path | None = None,
                    vision_checkpoint: str | Path | None = None,
                    opts: EvalOptions | None = None) -> EvalResult:
    if method not in EVAL_METHODS:
        raise ConfigError(f"unknown eval method {method!r} "
                          f"(expected one of {EVAL_METHODS})")
    opts = opts or EvalOptions(frame_stride=exp.eval_frame_stride)
    skeleton = default_skeleton()
    layout = default_layout(skeleton)
    sequences = load_split(dataset_dir, opts.split)
    if not sequences:
        raise ConfigError(f"dataset {dataset_dir} has no {opts.split!r} split")

    if method in MODES:
        if checkpoint is None:
            raise ConfigError(f"method {method!r} needs a checkpoint")
        model = load_model(checkpoint, skeleton, layout)
        return _network_eval(model, sequences, skeleton, layout, opts, method)
    vision_model = None
    if method == "ekf":
        if vision_checkpoint is None:
            raise ConfigError("ekf evaluation needs a vision checkpoint to "
                              "decode landmarks from")
        vision_model = load_model(vision_checkpoint, skeleton, layout)
    return _tracker_eval(sequences, skeleton, layout, opts, method,
                         vision_model)


def write_eval_outputs(result: EvalResult, out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_report_csv(result.report, out_dir / "metrics.csv")
    summary_path = out_dir / "summary.json"
    write_summary(result.report, summary_path)
    data = json.loads(summary_path.read_text())
    data["method"] = result.method
    data["translation_valid"] = result.translation_valid
    data["occlusion"] = result.occlusion
    with open(summary_path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")

    with open(out_dir / "dof_degrees.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample"] + [f"dof{k:02d}" for k in range(22)])
        for sid, row in zip(result.report.sample_ids, result.report.dof_degrees):
            w.writerow([sid] + [f"{v:.6f}" for v in row])

    with open(out_dir / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample"] + [f"phi{k:02d}" for k in range(22)]
                   + ["tx", "ty", "tz"])
        for sid, pose in result.predictions:
            w.writerow([sid] + [f"{v:.8f}" for v in pose.angles]
                       + [f"{v:.8f}" for v in pose.wrist_translation])

    if result.attention:
        with open(out_dir / "attention.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample"] + [f"a{k:02d}" for k in range(12)]
                       + [f"occl_{n}" for n in FINGER_ORDER])
            for sid, a_vis, occl in result.attention:
                w.writerow([sid] + [f"{v:.8f}" for v in a_vis]
                           + [int(v) for v in occl])


# ---------------------------------------------------------------------------
# Sensor ablation
# ---------------------------------------------------------------------------

def sensor_groups(layout: SensorLayout) -> dict[str, list[int]]:
    """Five finger pairs plus the back/wrist pair, keyed by group name."""
    groups = {name: list(ids) for name, ids in layout.finger_sensors.items()}
    used = {s for ids in groups.values() for s in ids}
    groups["back"] = [s for s in range(layout.n_sensors) if s not in used]
    return groups


def per_finger_mkpe_t(result: EvalResult, skeleton: HandSkeleton,
                      sequences_by_id: dict) -> np.ndarray:
    """(5,) mean root-relative keypoint error per finger in mm."""
    sums = np.zeros(5)
    counts = np.zeros(5)
    for sid, pose in result.predictions:
        seq_id, frame = sid.rsplit("/", 1)
        seq = sequences_by_id[seq_id]
        gt = seq.gt_pose(int(frame))
        swapped = HandPose(pose.angles, gt.wrist_rotation, gt.wrist_translation)
        err = np.linalg.norm(forward_kinematics(skeleton, swapped)
                             - forward_kinematics(skeleton, gt), axis=-1)
        for fi, name in enumerate(FINGER_ORDER):
            lms = skeleton.fingers[name]
            sums[fi] += err[lms].sum()
            counts[fi] += len(lms)
    return sums / counts * 1000.0


def ablate_sensors(exp: ExperimentConfig, dataset_dir: str | Path,
                   fused_checkpoint: str | Path,
                   vision_checkpoint: str | Path,
                   out_dir: str | Path, mode: str = "eval",
                   seed: int | None = None, log=print) -> dict:
    """MKPE.T gap grid: sensor group provided (rows) x finger scored (cols).

    mode="eval" masks every other sensor group at inference on the shared
    fused checkpoint; mode="train" re-trains a fused model per group with
    the same mask active, then evaluates it under that mask.
    """
    if mode not in ("eval", "train"):
        raise ConfigError(f"ablate mode must be 'eval' or 'train', got {mode!r}")
    for name, path in (("fused", fused_checkpoint),
                       ("vision", vision_checkpoint)):
        if path is None or not Path(path).exists():
            raise ConfigError(f"missing {name} baseline checkpoint: {path}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    skeleton = default_skeleton()
    layout = default_layout(skeleton)
    opts = EvalOptions(frame_stride=exp.eval_frame_stride)
    sequences = {s.seq_id: s for s in load_split(dataset_dir, "eval")}

    vis_res = evaluate_method(exp, "vision_only", dataset_dir,
                              checkpoint=vision_checkpoint, opts=opts)
    vis_row = per_finger_mkpe_t(vis_res, skeleton, sequences)

    groups = sensor_groups(layout)
    grid = np.zeros((len(groups), 5))
    names = list(groups)
    for gi, gname in enumerate(names):
        mask = np.ones(layout.n_sensors, dtype=bool)
        mask[groups[gname]] = False      # mask everything except this group
        if mode == "train":
            from .train import train_model
            tdir = out_dir / f"train_{gname}"
            train_model(exp, "fused", dataset_dir, tdir, seed=seed,
                        sensor_mask=mask, log=log)
            ckpt = tdir / "final.ckpt"
        else:
            ckpt = fused_checkpoint
        res = evaluate_method(
            exp, "fused", dataset_dir, checkpoint=ckpt,
            opts=EvalOptions(frame_stride=opts.frame_stride,
                             sensor_mask=mask))
        grid[gi] = per_finger_mkpe_t(res, skeleton, sequences) - vis_row
        log(f"ablate {gname}: gaps "
            + " ".join(f"{v:+.3f}" for v in grid[gi]))

    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group"] + [f"mkpe_t_gap_{f}" for f in FINGER_ORDER])
        for gi, gname in enumerate(names):
            w.writerow([gname] + [f"{v:.6f}" for v in grid[gi]])
    return {"groups": names, "fingers": list(FINGER_ORDER),
            "grid": grid.tolist(), "mode": mode}


# ---------------------------------------------------------------------------
# Sensitivity sweeps
# ---------------------------------------------------------------------------

def sensitivity(exp: ExperimentConfig, dataset_dir: str | Path,
                checkpoint: str | Path, out_dir: str | Path,
                log=print) -> dict:
    """Noise-scale and time-shift sweeps of the fused model, CSV + SVG."""
    exp.sweeps.validate(PipelineConfig().shift_bound)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stride = exp.eval_frame_stride

    noise_rows = []
    for scale in exp.sweeps.noise_scales:
        res = evaluate_method(exp, "fused", dataset_dir, checkpoint=checkpoint,
                              opts=EvalOptions(frame_stride=stride,
                                               noise_scale=scale))
        agg = res.report.aggregate
        noise_rows.append((scale, agg["MKPE"], agg["MKPE.T"]))
        log(f"noise x{scale:g}: MKPE {agg['MKPE']:.3f} mm, "
            f"MKPE.T {agg['MKPE.T']:.3f} mm")

    shift_rows = []
    for dt in exp.sweeps.shifts_s:
        res = evaluate_method(exp, "fused", dataset_dir, checkpoint=checkpoint,
                              opts=EvalOptions(frame_stride=stride,
                                               time_shift=dt))
        agg = res.report.aggregate
        shift_rows.append((dt, agg["MKPE"], agg["MKPE.T"]))
        log(f"shift {dt:+.2f} s: MKPE {agg['MKPE']:.3f} mm, "
            f"MKPE.T {agg['MKPE.T']:.3f} mm")

    for name, rows, xlabel in (
            ("sensitivity_noise", noise_rows, "noise scale (x floor)"),
            ("sensitivity_shift", shift_rows, "time shift (s)")):
        with open(out_dir / f"{name}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([xlabel.split(" (")[0].replace(" ", "_"),
                        "MKPE_mm", "MKPE_T_mm"])
            for x, a, b in rows:
                w.writerow([f"{x:.10g}", f"{a:.6f}", f"{b:.6f}"])
        svg = line_plot_svg(
            [(x, a) for x, a, _ in rows], [(x, b) for x, _, b in rows],
            xlabel=xlabel, ylabel="error (mm)",
            series=("MKPE", "MKPE.T"))
        (out_dir / f"{name}.svg").write_text(svg)
    return {"noise": noise_rows, "shift": shift_rows}


# ---------------------------------------------------------------------------
# Dependency-free SVG plotting
# ---------------------------------------------------------------------------

_SVG_W, _SVG_H = 560, 360
_ML, _MR, _MT, _MB = 64, 16, 16, 48
_COLORS = ("#1f6fb2", "#c2502a")


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def line_plot_svg(*series_points, xlabel: str, ylabel: str,
                  series: tuple = ()) -> str:
    """Minimal multi-series line plot: polylines, ticks, axis labels."""
    pts_all = [p for pts in series_points for p in pts]
    xs = [p[0] for p in pts_all]
    ys = [p[1] for p in pts_all]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad
    iw = _SVG_W - _ML - _MR
    ih = _SVG_H - _MT - _MB

    def px(x):
        return _ML + (x - x0) / (x1 - x0) * iw

    def py(y):
        return _MT + (y1 - y) / (y1 - y0) * ih

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SVG_W}" '
             f'height="{_SVG_H}" viewBox="0 0 {_SVG_W} {_SVG_H}">',
             f'<rect width="{_SVG_W}" height="{_SVG_H}" fill="white"/>']
    parts.append(f'<line x1="{_ML}" y1="{_MT + ih}" x2="{_ML + iw}" '
                 f'y2="{_MT + ih}" stroke="black"/>')
    parts.append(f'<line x1="{_ML}" y1="{_MT}" x2="{_ML}" y2="{_MT + ih}" '
                 f'stroke="black"/>')
    for tx in _ticks(x0, x1):
        parts.append(f'<line x1="{px(tx):.1f}" y1="{_MT + ih}" '
                     f'x2="{px(tx):.1f}" y2="{_MT + ih + 5}" stroke="black"/>')
        parts.append(f'<text x="{px(tx):.1f}" y="{_MT + ih + 18}" '
                     f'font-size="11" text-anchor="middle">{tx:.3g}</text>')
    for ty in _ticks(y0, y1):
        parts.append(f'<line x1="{_ML - 5}" y1="{py(ty):.1f}" x2="{_ML}" '
                     f'y2="{py(ty):.1f}" stroke="black"/>')
        parts.append(f'<text x="{_ML - 8}" y="{py(ty):.1f}" font-size="11" '
                     f'text-anchor="end" dominant-baseline="middle">'
                     f'{ty:.3g}</text>')
    parts.append(f'<text x="{_ML + iw / 2:.0f}" y="{_SVG_H - 10}" '
                 f'font-size="13" text-anchor="middle">{xlabel}</text>')
    parts.append(f'<text x="14" y="{_MT + ih / 2:.0f}" font-size="13" '
                 f'text-anchor="middle" transform="rotate(-90 14 '
                 f'{_MT + ih / 2:.0f})">{ylabel}</text>')
    for k, pts in enumerate(series_points):
        color = _COLORS[k % len(_COLORS)]
        poly = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in pts)
        parts.append(f'<polyline points="{poly}" fill="none" '
                     f'stroke="{color}" stroke-width="1.8"/>')
        if k < len(series):
            parts.append(f'<text x="{_ML + iw - 6}" y="{_MT + 16 + 16 * k}" '
                         f'font-size="12" text-anchor="end" fill="{color}">'
                         f'{series[k]}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def bar_plot_svg(labels: list[str], values: list[float], xlabel: str,
                 ylabel: str) -> str:
    """Vertical bar chart with rotated tick labels."""
    y1 = max(max(values), 1e-9) * 1.05
    iw = _SVG_W - _ML - _MR
    ih = _SVG_H - _MT - _MB - 30
    bw = iw / max(len(values), 1)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SVG_W}" '
             f'height="{_SVG_H}" viewBox="0 0 {_SVG_W} {_SVG_H}">',
             f'<rect width="{_SVG_W}" height="{_SVG_H}" fill="white"/>',
             f'<line x1="{_ML}" y1="{_MT + ih}" x2="{_ML + iw}" '
             f'y2="{_MT + ih}" stroke="black"/>',
             f'<line x1="{_ML}" y1="{_MT}" x2="{_ML}" y2="{_MT + ih}" '
             f'stroke="black"/>']
    for ty in _ticks(0.0, y1):
        y = _MT + ih - ty / y1 * ih
        parts.append(f'<line x1="{_ML - 5}" y1="{y:.1f}" x2="{_ML}" '
                     f'y2="{y:.1f}" stroke="black"/>')
        parts.append(f'<text x="{_ML - 8}" y="{y:.1f}" font-size="11" '
                     f'text-anchor="end" dominant-baseline="middle">'
                     f'{ty:.3g}</text>')
    for i, (label, v) in enumerate(zip(labels, values)):
        x = _ML + i * bw
        h = v / y1 * ih
        parts.append(f'<rect x="{x + 0.15 * bw:.1f}" '
                     f'y="{_MT + ih - h:.1f}" width="{0.7 * bw:.1f}" '
                     f'height="{h:.1f}" fill="{_COLORS[0]}"/>')
        cx = x + bw / 2
        parts.append(f'<text x="{cx:.1f}" y="{_MT + ih + 10}" font-size="9" '
                     f'text-anchor="end" transform="rotate(-55 {cx:.1f} '
                     f'{_MT + ih + 10})">{label}</text>')
    parts.append(f'<text x="{_ML + iw / 2:.0f}" y="{_SVG_H - 6}" '
                 f'font-size="13" text-anchor="middle">{xlabel}</text>')
    parts.append(f'<text x="14" y="{_MT + ih / 2:.0f}" font-size="13" '
                 f'text-anchor="middle" transform="rotate(-90 14 '
                 f'{_MT + ih / 2:.0f})">{ylabel}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
