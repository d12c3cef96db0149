"""Consolidated reporting over a finished evaluation run.

Reads the CSV/JSON artifacts an eval run produced and emits the breakdown
material: aggregate metric summary, per-DoF angle-error bars, the pooled
angle-error CDF, and (when the run dumped attention) per-finger attention
statistics split by occlusion.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .configio import ConfigError
from .dataset import FINGER_ORDER
from .evaluate import bar_plot_svg, line_plot_svg
from .layout import default_layout
from .metrics import CDF_THRESHOLDS_DEG, error_cdf
from .skeleton import default_skeleton


def _read_matrix_csv(path: Path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    ids = [r[0] for r in rows[1:]]
    data = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    return ids, data


def consolidate(eval_dir: str | Path, out_dir: str | Path | None = None,
                log=print) -> dict:
    """Build report files from one eval run directory."""
    eval_dir = Path(eval_dir)
    summary_path = eval_dir / "summary.json"
    dof_path = eval_dir / "dof_degrees.csv"
    if not summary_path.exists() or not dof_path.exists():
        raise ConfigError(
            f"{eval_dir} is not a finished eval run (missing summary.json "
            f"or dof_degrees.csv)")
    out_dir = Path(out_dir) if out_dir is not None else eval_dir / "report"
    out_dir.mkdir(parents=True, exist_ok=True)

    summary = json.loads(summary_path.read_text())
    metrics = summary["metrics"]
    with open(out_dir / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for name in sorted(metrics):
            w.writerow([name, f"{metrics[name]:.6f}"])

    skeleton = default_skeleton()
    dof_names = [d.name for d in skeleton.dofs]
    _, dof = _read_matrix_csv(dof_path)
    if dof.shape[1] != len(dof_names):
        raise ConfigError(f"{dof_path}: expected {len(dof_names)} DoF columns")
    mean_deg = dof.mean(axis=0)
    with open(out_dir / "dof_bars.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dof", "name", "mean_abs_error_deg"])
        for k, (name, v) in enumerate(zip(dof_names, mean_deg)):
            w.writerow([k, name, f"{v:.6f}"])
    (out_dir / "dof_bars.svg").write_text(
        bar_plot_svg(dof_names, mean_deg.tolist(),
                     xlabel="degree of freedom",
                     ylabel="mean abs angle error (deg)"))

    cdf = error_cdf(dof, CDF_THRESHOLDS_DEG)
    with open(out_dir / "cdf.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold_deg", "percent_at_or_below"])
        for t, v in zip(CDF_THRESHOLDS_DEG, cdf):
            w.writerow([f"{t:.1f}", f"{v:.6f}"])
    (out_dir / "cdf.svg").write_text(
        line_plot_svg(list(zip(CDF_THRESHOLDS_DEG, cdf)),
                      xlabel="angle error threshold (deg)",
                      ylabel="% of joint errors at or below",
                      series=("CDF",)))

    result = {"metrics": metrics, "dof_mean_deg": mean_deg.tolist(),
              "cdf": cdf.tolist()}

    attn_path = eval_dir / "attention.csv"
    if attn_path.exists():
        result["attention"] = attention_stats(attn_path, out_dir)
    else:
        log("attention.csv absent; skipping attention statistics "
            "(eval with --dump-attention to include them)")
    log(f"report written to {out_dir}")
    return result


def attention_stats(attn_path: str | Path, out_dir: str | Path) -> dict:
    """Per-finger mean a_vis mass on that finger's sensors, occluded vs not."""
    skeleton = default_skeleton()
    layout = default_layout(skeleton)
    with open(attn_path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    a_cols = [header.index(f"a{k:02d}") for k in range(12)]
    o_cols = [header.index(f"occl_{n}") for n in FINGER_ORDER]
    a_vis = np.array([[float(r[c]) for c in a_cols] for r in rows[1:]])
    occl = np.array([[int(r[c]) for c in o_cols] for r in rows[1:]], dtype=bool)

    out = []
    for fi, name in enumerate(FINGER_ORDER):
        sensors = layout.finger_sensors[name]
        mass = a_vis[:, sensors].sum(axis=1)
        occ = mass[occl[:, fi]]
        vis = mass[~occl[:, fi]]
        out.append({
            "finger": name,
            "n_occluded": int(occ.size),
            "n_visible": int(vis.size),
            "mean_mass_occluded": float(occ.mean()) if occ.size else None,
            "mean_mass_visible": float(vis.mean()) if vis.size else None,
        })
    with open(Path(out_dir) / "attention_stats.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["finger", "n_occluded", "n_visible",
                    "mean_mass_occluded", "mean_mass_visible", "difference"])
        for rec in out:
            occ, vis = rec["mean_mass_occluded"], rec["mean_mass_visible"]
            diff = "" if occ is None or vis is None else f"{occ - vis:.8f}"
            w.writerow([rec["finger"], rec["n_occluded"], rec["n_visible"],
                        "" if occ is None else f"{occ:.8f}",
                        "" if vis is None else f"{vis:.8f}", diff])
    return {"per_finger": out}
