"""Deterministic single-process training loop.

Reproducibility rests on three seeds derived from (master_seed, method):
model init, the per-epoch shuffle, and the per-epoch modality-dropout
stream. Keying the latter two by absolute epoch index means a run resumed
from an epoch checkpoint sees exactly the batches and dropout draws the
uninterrupted run would have seen.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .configio import ConfigError
from .dataset import load_split
from .experiment import METHOD_CODES, ExperimentConfig, TrainParams, derive_seed
from .layout import SensorLayout, default_layout
from .model import MODES, FusionModel
from .optim import AdamW, OptimError, load_checkpoint, save_checkpoint
from .parallel import ordered_map
from .pipeline import AlignedSample, PipelineConfig, build_samples
from .skeleton import HandSkeleton, default_skeleton


class NumericalError(RuntimeError):
    """Training hit a non-finite loss or gradient."""


@dataclass
class Batch:
    windows: np.ndarray   # (B, 14, 23, 3)
    rasters: np.ndarray   # (B, H, W) float64
    gt_phi: np.ndarray    # (B, 22)
    gt_R: np.ndarray      # (B, 3, 3)
    gt_t: np.ndarray      # (B, 3)


def stack_batch(samples: list[AlignedSample]) -> Batch:
    return Batch(
        windows=np.stack([s.window.data for s in samples]),
        rasters=np.stack([s.raster for s in samples]).astype(np.float64),
        gt_phi=np.stack([s.pose.angles for s in samples]),
        gt_R=np.stack([s.pose.wrist_rotation for s in samples]),
        gt_t=np.stack([s.pose.wrist_translation for s in samples]),
    )


def _build_one(args):
    seq, layout, skeleton, cfg, stride = args
    return build_samples(seq, layout, skeleton, cfg, stride)


def load_training_samples(dataset_dir: str | Path, skeleton: HandSkeleton,
                          layout: SensorLayout, params: TrainParams,
                          split: str = "train") -> list[AlignedSample]:
    """Aligned samples for a split, in (sequence, frame) order."""
    sequences = load_split(dataset_dir, split)
    if not sequences:
        raise ConfigError(f"dataset at {dataset_dir} has no {split!r} sequences")
    pipe = PipelineConfig(noise_scale=params.noise_scale)
    tasks = [(seq, layout, skeleton, pipe, params.frame_stride)
             for seq in sequences]
    out: list[AlignedSample] = []
    for chunk in ordered_map(_build_one, tasks):
        out.extend(chunk)
    return out


def train_model(exp: ExperimentConfig, method: str, dataset_dir: str | Path,
                out_dir: str | Path, seed: int | None = None,
                resume_from: str | Path | None = None,
                sensor_mask: np.ndarray | None = None,
                log=print) -> dict:
    """Train one method end to end; returns a summary dict.

    Writes epoch_NNN.ckpt per epoch, final.ckpt, and loss.csv with one row
    per optimizer step into out_dir.
    """
    if method not in MODES:
        raise ConfigError(f"unknown training method {method!r} "
                          f"(expected one of {MODES})")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = exp.master_seed if seed is None else seed
    mcode = METHOD_CODES[method]
    params = exp.training

    skeleton = default_skeleton()
    layout = default_layout(skeleton)
    samples = load_training_samples(dataset_dir, skeleton, layout, params)
    model = FusionModel(exp.model, skeleton, layout,
                        seed=derive_seed(seed, mcode, 0))
    opt = AdamW(model.params, lr=params.lr,
                weight_decay=params.weight_decay)

    start_epoch = 0
    global_step = 0
    if resume_from is not None:
        arrays, opt_arrays, meta = load_checkpoint(resume_from)
        if meta.get("method") != method:
            raise ConfigError(f"checkpoint {resume_from} was trained with "
                              f"method {meta.get('method')!r}, not {method!r}")
        model.load_params(arrays)
        if opt_arrays:
            opt.load_state_arrays(opt_arrays)
        start_epoch = int(meta["epoch"])
        global_step = int(meta["global_step"])
        log(f"resumed from {resume_from} at epoch {start_epoch}")

    log(f"training {method}: {len(samples)} samples, "
        f"{model.n_params()} parameters, epochs {start_epoch}..{params.epochs}")

    loss_path = out_dir / "loss.csv"
    mode = "a" if resume_from is not None and loss_path.exists() else "w"
    history: list[float] = []
    last_meta = {"method": method, "epoch": start_epoch,
                 "global_step": global_step, "lr": params.lr_at(start_epoch),
                 "master_seed": seed, "model": exp.model.to_dict()}
    with open(loss_path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(["epoch", "step", "global_step", "lr",
                             "nll", "angle", "total"])
        for epoch in range(start_epoch, params.epochs):
            opt.lr = params.lr_at(epoch)
            order = np.random.default_rng(
                np.random.SeedSequence([seed, mcode, epoch, 0])
            ).permutation(len(samples))
            drop_rng = np.random.default_rng(
                np.random.SeedSequence([seed, mcode, epoch, 1]))
            epoch_total = 0.0
            n_steps = 0
            for lo in range(0, len(order), params.batch_size):
                batch = stack_batch([samples[i]
                                     for i in order[lo:lo + params.batch_size]])
                opt.zero_grad()
                out = model.forward_batch(
                    batch.windows, batch.rasters, mode=method,
                    drop_rng=drop_rng if method == "fused" else None,
                    sensor_mask=sensor_mask)
                loss, parts = model.loss_batch(out, batch.gt_phi,
                                               batch.gt_R, batch.gt_t)
                if not np.isfinite(parts["total"]):
                    _dump_abort(out_dir, method, epoch, n_steps, parts)
                    raise NumericalError(
                        f"non-finite loss at epoch {epoch} step {n_steps}: "
                        f"{parts}")
                loss.backward()
                try:
                    opt.step()
                except OptimError as exc:
                    _dump_abort(out_dir, method, epoch, n_steps,
                                {**parts, "error": str(exc)})
                    raise NumericalError(str(exc)) from exc
                alpha = model.params["alpha"]
                alpha.value = np.maximum(alpha.value, 0.0)
                writer.writerow([epoch, n_steps, global_step,
                                 f"{opt.lr:.10g}", f"{parts['nll']:.10g}",
                                 f"{parts['angle']:.10g}",
                                 f"{parts['total']:.10g}"])
                epoch_total += parts["total"]
                history.append(parts["total"])
                n_steps += 1
                global_step += 1
            meta = {"method": method, "epoch": epoch + 1,
                    "global_step": global_step, "lr": opt.lr,
                    "master_seed": seed, "model": exp.model.to_dict()}
            if (epoch + 1) % params.checkpoint_every == 0:
                save_checkpoint(out_dir / f"epoch_{epoch + 1:03d}.ckpt",
                                model.params, opt, meta)
            log(f"epoch {epoch}: mean loss {epoch_total / max(n_steps, 1):.4f} "
                f"lr {opt.lr:.2e}")
            last_meta = meta
    save_checkpoint(out_dir / "final.ckpt", model.params, opt, last_meta)
    return {"method": method, "epochs": params.epochs,
            "global_step": global_step,
            "final_loss": history[-1] if history else None,
            "checkpoint": str(out_dir / "final.ckpt")}


def _dump_abort(out_dir: Path, method: str, epoch: int, step: int,
                parts: dict) -> None:
    with open(out_dir / "abort.json", "w") as fh:
        json.dump({"method": method, "epoch": epoch, "step": step,
                   "parts": {k: str(v) for k, v in parts.items()}},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
