"""Command-line entry point.

`fusetrack <command> --config experiment.yaml [...]` with commands
generate, train, eval, ablate, sensitivity, and report. Exit codes:
0 success, 2 configuration problems, 3 numerical failures. Each command
writes into a fresh numbered run directory under the experiment's out_dir
and never touches earlier runs; downstream commands pick up the newest
completed run of the stage they need unless pointed elsewhere.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from pathlib import Path

from .configio import ConfigError
from .dataset import generate_dataset
from .evaluate import (EVAL_METHODS, EvalOptions, ablate_sensors,
                       evaluate_method, sensitivity, write_eval_outputs)
from .experiment import (ExperimentConfig, Stopwatch, latest_run_dir,
                         mark_complete, new_run_dir)
from .optim import OptimError
from .report import consolidate
from .train import NumericalError, train_model

METHOD_ALIASES = {
    "fused": "fused",
    "vision": "vision_only", "vision_only": "vision_only",
    "imu": "imu_only", "imu_only": "imu_only",
    "ekf": "ekf",
    "imu_tracker": "imu_tracker",
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="fusetrack",
        description="Synthetic vision-IMU hand tracking experiments")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True,
                        help="experiment YAML (see data/experiment_default.yaml)")
        sp.add_argument("--seed", type=int, default=None,
                        help="override the experiment master seed")
        sp.add_argument("--out", default=None,
                        help="override the experiment output root")

    sp = sub.add_parser("generate", help="synthesize the paired dataset")
    common(sp)

    sp = sub.add_parser("train", help="train one method")
    common(sp)
    sp.add_argument("--method", default="fused",
                    choices=["fused", "vision", "vision_only", "imu",
                             "imu_only"])
    sp.add_argument("--dataset", default=None,
                    help="dataset directory (default: newest generate run)")
    sp.add_argument("--resume", default=None,
                    help="checkpoint to resume from")

    sp = sub.add_parser("eval", help="evaluate a method on the eval split")
    common(sp)
    sp.add_argument("--method", default="fused", choices=sorted(METHOD_ALIASES))
    sp.add_argument("--dataset", default=None)
    sp.add_argument("--checkpoint", default=None,
                    help="checkpoint (default: newest train run of the method)")
    sp.add_argument("--vision-checkpoint", default=None,
                    help="vision checkpoint for --method ekf")
    sp.add_argument("--dump-attention", action="store_true",
                    help="also write per-sample a_vis vectors")

    sp = sub.add_parser("ablate", help="sensor-group ablation grid")
    common(sp)
    sp.add_argument("--dataset", default=None)
    sp.add_argument("--checkpoint", default=None, help="fused checkpoint")
    sp.add_argument("--vision-checkpoint", default=None)
    sp.add_argument("--ablate-mode", default="eval", choices=["eval", "train"])

    sp = sub.add_parser("sensitivity", help="noise and time-shift sweeps")
    common(sp)
    sp.add_argument("--dataset", default=None)
    sp.add_argument("--checkpoint", default=None, help="fused checkpoint")

    sp = sub.add_parser("report", help="consolidate an eval run")
    common(sp)
    sp.add_argument("--run", default=None,
                    help="eval run directory (default: newest eval run)")
    return p


def _load_config(args) -> ExperimentConfig:
    path = Path(args.config)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    exp = ExperimentConfig.from_yaml(path)
    if args.seed is not None:
        exp.master_seed = args.seed
        exp.dataset.master_seed = args.seed
    if args.out is not None:
        exp.out_dir = args.out
    return exp


def _resolve(explicit, root, command, inner=None, what="run"):
    if explicit is not None:
        p = Path(explicit)
        if not p.exists():
            raise ConfigError(f"{what} {p} does not exist")
        return p
    run = latest_run_dir(root, command)
    if run is None:
        raise ConfigError(f"no completed {command} run under {root}; "
                          f"run `fusetrack {command.split('_')[0]}` first "
                          f"or pass the path explicitly")
    return run / inner if inner else run


def cmd_generate(args) -> int:
    exp = _load_config(args)
    run = new_run_dir(exp.out_dir, "generate")
    watch = Stopwatch()
    manifest = generate_dataset(exp.dataset, run / "dataset")
    digest = hashlib.sha256(
        (run / "dataset" / "manifest.yaml").read_bytes()).hexdigest()
    counts: dict[str, int] = {}
    for s in manifest["sequences"]:
        counts[s["regime"]] = counts.get(s["regime"], 0) + 1
    print(f"generated {len(manifest['sequences'])} sequences into "
          f"{run / 'dataset'}")
    print(f"regimes: {counts}")
    print(f"manifest sha256={digest}")
    mark_complete(run, "generate", {"wall_s": watch.seconds(),
                                    "manifest_sha256": digest})
    return 0


def cmd_train(args) -> int:
    exp = _load_config(args)
    method = METHOD_ALIASES[args.method]
    dataset = _resolve(args.dataset, exp.out_dir, "generate",
                       inner="dataset", what="dataset")
    run = new_run_dir(exp.out_dir, f"train_{method}")
    watch = Stopwatch()
    summary = train_model(exp, method, dataset, run, seed=args.seed,
                          resume_from=args.resume)
    print(f"checkpoint: {summary['checkpoint']}")
    mark_complete(run, f"train_{method}",
                  {"wall_s": watch.seconds(), **summary})
    return 0


def cmd_eval(args) -> int:
    exp = _load_config(args)
    method = METHOD_ALIASES[args.method]
    dataset = _resolve(args.dataset, exp.out_dir, "generate",
                       inner="dataset", what="dataset")
    checkpoint = None
    vision_ckpt = None
    if method in ("fused", "vision_only", "imu_only"):
        checkpoint = _resolve(args.checkpoint, exp.out_dir,
                              f"train_{method}", inner="final.ckpt",
                              what="checkpoint")
    if method == "ekf":
        vision_ckpt = _resolve(args.vision_checkpoint, exp.out_dir,
                               "train_vision_only", inner="final.ckpt",
                               what="vision checkpoint")
    run = new_run_dir(exp.out_dir, f"eval_{method}")
    watch = Stopwatch()
    opts = EvalOptions(frame_stride=exp.eval_frame_stride,
                       dump_attention=args.dump_attention)
    result = evaluate_method(exp, method, dataset, checkpoint=checkpoint,
                             vision_checkpoint=vision_ckpt, opts=opts)
    write_eval_outputs(result, run)
    agg = result.report.aggregate
    headline = ", ".join(f"{k} {agg[k]:.3f}"
                         for k in ("MKPE", "MKPE.T") if k in agg)
    print(f"{method}: {headline} over {len(result.report.sample_ids)} frames")
    print(f"outputs: {run}")
    mark_complete(run, f"eval_{method}",
                  {"wall_s": watch.seconds(), "method": method,
                   "aggregate": agg})
    return 0


def cmd_ablate(args) -> int:
    exp = _load_config(args)
    dataset = _resolve(args.dataset, exp.out_dir, "generate",
                       inner="dataset", what="dataset")
    fused = _resolve(args.checkpoint, exp.out_dir, "train_fused",
                     inner="final.ckpt", what="fused checkpoint")
    vision = _resolve(args.vision_checkpoint, exp.out_dir,
                      "train_vision_only", inner="final.ckpt",
                      what="vision checkpoint")
    run = new_run_dir(exp.out_dir, "ablate")
    watch = Stopwatch()
    grid = ablate_sensors(exp, dataset, fused, vision, run,
                          mode=args.ablate_mode, seed=args.seed)
    print(f"ablation grid ({args.ablate_mode} mode): {run / 'ablation.csv'}")
    mark_complete(run, "ablate", {"wall_s": watch.seconds(), **grid})
    return 0


def cmd_sensitivity(args) -> int:
    exp = _load_config(args)
    dataset = _resolve(args.dataset, exp.out_dir, "generate",
                       inner="dataset", what="dataset")
    fused = _resolve(args.checkpoint, exp.out_dir, "train_fused",
                     inner="final.ckpt", what="fused checkpoint")
    run = new_run_dir(exp.out_dir, "sensitivity")
    watch = Stopwatch()
    rows = sensitivity(exp, dataset, fused, run)
    print(f"sweeps written to {run}")
    mark_complete(run, "sensitivity", {
        "wall_s": watch.seconds(),
        "noise": [list(r) for r in rows["noise"]],
        "shift": [list(r) for r in rows["shift"]]})
    return 0


def cmd_report(args) -> int:
    exp = _load_config(args)
    if args.run is not None:
        eval_dir = Path(args.run)
        if not eval_dir.exists():
            raise ConfigError(f"run directory {eval_dir} does not exist")
    else:
        eval_dir = None
        for method in EVAL_METHODS:
            eval_dir = latest_run_dir(exp.out_dir, f"eval_{method}")
            if eval_dir is not None:
                break
        if eval_dir is None:
            raise ConfigError(f"no completed eval run under {exp.out_dir}")
    consolidate(eval_dir)
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "sensitivity": cmd_sensitivity,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, OptimError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
