"""Experiment configuration and run-directory bookkeeping.

One YAML file describes a full experiment: dataset recipe, model size,
training schedule, and the sweep grids. Every command writes into a fresh
numbered run directory under the experiment's output root, so re-running
a command can never clobber earlier results; consumers resolve the newest
completed run of the stage they depend on.
"""

from __future__ import annotations

import json
import re
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .configio import ConfigError, load_yaml, require_schema
from .dataset import DatasetConfig
from .model import ModelConfig

# stable per-method codes used in seed derivation; order is contract
METHOD_CODES = {"fused": 0, "vision_only": 1, "imu_only": 2}


@dataclass
class TrainParams:
    epochs: int = 40
    batch_size: int = 48
    lr: float = 7.89e-4
    decay_epoch: int = 30        # epochs at/after this index run at lr*factor
    decay_factor: float = 0.1
    weight_decay: float = 1e-4
    frame_stride: int = 1
    noise_scale: float = 1.0     # window noise augmentation while training
    checkpoint_every: int = 1

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0 < self.decay_factor <= 1:
            raise ConfigError("decay_factor must lie in (0, 1]")
        if self.frame_stride < 1:
            raise ConfigError("frame_stride must be >= 1")
        if self.noise_scale < 0:
            raise ConfigError("noise_scale must be >= 0")

    def lr_at(self, epoch: int) -> float:
        return self.lr * (self.decay_factor if epoch >= self.decay_epoch else 1.0)


@dataclass
class SweepParams:
    noise_scales: list = field(default_factory=lambda: [0.0, 0.5, 1.0, 1.5, 2.0])
    shifts_s: list = field(default_factory=lambda: [-0.4, -0.2, -0.1, 0.0,
                                                    0.1, 0.2, 0.4])

    def validate(self, shift_bound: float = 0.4) -> None:
        if any(s < 0 for s in self.noise_scales):
            raise ConfigError("noise scales must be >= 0")
        bad = [s for s in self.shifts_s if abs(s) > shift_bound + 1e-12]
        if bad:
            raise ConfigError(f"shifts {bad} exceed the supported bound "
                              f"{shift_bound} s")


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainParams = field(default_factory=TrainParams)
    sweeps: SweepParams = field(default_factory=SweepParams)
    eval_frame_stride: int = 4
    out_dir: str = "runs"
    master_seed: int = 20260815

    def validate(self) -> None:
        self.model.validate()
        self.training.validate()
        self.sweeps.validate()
        if self.eval_frame_stride < 1:
            raise ConfigError("eval_frame_stride must be >= 1")

    @staticmethod
    def from_dict(d: dict) -> "ExperimentConfig":
        known = {"dataset", "model", "training", "sweeps", "eval_frame_stride",
                 "out_dir", "master_seed", "schema_version"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown experiment config fields {sorted(unknown)}")
        cfg = ExperimentConfig(
            dataset=DatasetConfig.from_dict(d.get("dataset", {})),
            model=ModelConfig.from_dict(d.get("model", {})),
            training=_fields_into(TrainParams(), d.get("training", {})),
            sweeps=_fields_into(SweepParams(), d.get("sweeps", {})),
            eval_frame_stride=d.get("eval_frame_stride", 4),
            out_dir=d.get("out_dir", "runs"),
            master_seed=d.get("master_seed", 20260815),
        )
        cfg.validate()
        return cfg

    @staticmethod
    def from_yaml(path: str | Path) -> "ExperimentConfig":
        raw = load_yaml(path)
        require_schema(raw, 1, str(path))
        return ExperimentConfig.from_dict(raw)


def _fields_into(obj, overrides: dict):
    for k, v in overrides.items():
        if not hasattr(obj, k):
            raise ConfigError(f"unknown {type(obj).__name__} field {k!r}")
        setattr(obj, k, v)
    return obj


def derive_seed(master_seed: int, *branch: int) -> int:
    """Stable child seed from the master seed and integer branch labels."""
    ss = np.random.SeedSequence([int(master_seed), *map(int, branch)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


# ---------------------------------------------------------------------------
# Run directories
# ---------------------------------------------------------------------------

_RUN_RE = re.compile(r"^([a-z_]+)-(\d{4})$")


def new_run_dir(root: str | Path, command: str) -> Path:
    """Claim the next free <command>-NNNN directory under root."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    n = 1
    while True:
        cand = root / f"{command}-{n:04d}"
        try:
            cand.mkdir(exist_ok=False)
            return cand
        except FileExistsError:
            n += 1


def mark_complete(run_dir: Path, command: str, extra: dict | None = None) -> None:
    payload = {"command": command, "completed": True,
               "wall_s": None, **(extra or {})}
    with open(run_dir / "status.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def latest_run_dir(root: str | Path, command: str) -> Path | None:
    """Newest completed run of a command, None when there is none."""
    root = Path(root)
    if not root.is_dir():
        return None
    best = None
    best_n = -1
    for child in root.iterdir():
        m = _RUN_RE.match(child.name)
        if not m or m.group(1) != command:
            continue
        if not (child / "status.json").exists():
            continue
        try:
            status = json.loads((child / "status.json").read_text())
        except json.JSONDecodeError:
            continue
        if status.get("completed") and int(m.group(2)) > best_n:
            best_n = int(m.group(2))
            best = child
    return best


class Stopwatch:
    def __init__(self):
        self.t0 = time.time()

    def seconds(self) -> float:
        return time.time() - self.t0
