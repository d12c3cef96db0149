"""AdamW, parameter initialization, and checkpoint serialization."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import container
from .autodiff import Tensor


class OptimError(RuntimeError):
    pass


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int,
                   shape: tuple) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape)


class AdamW:
    """Adam with decoupled weight decay.

    update: p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)
    A non-finite gradient aborts the step and names the parameter.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 betas: tuple = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.value) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise OptimError(f"non-finite gradient for parameter {name!r}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.value -= self.lr * (update + self.weight_decay * p.value)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"opt/t": np.array([self.t], dtype=np.int64)}
        for name in self.params:
            out[f"opt/m/{name}"] = self.m[name]
            out[f"opt/v/{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays["opt/t"][0])
        for name in self.params:
            self.m[name] = np.array(arrays[f"opt/m/{name}"], dtype=np.float64)
            self.v[name] = np.array(arrays[f"opt/v/{name}"], dtype=np.float64)


def save_checkpoint(path: str | Path, params: dict[str, Tensor],
                    optimizer: AdamW | None = None,
                    metadata: dict | None = None) -> None:
    arrays: dict[str, np.ndarray] = {}
    for name, p in params.items():
        arrays[f"param/{name}"] = np.asarray(p.value, dtype=np.float64)
    if optimizer is not None:
        arrays.update(optimizer.state_arrays())
    container.write_text_block(arrays, "meta",
                               json.dumps(metadata or {}, sort_keys=True))
    container.write_arrays(path, arrays)


def load_checkpoint(path: str | Path) -> tuple[dict, dict, dict]:
    """Returns (param arrays by name, optimizer arrays, metadata)."""
    raw = container.read_arrays(path)
    meta = json.loads(container.read_text_block(raw, "meta"))
    params = {k[len("param/"):]: v for k, v in raw.items() if k.startswith("param/")}
    opt = {k: v for k, v in raw.items() if k.startswith("opt/")}
    return params, opt, meta


def restore_params(params: dict[str, Tensor], arrays: dict[str, np.ndarray]) -> None:
    """Load checkpoint arrays into live parameters, strict on names/shapes."""
    missing = set(params) - set(arrays)
    extra = set(arrays) - set(params)
    if missing or extra:
        raise OptimError(f"checkpoint mismatch: missing {sorted(missing)}, "
                         f"unexpected {sorted(extra)}")
    for name, p in params.items():
        arr = np.asarray(arrays[name], dtype=np.float64)
        if arr.shape != p.value.shape:
            raise OptimError(f"parameter {name!r}: checkpoint shape {arr.shape} "
                             f"vs model shape {p.value.shape}")
        p.value = arr.copy()
