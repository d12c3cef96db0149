"""Reverse-mode automatic differentiation on float64 numpy arrays.

Small tape-based engine: every op returns a Tensor holding its value, its
parents, and a closure that scatters the upstream gradient. backward() on a
scalar loss walks the tape once in reverse topological order, then frees the
closures so a stale graph cannot be silently re-differentiated.

Only the ops the fusion model needs are provided. All math is float64; shape
mismatches raise ShapeError naming both offending shapes.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.value.shape}{tag}, grad={self.requires_grad})"

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        if not self.requires_grad:
            raise RuntimeError("backward on a tensor that requires no grad")
        if self._backward is _FREED:
            raise RuntimeError("backward already ran on this graph")
        if grad is None:
            if self.value.size != 1:
                raise RuntimeError(
                    f"implicit gradient only for scalars, got shape {self.value.shape}")
            grad = np.ones_like(self.value)

        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        self.accumulate(np.asarray(grad, dtype=np.float64))
        for node in reversed(topo):
            if node._backward is not None and node._backward is not _FREED:
                node._backward(node.grad)
            if node._parents:
                node.grad = None if node is not self else node.grad
                node._backward = _FREED
                node._parents = ()
        # leaves keep their grads; interior nodes are freed above

    # convenience arithmetic
    def __add__(self, other):
        return add(self, other if isinstance(other, Tensor) else constant(other))

    def __sub__(self, other):
        return sub(self, other if isinstance(other, Tensor) else constant(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _FREED(_):  # sentinel; callable so accidental invocation is loud
    raise RuntimeError("gradient tape already freed")


def constant(value) -> Tensor:
    return Tensor(value, requires_grad=False)


def parameter(value, name: str) -> Tensor:
    return Tensor(value, requires_grad=True, name=name)


def _node(value, parents, backward) -> Tensor:
    out = Tensor(value)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    return out


def custom(value: np.ndarray, parents: tuple, backward) -> Tensor:
    """Raw graph node for ops with hand-written forward/backward (e.g. the
    forward-kinematics layer). backward receives the upstream gradient and
    must call .accumulate on each parent that requires grad."""
    return _node(value, parents, backward)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise and linear-algebra primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        value = a.value + b.value
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.shape))
    return _node(value, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        value = a.value * b.value
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")
    av, bv = a.value, b.value

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * bv, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * av, b.shape))
    return _node(value, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    try:
        value = a.value / b.value
    except ValueError:
        raise ShapeError(f"div: shapes {a.shape} and {b.shape} do not broadcast")
    av, bv = a.value, b.value

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g / bv, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g * av / (bv * bv), b.shape))
    return _node(value, (a, b), backward)


def scale(a: Tensor, k: float) -> Tensor:
    def backward(g):
        a.accumulate(k * g)
    return _node(a.value * k, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} @ {b.shape} misaligned")
    value = np.matmul(a.value, b.value)
    av, bv = a.value, b.value

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(bv, -1, -2))
            a.accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(av, -1, -2), g)
            b.accumulate(_unbroadcast(gb, b.shape))
    return _node(value, (a, b), backward)


def transpose(a: Tensor, axes: tuple) -> Tensor:
    inverse = tuple(np.argsort(axes))

    def backward(g):
        a.accumulate(np.transpose(g, inverse))
    return _node(np.transpose(a.value, axes), (a,), backward)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    orig = a.shape

    def backward(g):
        a.accumulate(g.reshape(orig))
    return _node(a.value.reshape(shape), (a,), backward)


def concat(tensors: list, axis: int = 0) -> Tensor:
    if not tensors:
        raise ValueError("concat of nothing")
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(base) or any(
                i != axis % len(base) and other[i] != base[i]
                for i in range(len(base))):
            raise ShapeError(
                f"concat: shapes {tensors[0].shape} and {t.shape} differ off-axis")
    value = np.concatenate([t.value for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t.accumulate(piece)
    return _node(value, tuple(tensors), backward)


def slice_along(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def backward(g):
        full = np.zeros_like(a.value)
        full[index] = g
        a.accumulate(full)
    return _node(a.value[index], (a,), backward)


def sum_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate(np.broadcast_to(g, a.shape).copy())
    return _node(a.value.sum(axis=axis, keepdims=keepdims), (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    def backward(g):
        a.accumulate(np.full(a.shape, float(g)))
    return _node(a.value.sum(), (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.value.size)


def mean_pool(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    return scale(sum_axis(a, axis, keepdims), 1.0 / a.shape[axis])


def sqrt(a: Tensor) -> Tensor:
    value = np.sqrt(a.value)

    def backward(g):
        a.accumulate(g * 0.5 / value)
    return _node(value, (a,), backward)


def exp(a: Tensor) -> Tensor:
    value = np.exp(a.value)

    def backward(g):
        a.accumulate(g * value)
    return _node(value, (a,), backward)


def log(a: Tensor) -> Tensor:
    av = a.value

    def backward(g):
        a.accumulate(g / av)
    return _node(np.log(av), (a,), backward)


def relu(a: Tensor) -> Tensor:
    pos = a.value > 0

    def backward(g):
        a.accumulate(g * pos)
    return _node(np.where(pos, a.value, 0.0), (a,), backward)


def gelu(a: Tensor) -> Tensor:
    """Exact erf form: x * Phi(x)."""
    av = a.value
    cdf = 0.5 * (1.0 + erf(av * _INV_SQRT2))

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * av * av)
        a.accumulate(g * (cdf + av * pdf))
    return _node(av * cdf, (a,), backward)


def softplus(a: Tensor) -> Tensor:
    av = a.value
    value = np.logaddexp(0.0, av)  # stable log(1 + e^x)

    def backward(g):
        a.accumulate(g / (1.0 + np.exp(-av)))
    return _node(value, (a,), backward)


# ---------------------------------------------------------------------------
# Structured ops
# ---------------------------------------------------------------------------

def softmax_masked(scores: Tensor, mask_add=None) -> Tensor:
    """Softmax over the last axis of (scores + mask_add).

    mask_add may be a plain additive array (broadcastable to scores; -inf
    entries zero out the slot exactly) or a Tensor, in which case gradients
    flow into the mask as well. A fully masked row has no distribution and
    raises rather than returning NaNs.
    """
    if isinstance(mask_add, Tensor):
        return softmax_masked(add(scores, mask_add), None)
    s = scores.value if mask_add is None else scores.value + mask_add
    m = s.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise ValueError("softmax row fully masked")
    e = np.exp(s - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        scores.accumulate((g - inner) * y)
    return _node(y, (scores,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} vs feature dim {d}")
    mu = mean_pool(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = mean_pool(mul(centered, centered), axis=-1, keepdims=True)
    inv = div(constant(np.ones(var.shape)), sqrt(add(var, constant(np.full(var.shape, eps)))))
    return add(mul(mul(centered, inv), gain), bias)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight + bias, weight (d_in, d_out)."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} vs weight {weight.shape}")
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def sinusoidal_pe(n_pos: int, dim: int) -> np.ndarray:
    """Fixed positional encoding: pe[p, 2i] = sin(p / 10000^(2i/dim)),
    pe[p, 2i+1] = cos of the same argument."""
    pe = np.zeros((n_pos, dim))
    pos = np.arange(n_pos)[:, None]
    i2 = np.arange(0, dim, 2)
    arg = pos / np.power(10000.0, i2 / dim)[None, :]
    pe[:, 0::2] = np.sin(arg)
    pe[:, 1::2] = np.cos(arg)[:, : pe[:, 1::2].shape[1]]
    return pe


def multi_head_attention(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor,
                         wo: Tensor, n_heads: int,
                         mask_add=None) -> tuple[Tensor, Tensor]:
    """Self-attention over (B, T, d) tokens.

    mask_add is broadcast-added to the raw scores; pass a Tensor to make the
    mask itself trainable. Returns (output (B, T, d), attention weights
    (B, heads, T, T)); the weights are part of the graph, so gradients flow
    through them, and their value can be read off for attention probes.
    """
    if x.ndim != 3:
        raise ShapeError(f"attention expects (B, T, d), got {x.shape}")
    B, T, d = x.shape
    if d % n_heads != 0:
        raise ShapeError(f"model dim {d} not divisible by {n_heads} heads")
    dk = d // n_heads

    def split_heads(t):
        return transpose(reshape(t, (B, T, n_heads, dk)), (0, 2, 1, 3))

    q = split_heads(matmul(x, wq))
    k = split_heads(matmul(x, wk))
    v = split_heads(matmul(x, wv))
    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dk))
    attn = softmax_masked(scores, mask_add)
    ctx = matmul(attn, v)                                  # (B, h, T, dk)
    merged = reshape(transpose(ctx, (0, 2, 1, 3)), (B, T, d))
    return matmul(merged, wo), attn


def cross(a: Tensor, b: Tensor) -> Tensor:
    """Cross product along the last axis (size 3)."""
    if a.shape[-1] != 3 or b.shape[-1] != 3 or a.shape != b.shape:
        raise ShapeError(f"cross: shapes {a.shape} x {b.shape}")
    av, bv = a.value, b.value

    def backward(g):
        if a.requires_grad:
            a.accumulate(np.cross(bv, g))
        if b.requires_grad:
            b.accumulate(np.cross(g, av))
    return _node(np.cross(av, bv), (a, b), backward)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1) -> Tensor:
    """Valid-mode strided convolution, x (B, C, H, W), kernel (O, C, kh, kw)."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d: input {x.shape}, kernel {kernel.shape}")
    B, C, H, W = x.shape
    O, Ck, kh, kw = kernel.shape
    if C != Ck:
        raise ShapeError(f"conv2d: input channels {x.shape} vs kernel {kernel.shape}")
    Ho = (H - kh) // stride + 1
    Wo = (W - kw) // stride + 1
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(f"conv2d: kernel {kernel.shape} larger than input {x.shape}")
    windows = np.lib.stride_tricks.sliding_window_view(x.value, (kh, kw), axis=(2, 3))
    patches = windows[:, :, ::stride, ::stride]            # (B, C, Ho, Wo, kh, kw)
    value = np.einsum("bcxykl,ockl->boxy", patches, kernel.value, optimize=True)
    kv = kernel.value

    def backward(g):
        if kernel.requires_grad:
            kernel.accumulate(
                np.einsum("boxy,bcxykl->ockl", g, patches, optimize=True))
        if x.requires_grad:
            gx = np.zeros_like(x.value)
            spread = np.einsum("boxy,ockl->bcxykl", g, kv, optimize=True)
            for a in range(kh):
                for b in range(kw):
                    gx[:, :, a:a + stride * Ho:stride,
                       b:b + stride * Wo:stride] += spread[..., a, b]
            x.accumulate(gx)
    return _node(value, (x, kernel), backward)
