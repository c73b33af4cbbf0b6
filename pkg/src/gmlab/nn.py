"""Small building blocks: parameter containers, linear maps, attention."""
from __future__ import annotations

import numpy as np

from gmlab.core import ops
from gmlab.core.rng import Rng
from gmlab.core.tensor import Tensor, as_tensor, make_op, parameter
from gmlab.errors import ContractViolation

_MASKED = -1e9


class Module:
    """Parameter container; ``parameters()`` walks attributes in definition order."""

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, val in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(val, Tensor) and val.requires_grad:
                out[key] = val
            elif isinstance(val, Module):
                out.update(val.parameters(key + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.parameters(f"{key}.{i}."))
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
        params = self.parameters(prefix)
        missing = [k for k in params if k not in arrays]
        if missing:
            raise ContractViolation(f"checkpoint lacks parameters: {missing[:5]}")
        for k, p in params.items():
            a = np.asarray(arrays[k], dtype=np.float64)
            if a.shape != p.shape:
                raise ContractViolation(f"parameter {k}: checkpoint shape {a.shape} != model shape {p.shape}")
            p.data = a.copy()


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: Rng, bias: bool = True, zero: bool = False):
        w = np.zeros((d_in, d_out)) if zero else rng.normal((d_in, d_out)) / np.sqrt(d_in)
        self.weight = parameter(w)
        self.bias = parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x) -> Tensor:
        y = as_tensor(x) @ self.weight
        return y + self.bias if self.bias is not None else y


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis; fused forward/backward."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data
    n = xd.shape[-1]

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gb = g.sum(axis=lead) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / n)
        return gx, gg, gb

    return make_op(xhat * gd + bias.data, (x, gain, bias), bw, "layer_norm")


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gain = parameter(np.ones(d))
        self.bias = parameter(np.zeros(d))

    def __call__(self, x) -> Tensor:
        return layer_norm(x, self.gain, self.bias)


def sinusoidal_positions(n: int, d: int, offset: int = 0) -> np.ndarray:
    pos = np.arange(offset, offset + n, dtype=np.float64)[:, None]
    i = np.arange(d)[None, :]
    rates = 1.0 / np.power(10000.0, (2 * (i // 2)) / d)
    ang = pos * rates
    return np.where(i % 2 == 0, np.sin(ang), np.cos(ang))


def attention_bias(key_valid: np.ndarray, causal: bool) -> np.ndarray:
    """Additive mask of shape (B, 1, T_q, T_k) from a (B, T_k) validity mask."""
    kv = np.asarray(key_valid, dtype=bool)
    B, T = kv.shape
    allowed = np.broadcast_to(kv[:, None, None, :], (B, 1, T, T))
    if causal:
        allowed = allowed & np.tril(np.ones((T, T), dtype=bool))
    # a fully masked query row (padding) attends to itself to stay finite
    allowed = allowed | np.eye(T, dtype=bool)
    return np.where(allowed, 0.0, _MASKED)


class MultiHeadAttention(Module):
    def __init__(self, d: int, heads: int, rng: Rng):
        if d % heads:
            raise ContractViolation(f"model dim {d} not divisible by {heads} heads")
        self.heads = heads
        self.qkv = Linear(d, 3 * d, rng)
        self.out = Linear(d, d, rng)

    def __call__(self, x: Tensor, bias: np.ndarray) -> Tensor:
        B, T, D = x.shape
        H = self.heads
        dh = D // H
        qkv = ops.reshape(self.qkv(x), (B, T, 3, H, dh))
        q = ops.swapaxes(qkv[:, :, 0], 1, 2)
        k = ops.swapaxes(qkv[:, :, 1], 1, 2)
        v = ops.swapaxes(qkv[:, :, 2], 1, 2)
        scores = (q @ ops.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dh)) + bias
        ctx = ops.softmax(scores, axis=-1) @ v
        return self.out(ops.reshape(ops.swapaxes(ctx, 1, 2), (B, T, D)))


class Block(Module):
    """Pre-norm transformer block: self-attention then a ReLU feedforward."""

    def __init__(self, d: int, heads: int, rng: Rng, ff_mult: int = 2):
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads, rng)
        self.ln2 = LayerNorm(d)
        self.ff1 = Linear(d, ff_mult * d, rng)
        self.ff2 = Linear(ff_mult * d, d, rng)

    def __call__(self, x: Tensor, bias: np.ndarray) -> Tensor:
        x = x + self.attn(self.ln1(x), bias)
        return x + self.ff2(ops.relu(self.ff1(self.ln2(x))))
