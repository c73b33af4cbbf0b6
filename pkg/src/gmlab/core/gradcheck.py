"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from gmlab.core.tensor import Tensor, backward
from gmlab.errors import ContractViolation


def numeric_grad(f: Callable[[], Tensor], x: Tensor, eps: float, coords=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x`` (perturbed in place)."""
    flat = x.data.reshape(-1)
    out = np.zeros(flat.size)
    idx = range(flat.size) if coords is None else coords
    for k in idx:
        orig = flat[k]
        flat[k] = orig + eps
        fp = f().item()
        flat[k] = orig - eps
        fm = f().item()
        flat[k] = orig
        out[k] = (fp - fm) / (2.0 * eps)
    return out.reshape(x.shape)


def grad_check(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    eps: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max over coordinates of |analytic - numeric| / max(1, |numeric|).

    ``f`` is called as ``f(*xs)`` and must rebuild its graph on every call
    (any randomness inside it must come from a fixed-seed stream).  With
    ``max_coords`` only that many coordinates per input are probed, chosen
    by a seeded permutation.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        if not t.requires_grad:
            raise ContractViolation("grad_check inputs must require grad")

    def call():
        return f(*xs)

    first = call().item()
    again = call().item()
    if first != again:
        raise ContractViolation(f"grad_check: f is not deterministic ({first!r} != {again!r})")

    saved = [t.grad for t in xs]
    for t in xs:
        t.grad = None
    backward(call())
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in xs]
    for t, g in zip(xs, saved):
        t.grad = g

    perm_rng = np.random.default_rng(seed)
    worst = 0.0
    for t, ga in zip(xs, analytic):
        coords = None
        if max_coords is not None and t.size > max_coords:
            coords = np.sort(perm_rng.permutation(t.size)[:max_coords])
        gn = numeric_grad(call, t, eps, coords)
        diff = np.abs(ga - gn) / np.maximum(1.0, np.abs(gn))
        if coords is not None:
            diff = diff.reshape(-1)[coords]
        worst = max(worst, float(diff.max(initial=0.0)))
    return worst
