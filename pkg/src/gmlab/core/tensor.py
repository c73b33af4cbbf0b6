"""Dense float64 tensors with a define-by-run reverse-mode tape.

Every op returns a fresh :class:`Tensor`.  When any input requires a
gradient the result keeps references to its parents plus a closure that maps
the upstream gradient to per-parent gradients.  :func:`backward` orders the
graph topologically and visits each node once.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from gmlab.errors import ContractViolation, GradError, NumericError

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

LOG_2PI = float(np.log(2.0 * np.pi))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_consumed")

    __array_priority__ = 1000  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._consumed = False

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _bad_item(self)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators -----------------------------------------------------
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, k):
        return power(self, k)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # -- method forms --------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    @property
    def T(self):
        return swapaxes(self, -1, -2)

    def backward(self) -> None:
        backward(self)


def _bad_item(t: Tensor):
    raise ContractViolation(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NumericError(op)


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    """Wrap an op result and record it on the tape when a parent needs grads.

    ``backward_fn`` receives the upstream gradient (same shape as ``data``)
    and returns one gradient (or ``None``) per parent, in order.  Custom ops
    elsewhere in the package use this as their only hook into the engine.
    """
    data = np.asarray(data, dtype=np.float64)
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out._consumed = False
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_shapes(op: str, *shapes) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError as exc:
        raise ContractViolation(f"{op}: shapes {shapes} do not broadcast") from exc


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


class Tape:
    """Nodes reachable from a root, parents strictly before children."""

    def __init__(self, root: Tensor):
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self.nodes = order

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``.

    Leaf gradients accumulate across calls; the graph itself is released
    after one pass, so calling this twice on the same graph raises.
    """
    if not isinstance(loss, Tensor):
        raise GradError("backward() expects a Tensor")
    if loss.data.size != 1:
        raise GradError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GradError("graph already consumed by an earlier backward(); rebuild it")
    if not loss.requires_grad:
        raise GradError("loss is detached from every parameter")
    tape = Tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        if node._consumed:
            raise GradError(f"node '{node.op}' belongs to a consumed graph")
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        pgrads = node._backward(g)
        for parent, pg in zip(node._parents, pgrads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for node in tape.nodes:
        if node._backward is not None:
            node._consumed = True
            node._backward = None
            node._parents = ()


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return make_op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return make_op(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes("mul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return make_op(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes("div", a.shape, b.shape)
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd

    def bw(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return make_op(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_op(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, k: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad**k
    return make_op(out, (a,), lambda g: (g * k * ad ** (k - 1),), "pow")


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return make_op(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return make_op(out, (a,), lambda g: (g / ad,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return make_op(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def abs_(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return make_op(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return make_op(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return make_op(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = expit(a.data)
    return make_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return make_op(np.logaddexp(0.0, ad), (a,), lambda g: (g * expit(ad),), "softplus")


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim == 0:
        raise ContractViolation("matmul: scalar operands are not allowed")
    if ad.shape[-1] != bd.shape[-2 if bd.ndim > 1 else 0]:
        raise ContractViolation(f"matmul: inner dims differ, {ad.shape} @ {bd.shape}")
    try:
        out = ad @ bd
    except ValueError as exc:
        raise ContractViolation(f"matmul: {ad.shape} @ {bd.shape}: {exc}") from exc

    def bw(g):
        A = ad[None, :] if ad.ndim == 1 else ad
        B = bd[:, None] if bd.ndim == 1 else bd
        G = g
        if bd.ndim == 1:
            G = np.expand_dims(G, -1)
        if ad.ndim == 1:
            G = np.expand_dims(G, -2)
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(G @ np.swapaxes(B, -1, -2), A.shape).reshape(ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(A, -1, -2) @ G, B.shape).reshape(bd.shape)
        return ga, gb

    return make_op(out, (a, b), bw, "matmul")


def solve_lower(L, b) -> Tensor:
    """Solve ``L z = b`` for lower-triangular ``L`` of shape (..., D, D), ``b`` (..., D).

    Only the lower triangle of ``L`` is read, so its gradient is lower triangular too.
    """
    L, b = as_tensor(L), as_tensor(b)
    if L.shape[-1] != L.shape[-2] or L.shape[-1] != b.shape[-1]:
        raise ContractViolation(f"solve_lower: shapes {L.shape}, {b.shape}")
    Ld = np.tril(L.data)
    bd = np.broadcast_to(b.data, np.broadcast_shapes(L.shape[:-1], b.shape))
    z = np.linalg.solve(Ld, bd[..., None])[..., 0]

    def bw(g):
        gb = np.linalg.solve(np.swapaxes(Ld, -1, -2), g[..., None])[..., 0]
        gL = None
        if L.requires_grad:
            gL = _unbroadcast(np.tril(-gb[..., :, None] * z[..., None, :]), Ld.shape)
        return gL, _unbroadcast(gb, b.shape) if b.requires_grad else None

    return make_op(z, (L, b), bw, "solve_lower")


# ---------------------------------------------------------------------------
# Reductions and normalizers
# ---------------------------------------------------------------------------


def _expand_reduced(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)
    return make_op(out, (a,), lambda g: (_expand_reduced(g, shape, axis, keepdims),), "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / max(out.size, 1)
    return make_op(out, (a,), lambda g: (_expand_reduced(g / count, shape, axis, keepdims),), "mean")


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    m = ad.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.exp(ad - m)
    tot = s.sum(axis=axis, keepdims=True)
    out_k = m + np.log(tot)
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)
    w = s / tot

    def bw(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return (gk * w,)

    return make_op(out, (a,), bw, "logsumexp")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    z = np.exp(ad - ad.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)
    return make_op(out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),), "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    m = ad.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(ad - m).sum(axis=axis, keepdims=True))
    out = ad - lse
    sm = np.exp(out)
    return make_op(out, (a,), lambda g: (g - sm * g.sum(axis=axis, keepdims=True),), "log_softmax")


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ContractViolation(f"reshape: {old} -> {shape}") from exc
    return make_op(out, (a,), lambda g: (g.reshape(old),), "reshape")


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    return make_op(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),), "swapaxes")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    _broadcast_shapes("broadcast_to", old, tuple(shape))
    return make_op(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, old),), "broadcast_to")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ContractViolation("concat: empty input")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ContractViolation(f"concat: {[t.shape for t in ts]}") from exc
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return make_op(out, ts, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ContractViolation("stack: empty input")
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ContractViolation(f"stack: {[t.shape for t in ts]}") from exc
    n = len(ts)
    return make_op(out, ts, lambda g: tuple(np.moveaxis(g, axis, 0)[i] for i in range(n)), "stack")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    try:
        out = a.data[idx]
    except IndexError as exc:
        raise ContractViolation(f"getitem: {exc}") from exc
    basic = _is_basic_index(idx)

    def bw(g):
        z = np.zeros(shape)
        if basic:
            z[idx] = g
        else:
            np.add.at(z, idx, g)
        return (z,)

    return make_op(np.array(out), (a,), bw, "getitem")


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis`` with an integer index array (embedding lookup, windows)."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    shape = a.shape
    axis = axis % a.ndim
    if idx.size and (idx.min() < -shape[axis] or idx.max() >= shape[axis]):
        raise ContractViolation(f"take: index out of range for axis of size {shape[axis]}")
    out = np.take(a.data, idx, axis=axis)

    def bw(g):
        z = np.zeros(shape)
        gflat = g.reshape(shape[:axis] + (idx.size,) + shape[axis + 1 :])
        np.add.at(z, (slice(None),) * axis + (idx.ravel(),), gflat)
        return (z,)

    return make_op(out, (a,), bw, "take")


def shift_right(a, n: int = 1, axis: int = -1) -> Tensor:
    """Shift along ``axis`` by ``n``: drop the last ``n`` entries, zero-fill the front."""
    a = as_tensor(a)
    ad = np.moveaxis(a.data, axis, -1)
    out = np.zeros_like(ad)
    if n < ad.shape[-1]:
        out[..., n:] = ad[..., : ad.shape[-1] - n]
    out = np.moveaxis(out, -1, axis)

    def bw(g):
        gm = np.moveaxis(g, axis, -1)
        z = np.zeros_like(gm)
        if n < gm.shape[-1]:
            z[..., : gm.shape[-1] - n] = gm[..., n:]
        return (np.moveaxis(z, -1, axis),)

    return make_op(out, (a,), bw, "shift_right")


def where(cond, a, b) -> Tensor:
    """Select ``a`` where ``cond`` holds else ``b``; ``cond`` is a constant mask."""
    a, b = as_tensor(a), as_tensor(b)
    c = np.asarray(cond, dtype=bool)
    sa, sb = a.shape, b.shape
    out = np.where(c, a.data, b.data)
    return make_op(
        out,
        (a, b),
        lambda g: (_unbroadcast(np.where(c, g, 0.0), sa), _unbroadcast(np.where(c, 0.0, g), sb)),
        "where",
    )


def straight_through(forward_value, surrogate) -> Tensor:
    """Forward value ``forward_value``; gradient routed unchanged to ``surrogate``."""
    surrogate = as_tensor(surrogate)
    fv = np.asarray(forward_value.data if isinstance(forward_value, Tensor) else forward_value, dtype=np.float64)
    if fv.shape != surrogate.shape:
        raise ContractViolation(f"straight_through: {fv.shape} vs {surrogate.shape}")
    return make_op(fv.copy(), (surrogate,), lambda g: (g,), "straight_through")
