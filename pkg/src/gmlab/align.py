"""Stochastic hard monotonic alignment.

Conventions used throughout:

* ``p[i, j] = sigmoid(e[i, j])`` is the probability of STAYING at encoder
  position ``j`` at decoder step ``i``; ``1 - p`` advances to ``j + 1``.
* Row 0 of every alignment matrix is the initial state ``[1, 0, ..., 0]``;
  row ``i`` is the state after ``i`` decisions, so row 0 of ``p``/``u`` is
  never read.
* At the last valid encoder position the stay decision is forced, which
  keeps every row on the simplex.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from gmlab.core import ops
from gmlab.core.rng import Rng
from gmlab.core.tensor import Tensor, as_tensor, make_op
from gmlab.errors import ContractViolation

ALIGN_MODES = ("st_gumbel", "gumbel", "noise", "soft", "cross")
MONOTONIC_MODES = ("st_gumbel", "gumbel", "noise", "soft")
BRUTE_FORCE_LIMIT = 6
S_HI = 2.0
S_LO = 0.1
_NEG_INF = -1e9


@dataclass
class EnergyMatrix:
    e: Tensor  # (..., I, J)

    @property
    def p(self) -> Tensor:
        return ops.sigmoid(self.e)


def energies(H, Y) -> EnergyMatrix:
    """Dot-product energies ``e[i, j] = h_i . y_j`` for all pairs at once."""
    H, Y = as_tensor(H), as_tensor(Y)
    if H.shape[-1] != Y.shape[-1]:
        raise ContractViolation(f"energies: feature dims differ ({H.shape[-1]} vs {Y.shape[-1]})")
    return EnergyMatrix(H @ ops.swapaxes(Y, -1, -2))


def _last_columns(lead: tuple[int, ...], J: int, last) -> np.ndarray:
    if last is None:
        return np.full(lead, J - 1, dtype=np.int64)
    last = np.broadcast_to(np.asarray(last, dtype=np.int64), lead)
    if np.any(last < 0) or np.any(last >= J):
        raise ContractViolation("last valid encoder position out of range")
    return last


def _clamp_mask(lead, J, last) -> np.ndarray:
    cols = _last_columns(lead, J, last)
    return np.arange(J) == cols[..., None]


def monotonic_alignment(u, last=None) -> Tensor:
    """Run ``alpha_i = alpha_{i-1} * u_i + shift(alpha_{i-1} * (1 - u_i))`` from ``alpha_0 = e_0``.

    ``u`` has shape (..., I, J) and may be hard (0/1) or relaxed; ``last``
    gives the last valid encoder column per sequence (default ``J - 1``),
    where ``u`` is forced to 1.  Implemented as one tape node with a
    hand-written reverse recursion.
    """
    u = as_tensor(u)
    if u.ndim < 2:
        raise ContractViolation("monotonic_alignment expects (..., I, J)")
    *lead, I, J = u.shape
    lead = tuple(lead)
    clamp = _clamp_mask(lead, J, last)[..., None, :]
    ud = np.where(clamp, 1.0, u.data)
    alpha = np.zeros(ud.shape)
    alpha[..., 0, 0] = 1.0
    for i in range(1, I):
        a = alpha[..., i - 1, :]
        ui = ud[..., i, :]
        alpha[..., i, :] = a * ui
        alpha[..., i, 1:] += (a * (1.0 - ui))[..., :-1]

    def bw(g):
        gu = np.zeros(ud.shape)
        gi = g[..., I - 1, :].copy()
        for i in range(I - 1, 0, -1):
            a = alpha[..., i - 1, :]
            ui = ud[..., i, :]
            sg = np.zeros_like(gi)
            sg[..., :-1] = gi[..., 1:]
            gu[..., i, :] = a * (gi - sg)
            gi = g[..., i - 1, :] + gi * ui + (1.0 - ui) * sg
        gu[np.broadcast_to(clamp, gu.shape)] = 0.0
        return (gu,)

    return make_op(alpha, (u,), bw, "monotonic_alignment")


def soft_expected_alignment(p, last=None) -> Tensor:
    """Marginal position distribution per decoder step (the expected alignment)."""
    return monotonic_alignment(p, last)


def brute_force_expected_alignment(p, last: int | None = None) -> np.ndarray:
    """Exact marginals by enumerating every stay/advance path (small I only)."""
    p = np.asarray(p.data if isinstance(p, Tensor) else p, dtype=np.float64)
    if p.ndim != 2:
        raise ContractViolation("brute force oracle takes a single (I, J) matrix")
    I, J = p.shape
    if I > BRUTE_FORCE_LIMIT or J > BRUTE_FORCE_LIMIT:
        raise ContractViolation(f"instance {I}x{J} too large to enumerate (limit {BRUTE_FORCE_LIMIT})")
    end = J - 1 if last is None else int(last)
    alpha = np.zeros((I, J))
    for moves in itertools.product((0, 1), repeat=I - 1):
        pos, weight = 0, 1.0
        alpha_path = [0]
        for i, adv in enumerate(moves, start=1):
            if pos == end:
                if adv:
                    weight = 0.0
                    break
            elif adv:
                weight *= 1.0 - p[i, pos]
                pos += 1
            else:
                weight *= p[i, pos]
            alpha_path.append(pos)
        if weight == 0.0:
            continue
        for i, pos_i in enumerate(alpha_path):
            alpha[i, pos_i] += weight
    return alpha


@dataclass
class StGumbelSample:
    u_forward: np.ndarray  # hard 0/1 draws
    u_backward: Tensor  # relaxed surrogate in (0, 1)
    u: Tensor  # what the recursion consumes under the chosen mode
    s: float
    g1: np.ndarray
    g2: np.ndarray
    mode: str


def relaxed_bernoulli(e, s: float, g1, g2) -> Tensor:
    """``exp((log p + g1)/s) / (exp((log p + g1)/s) + exp((log(1-p) + g2)/s))`` with ``p = sigmoid(e)``.

    Written as ``sigmoid((e + g1 - g2) / s)``, which is the same quantity
    since ``log p - log(1 - p) = e``.
    """
    return ops.sigmoid((as_tensor(e) + (np.asarray(g1) - np.asarray(g2))) / s)


def st_bernoulli(e, s: float, rng: Rng, mode: str = "st_gumbel") -> StGumbelSample:
    """Bernoulli stay decisions with a Gumbel-relaxed gradient path.

    The hard draw is coupled to the relaxation: ``u_forward = 1[e + g1 - g2 > 0]``,
    which is exactly Bernoulli(sigmoid(e)) and is the ``s -> 0`` limit of
    ``u_backward`` for the same draws.  ``mode`` picks what the recursion
    sees: ``st_gumbel`` hard values with relaxed gradients, ``gumbel`` the
    relaxed values, ``noise`` sigmoid of the energy plus unit Gaussian noise,
    ``soft`` plain sigmoid probabilities.
    """
    if s <= 0:
        raise ContractViolation("relaxation temperature must be positive")
    if mode not in MONOTONIC_MODES:
        raise ContractViolation(f"st_bernoulli mode must be one of {MONOTONIC_MODES}")
    e = as_tensor(e)
    g1 = rng.gumbel(e.shape)
    g2 = rng.gumbel(e.shape)
    u_forward = (e.data + g1 - g2 > 0).astype(np.float64)
    u_backward = relaxed_bernoulli(e, s, g1, g2)
    if mode == "st_gumbel":
        u = ops.straight_through(u_forward, u_backward)
    elif mode == "gumbel":
        u = u_backward
    elif mode == "noise":
        u = ops.sigmoid(e + rng.normal(e.shape))
    else:
        u = ops.sigmoid(e)
    return StGumbelSample(u_forward, u_backward, u, s, g1, g2, mode)


def is_one_hot(v: np.ndarray) -> bool:
    v = np.asarray(v)
    return bool(np.all((v == 0) | (v == 1)) and np.all(v.sum(axis=-1) == 1))


def hard_align_step(alpha_prev, u_row, last: int | None = None, check: bool = True) -> Tensor:
    """One update: stay where ``u = 1``, advance one position where ``u = 0``.

    ``u_row`` may be a straight-through tensor; the algebra is the same so
    gradients follow its surrogate.  The last valid position always stays.
    """
    alpha_prev, u_row = as_tensor(alpha_prev), as_tensor(u_row)
    if alpha_prev.shape != u_row.shape:
        raise ContractViolation(f"hard_align_step: {alpha_prev.shape} vs {u_row.shape}")
    if check and not is_one_hot(alpha_prev.data):
        raise ContractViolation("hard_align_step needs a one-hot alignment")
    J = u_row.shape[-1]
    clamp = _clamp_mask(u_row.shape[:-1], J, last)
    u = ops.where(clamp, 1.0, u_row)
    return alpha_prev * u + ops.shift_right(alpha_prev * (1.0 - u), 1)


def context(Y, alpha, h) -> Tensor:
    """``c_i = Y^T alpha_i + h_i`` (works batched over rows of ``alpha``/``h``)."""
    Y, alpha, h = as_tensor(Y), as_tensor(alpha), as_tensor(h)
    if alpha.shape[-1] != Y.shape[-2] or Y.shape[-1] != h.shape[-1]:
        raise ContractViolation(f"context: Y {Y.shape}, alpha {alpha.shape}, h {h.shape}")
    if alpha.ndim == 1:
        return ops.reshape(ops.reshape(alpha, (1, -1)) @ Y, (Y.shape[-1],)) + h
    return alpha @ Y + h


def cross_attention(e, last=None) -> Tensor:
    """Plain softmax attention over valid encoder positions (no monotonic machinery)."""
    e = as_tensor(e)
    *lead, I, J = e.shape
    cols = _last_columns(tuple(lead), J, last)
    invalid = np.arange(J) > cols[..., None]
    bias = np.where(invalid, _NEG_INF, 0.0)[..., None, :]
    return ops.softmax(e + bias, axis=-1)


def temperature_schedule(step: int, total: int, s_hi: float = S_HI, s_lo: float = S_LO) -> float:
    """Geometric decay from ``s_hi`` at step 0 to ``s_lo`` at ``total``."""
    if total <= 0:
        raise ContractViolation("temperature schedule needs total > 0")
    if not 0 <= step <= total:
        raise ContractViolation(f"step {step} outside [0, {total}]")
    return float(s_hi * (s_lo / s_hi) ** (step / total))


def align(
    e: Tensor,
    mode: str,
    s: float,
    rng: Rng,
    last=None,
    training: bool = True,
    greedy: bool = False,
) -> tuple[Tensor, StGumbelSample | None]:
    """Alignment matrix for a batch of energies under ``mode``.

    Monotonic modes use their training relaxation only when ``training``;
    at inference every monotonic mode samples hard Bernoulli decisions (or
    thresholds at 0.5 when ``greedy``), so they differ only in how they
    were trained.  ``cross`` is a softmax in both phases.
    """
    if mode not in ALIGN_MODES:
        raise ContractViolation(f"unknown align mode '{mode}'")
    if mode == "cross":
        return cross_attention(e, last), None
    if training:
        smp = st_bernoulli(e, s, rng, mode)
        return monotonic_alignment(smp.u, last), smp
    if greedy:
        u = (e.data > 0).astype(np.float64)
    else:
        u = rng.bernoulli(expit(e.data))
    return monotonic_alignment(Tensor(u), last), None


def alignment_trace(alpha) -> np.ndarray:
    a = alpha.data if isinstance(alpha, Tensor) else np.asarray(alpha)
    return np.argmax(a, axis=-1)


def is_monotone_trace(trace) -> bool:
    t = np.asarray(trace)
    if t.size == 0:
        return True
    d = np.diff(t)
    return bool(t[0] == 0 and np.all((d == 0) | (d == 1)))
