"""Mixture-density output head: activation, NLL, sampling, stop-token loss."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from gmlab.core import ops
from gmlab.core.rng import Rng
from gmlab.core.tensor import Tensor, as_tensor
from gmlab.errors import ContractViolation
from gmlab.gmm import COV_TYPES, GmmParams, gmm_log_density

SCALE_FLOOR = 1e-4
STOP_POS_WEIGHT = 5.0


def raw_size(n: int, d: int, cov_type: str = "diagonal") -> int:
    if cov_type == "diagonal":
        return n + 2 * n * d
    if cov_type == "full":
        return n + n * d + n * d * (d + 1) // 2
    raise ContractViolation(f"unknown cov_type '{cov_type}'")


@lru_cache(maxsize=None)
def _tril_layout(d: int) -> tuple[np.ndarray, np.ndarray]:
    """Index map (d, d) into a packed row-major lower triangle plus a zero slot,
    and the mask of packed entries lying on the diagonal."""
    m = d * (d + 1) // 2
    idx = np.full((d, d), m, dtype=np.int64)
    is_diag = np.zeros(m, dtype=bool)
    k = 0
    for i in range(d):
        for j in range(i + 1):
            idx[i, j] = k
            is_diag[k] = i == j
            k += 1
    return idx, is_diag


@dataclass
class MdnOutput:
    """Activated head output for ``N`` components over ``D`` dims."""

    weight_logits: Tensor  # (..., N)
    means: Tensor  # (..., N, D)
    cov_type: str
    scales: Tensor | None = None  # (..., N, D)
    chol: Tensor | None = None  # (..., N, D, D)

    @property
    def weights(self) -> np.ndarray:
        z = self.weight_logits.data
        z = np.exp(z - z.max(axis=-1, keepdims=True))
        return z / z.sum(axis=-1, keepdims=True)

    def gmm(self) -> GmmParams:
        return GmmParams(ops.log_softmax(self.weight_logits, axis=-1), self.means, self.cov_type, self.scales, self.chol)


def parameterize(raw, n: int, d: int, cov_type: str = "diagonal", floor: float = SCALE_FLOOR) -> MdnOutput:
    """Split a raw head vector into (weight logits, means, scales) and activate.

    Scales go through softplus plus ``floor``; for full covariance only the
    Cholesky diagonal is softplus-constrained and the rest stays raw.
    """
    raw = as_tensor(raw)
    if cov_type not in COV_TYPES:
        raise ContractViolation(f"unknown cov_type '{cov_type}'")
    if raw.shape[-1] != raw_size(n, d, cov_type):
        raise ContractViolation(
            f"raw head output has length {raw.shape[-1]}, expected {raw_size(n, d, cov_type)}"
        )
    lead = raw.shape[:-1]
    logits = raw[..., :n]
    means = ops.reshape(raw[..., n : n + n * d], lead + (n, d))
    rest = raw[..., n + n * d :]
    if cov_type == "diagonal":
        scales = ops.softplus(ops.reshape(rest, lead + (n, d))) + floor
        return MdnOutput(logits, means, cov_type, scales=scales)
    idx, is_diag = _tril_layout(d)
    m = d * (d + 1) // 2
    packed = ops.reshape(rest, lead + (n, m))
    packed = ops.where(is_diag, ops.softplus(packed) + floor, packed)
    padded = ops.concat([packed, Tensor(np.zeros(lead + (n, 1)))], axis=-1)
    chol = ops.take(padded, idx, axis=-1)
    return MdnOutput(logits, means, cov_type, chol=chol)


def nll(target, out: MdnOutput) -> Tensor:
    """-log p(target) under the head's mixture; shape follows the batch dims."""
    return -gmm_log_density(target, out.gmm())


def regression_loss(target, prediction) -> Tensor:
    """L1 distance summed over feature dims (means-only head)."""
    return ops.abs_(as_tensor(target) - prediction).sum(axis=-1)


def sample_frame(out: MdnOutput, temperature: float, rng: Rng) -> np.ndarray:
    """Sample frames; temperature scales both component logits and spread.

    ``temperature == 0`` returns the mean of the most probable component.
    """
    if temperature < 0:
        raise ContractViolation("temperature must be nonnegative")
    logits = out.weight_logits.data
    means = out.means.data
    if temperature == 0:
        c = np.argmax(logits, axis=-1)
        return np.take_along_axis(means, c[..., None, None], axis=-2)[..., 0, :]
    g = rng.gumbel(logits.shape)
    c = np.argmax(logits / temperature + g, axis=-1)
    mu = np.take_along_axis(means, c[..., None, None], axis=-2)[..., 0, :]
    eps = rng.normal(mu.shape)
    if out.cov_type == "diagonal":
        sc = np.take_along_axis(out.scales.data, c[..., None, None], axis=-2)[..., 0, :]
        return mu + temperature * sc * eps
    L = np.take_along_axis(out.chol.data, c[..., None, None, None], axis=-3)[..., 0, :, :]
    return mu + temperature * (L @ eps[..., None])[..., 0]


def stop_loss(logits, is_last, pos_weight: float = STOP_POS_WEIGHT, mask=None) -> Tensor:
    """Mean binary cross-entropy on stop logits, positives weighted by ``pos_weight``."""
    logits = as_tensor(logits)
    y = np.asarray(is_last, dtype=np.float64)
    if y.shape != logits.shape:
        raise ContractViolation(f"stop_loss: logits {logits.shape} vs labels {y.shape}")
    per = pos_weight * y * ops.softplus(-logits) + (1.0 - y) * ops.softplus(logits)
    if mask is None:
        return per.mean()
    m = np.asarray(mask, dtype=np.float64)
    return (per * m).sum() / max(m.sum(), 1.0)


@dataclass
class StopHead:
    weight: Tensor  # (D,)
    bias: Tensor  # ()

    def __call__(self, state) -> Tensor:
        return as_tensor(state) @ self.weight + self.bias
