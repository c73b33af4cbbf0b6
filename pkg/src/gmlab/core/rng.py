"""Seeded, splittable random streams.

Backed by numpy's Philox counter-based bit generator so a (seed, call
sequence) pair yields the same numbers on every platform.  ``substream``
derives an independent child keyed on integers (e.g. episode ids), which
keeps batch results independent of evaluation order.
"""
from __future__ import annotations

import numpy as np

from gmlab.core.tensor import Tensor
from gmlab.errors import ContractViolation

UNIFORM_EPS = 1e-12


class Rng:
    def __init__(self, seed: int, *path: int):
        if seed < 0 or seed >= 2**64:
            raise ContractViolation(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        ss = np.random.SeedSequence([self.seed, *self.path])
        self._gen = np.random.Generator(np.random.Philox(ss))

    def substream(self, *ids: int) -> "Rng":
        return Rng(self.seed, *self.path, *ids)

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    # raw ndarray draws; used internally where a Tensor wrapper is noise
    def uniform(self, shape=()) -> np.ndarray:
        return self._gen.random(shape)

    def normal(self, shape=()) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def gumbel(self, shape=()) -> np.ndarray:
        u = np.clip(self._gen.random(shape), UNIFORM_EPS, 1.0 - UNIFORM_EPS)
        return gumbel_from_uniform(u)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Uniform integers in ``[low, high]`` inclusive."""
        return self._gen.integers(low, high, size=shape, endpoint=True)

    def categorical(self, weights, shape=()) -> np.ndarray:
        w = _check_simplex(weights)
        cdf = np.cumsum(w)
        u = self._gen.random(shape)
        return np.minimum(np.searchsorted(cdf, u * cdf[-1], side="right"), len(w) - 1)

    def bernoulli(self, p, shape=None) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        if np.any(p < 0) or np.any(p > 1) or not np.isfinite(p).all():
            raise ContractViolation("bernoulli: p must lie in [0, 1]")
        shape = p.shape if shape is None else shape
        return (self._gen.random(shape) < p).astype(np.float64)


def gumbel_from_uniform(u) -> np.ndarray:
    u = np.clip(np.asarray(u, dtype=np.float64), UNIFORM_EPS, 1.0 - UNIFORM_EPS)
    return -np.log(-np.log(u))


def _check_simplex(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1 or w.size == 0 or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ContractViolation("categorical: weights must be a nonnegative vector summing to 1")
    return w


def sample(rng: Rng, dist: str, shape=(), *, p=None, w=None) -> Tensor:
    """Draw a detached Tensor from one of the primitive distributions.

    ``dist`` is one of ``uniform01``, ``standard_normal``, ``gumbel01``,
    ``bernoulli`` (needs ``p``) or ``categorical`` (needs ``w``).
    """
    if dist == "uniform01":
        out = rng.uniform(shape)
    elif dist == "standard_normal":
        out = rng.normal(shape)
    elif dist == "gumbel01":
        out = rng.gumbel(shape)
    elif dist == "bernoulli":
        if p is None:
            raise ContractViolation("bernoulli needs p")
        out = rng.bernoulli(p, shape if shape != () or np.ndim(p) == 0 else None)
    elif dist == "categorical":
        if w is None:
            raise ContractViolation("categorical needs w")
        out = rng.categorical(w, shape).astype(np.float64)
    else:
        raise ContractViolation(f"unknown distribution '{dist}'")
    return Tensor(out)
