"""Property checks shared by ``self-test`` and the acceptance suite.

Each function returns plain numbers so callers pick their own thresholds
and instance counts.
"""
from __future__ import annotations

import math

import numpy as np
from scipy import stats

from gmlab import align as al
from gmlab.core import ops
from gmlab.core.gradcheck import grad_check
from gmlab.core.rng import Rng
from gmlab.core.tensor import Tensor, parameter
from gmlab.gmm import GmmParams, gmm_log_density
from gmlab.mdn import nll, parameterize, raw_size


def alignment_oracle_error(n: int, seed: int = 0, max_size: int = 4) -> float:
    """Worst max-abs gap between the recursion marginals and path enumeration."""
    rng = Rng(seed, 1)
    worst = 0.0
    for k in range(n):
        r = rng.substream(k)
        I = int(r.integers(1, max_size))
        J = int(r.integers(1, max_size))
        p = r.uniform((I, J))
        soft = al.soft_expected_alignment(Tensor(p)).data
        worst = max(worst, float(np.max(np.abs(soft - al.brute_force_expected_alignment(p)))))
    return worst


def hard_monotonicity_violations(n: int, seed: int = 0, max_i: int = 12, max_j: int = 8) -> int:
    """Count non-monotone traces over random hard alignments (training and inference paths)."""
    rng = Rng(seed, 2)
    bad = 0
    for k in range(n):
        r = rng.substream(k)
        I = int(r.integers(1, max_i))
        J = int(r.integers(1, max_j))
        e = Tensor(3.0 * r.normal((I, J)))
        last = int(r.integers(0, J - 1))
        training = bool(k % 2)
        alpha, _ = al.align(e, "st_gumbel", 1.0, r, last=last, training=training)
        a = alpha.data
        tr = al.alignment_trace(a)
        if not (al.is_one_hot(a) and al.is_monotone_trace(tr) and tr.max() <= last):
            bad += 1
    return bad


def _mc_instance(k: int, seed: int, max_size: int):
    r = Rng(seed, 3).substream(k)
    I = int(r.integers(1, max_size))
    J = int(r.integers(1, max_size))
    return r, r.normal((I, J))


def mc_cell_z(e: np.ndarray, n_samples: int, rng: Rng, chunk: int = 50000) -> tuple[np.ndarray, np.ndarray]:
    """Standardized deviation per cell of the sampled mean from the soft marginals.

    Returns ``(z, p)``; cells with zero binomial variance get ``z = inf`` on
    any deviation and 0 otherwise.
    """
    I, J = e.shape
    p = al.soft_expected_alignment(al.EnergyMatrix(Tensor(e)).p).data
    total = np.zeros((I, J))
    done, part = 0, 0
    while done < n_samples:
        n = min(chunk, n_samples - done)
        r = rng if n_samples <= chunk else rng.substream(part)
        smp = al.st_bernoulli(Tensor(np.broadcast_to(e, (n, I, J)).copy()), 1.0, r)
        total += al.monotonic_alignment(Tensor(smp.u_forward)).data.sum(axis=0)
        done += n
        part += 1
    dev = np.abs(total / n_samples - p)
    sigma = np.sqrt(p * (1.0 - p) / n_samples)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(sigma > 0, dev / np.where(sigma > 0, sigma, 1.0), np.where(dev > 1e-12, np.inf, 0.0))
    return z, p


def mc_consistency(n_instances: int, n_samples: int, seed: int = 0, max_size: int = 4) -> dict:
    """Compare the mean of hard sampled alignments with the soft marginals.

    Returns the worst standardized deviation, the number of cells outside
    3 sigma (binomial sigma per cell), the number of cells with nonzero
    variance, and the flagged ``(instance, i, j)`` cells.
    """
    worst_z, outside, cells, flagged = 0.0, 0, 0, []
    for k in range(n_instances):
        r, e = _mc_instance(k, seed, max_size)
        z, p = mc_cell_z(e, n_samples, r)
        varying = (p > 0) & (p < 1)
        cells += int(varying.sum())
        worst_z = max(worst_z, float(z.max()))
        for i, j in zip(*np.nonzero(z > 3.0)):
            flagged.append((k, int(i), int(j)))
    outside = len(flagged)
    return {"worst_z": worst_z, "outside": outside, "cells": cells, "flagged": flagged}


def mc_replicate(flagged, n_samples: int, seed: int = 0, max_size: int = 4) -> list[float]:
    """Re-test flagged cells with fresh draws from an independent stream."""
    out = []
    for k, i, j in flagged:
        _, e = _mc_instance(k, seed, max_size)
        z, _ = mc_cell_z(e, n_samples, Rng(seed, 8, k))
        out.append(float(z[i, j]))
    return out


def st_gradient_error(seed: int = 0, shape=(5, 4), s: float = 0.7) -> float:
    """grad_check of a random scalar function of the relaxed sample with frozen noise."""
    r = Rng(seed, 4)
    e = parameter(r.normal(shape))
    g1, g2 = r.gumbel(shape), r.gumbel(shape)
    w = r.normal(shape)

    def f(e):
        u = al.relaxed_bernoulli(e, s, g1, g2)
        return (ops.tanh(u * w) + u * u).sum()

    return grad_check(f, e)


def st_forward_binary_fraction(n: int, seed: int = 0) -> float:
    r = Rng(seed, 5)
    e = Tensor(2.0 * r.normal((n,)))
    smp = al.st_bernoulli(e, 0.5, r)
    return float(np.mean((smp.u_forward == 0) | (smp.u_forward == 1)))


def _random_gmm(r: Rng, L: int, D: int, cov: str) -> GmmParams:
    w = r.uniform((L,)) + 0.1
    w = w / w.sum()
    means = r.normal((L, D))
    if cov == "diagonal":
        return GmmParams.from_weights(w, means, scales=0.5 + r.uniform((L, D)))
    chol = np.tril(0.3 * r.normal((L, D, D)), -1)
    chol[:, np.arange(D), np.arange(D)] = 0.5 + r.uniform((L, D))
    return GmmParams.from_weights(w, means, chol=chol)


def gmm_density_error(n: int, seed: int = 0, max_l: int = 6, max_d: int = 8) -> float:
    """Worst relative density error against a weighted sum of scipy normal pdfs."""
    rng = Rng(seed, 6)
    worst = 0.0
    for k in range(n):
        r = rng.substream(k)
        L = int(r.integers(1, max_l))
        D = int(r.integers(1, max_d))
        cov = "full" if k % 2 else "diagonal"
        g = _random_gmm(r, L, D, cov)
        x = g.means.data[int(r.integers(0, L - 1))] + 0.5 * r.normal((D,))
        ours = float(gmm_log_density(Tensor(x), g).data)
        direct = 0.0
        for c in range(L):
            if cov == "diagonal":
                sigma = np.diag(g.scales.data[c] ** 2)
            else:
                sigma = g.chol.data[c] @ g.chol.data[c].T
            direct += g.weights[c] * stats.multivariate_normal(g.means.data[c], sigma).pdf(x)
        worst = max(worst, abs(math.expm1(ours - math.log(direct))))
    return worst


def mdn_grad_error(n_mix: int, cov: str, seed: int = 0, d: int = 3, batch: int = 2) -> float:
    r = Rng(seed, 7, n_mix, int(cov == "full"))
    raw = parameter(0.5 * r.normal((batch, raw_size(n_mix, d, cov))))
    target = Tensor(r.normal((batch, d)))

    def f(raw):
        return nll(target, parameterize(raw, n_mix, d, cov)).sum()

    return grad_check(f, raw)
