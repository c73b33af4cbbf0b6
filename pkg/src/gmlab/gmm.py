"""Gaussian mixtures: log-density, reparameterized sampling, prior regularizer.

All densities are evaluated in log space with a log-sum-exp over
components.  Parameters may carry leading batch dimensions, in which case
``x`` broadcasts against them (the mixture-density head relies on this).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gmlab.core import ops
from gmlab.core.rng import Rng
from gmlab.core.tensor import LOG_2PI, Tensor, as_tensor, parameter
from gmlab.errors import ContractViolation

COV_TYPES = ("diagonal", "full")
_TINY = 1e-300


@dataclass
class GmmParams:
    """Mixture with ``L`` components over ``D`` dims (plus optional batch dims).

    ``log_weights`` has shape (..., L) and ``means`` (..., L, D).  Diagonal
    mixtures carry ``scales`` (..., L, D); full ones carry lower-triangular
    ``chol`` factors (..., L, D, D) with a positive diagonal.
    """

    log_weights: Tensor
    means: Tensor
    cov_type: str = "diagonal"
    scales: Tensor | None = None
    chol: Tensor | None = None

    @classmethod
    def from_weights(cls, weights, means, scales=None, chol=None) -> "GmmParams":
        w = weights.data if isinstance(weights, Tensor) else np.asarray(weights, dtype=np.float64)
        log_w = Tensor(np.log(np.maximum(w, _TINY)))
        cov = "full" if chol is not None else "diagonal"
        return cls(
            log_w,
            as_tensor(means),
            cov,
            None if scales is None else as_tensor(scales),
            None if chol is None else as_tensor(chol),
        )

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights.data)

    @property
    def n_components(self) -> int:
        return self.means.shape[-2]

    @property
    def dim(self) -> int:
        return self.means.shape[-1]

    def validate(self) -> None:
        if self.cov_type not in COV_TYPES:
            raise ContractViolation(f"unknown cov_type '{self.cov_type}'")
        L, D = self.n_components, self.dim
        if self.log_weights.shape[-1] != L:
            raise ContractViolation("weights and means disagree on the component count")
        w = self.weights
        if np.any(np.abs(w.sum(axis=-1) - 1.0) > 1e-12):
            raise ContractViolation("mixture weights must sum to 1")
        if self.cov_type == "diagonal":
            if self.scales is None or self.scales.shape[-2:] != (L, D):
                raise ContractViolation("diagonal mixture needs scales of shape (L, D)")
            if np.any(self.scales.data <= 0):
                raise ContractViolation("scales must be strictly positive")
        else:
            if self.chol is None or self.chol.shape[-3:] != (L, D, D):
                raise ContractViolation("full mixture needs Cholesky factors of shape (L, D, D)")
            diag = np.diagonal(self.chol.data, axis1=-2, axis2=-1)
            if np.any(diag <= 0):
                raise ContractViolation("Cholesky diagonals must be strictly positive")
            if np.any(np.triu(self.chol.data, 1) != 0):
                raise ContractViolation("Cholesky factors must be lower triangular")

    def component(self, c: int) -> "GmmParams":
        """Single-component view (unbatched params only)."""
        return GmmParams(
            Tensor([0.0]), self.means[c : c + 1], self.cov_type,
            None if self.scales is None else self.scales[c : c + 1],
            None if self.chol is None else self.chol[c : c + 1],
        )


def component_log_densities(x, params: GmmParams) -> Tensor:
    """log N(x; mu_l, Sigma_l) for every component, shape (..., L)."""
    x = as_tensor(x)
    D = params.dim
    if x.shape[-1] != D:
        raise ContractViolation(f"point has dim {x.shape[-1]}, mixture has dim {D}")
    xe = ops.reshape(x, x.shape[:-1] + (1, D))
    diff = xe - params.means
    if params.cov_type == "diagonal":
        z = diff / params.scales
        log_det_half = ops.log(params.scales).sum(axis=-1)
    else:
        z = ops.solve_lower(params.chol, diff)
        ar = np.arange(D)
        log_det_half = ops.log(params.chol[..., ar, ar]).sum(axis=-1)
    return -0.5 * ops.square(z).sum(axis=-1) - log_det_half - 0.5 * D * LOG_2PI


def gmm_log_density(x, params: GmmParams) -> Tensor:
    """log sum_l pi_l N(x; mu_l, Sigma_l), reduced over components only."""
    return ops.logsumexp(params.log_weights + component_log_densities(x, params), axis=-1)


def gmm_sample(params: GmmParams, rng: Rng, size: int | None = None):
    """Draw ``x = mu_c + scale_c * eps`` with ``c ~ Categorical(weights)``.

    Returns ``(x, c)``.  ``x`` is differentiable w.r.t. the chosen
    component's mean and scale (the choice itself is a constant).  With
    ``size`` the draws are vectorized: ``x`` has shape (size, D).
    """
    if params.log_weights.ndim != 1:
        raise ContractViolation("gmm_sample expects unbatched parameters")
    w = params.weights
    w = w / w.sum()
    n = 1 if size is None else size
    comps = rng.categorical(w, (n,))
    eps = rng.normal((n, params.dim))
    mu = ops.take(params.means, comps, axis=0)
    if params.cov_type == "diagonal":
        x = mu + ops.take(params.scales, comps, axis=0) * eps
    else:
        L = ops.take(params.chol, comps, axis=0)
        x = mu + ops.reshape(L @ ops.reshape(Tensor(eps), (n, params.dim, 1)), (n, params.dim))
    if size is None:
        return x[0], int(comps[0])
    return x, comps


def prior_regularizer(h, prior: GmmParams, lam: float, noise_std: float = 0.0, rng: Rng | None = None) -> Tensor:
    """Monte-Carlo KL estimate under a point-mass posterior: ``-lam * log p(h)``.

    The posterior entropy term is a constant (formally divergent) and is
    dropped.  ``noise_std > 0`` perturbs ``h`` before scoring, which turns
    the point mass into a Gaussian posterior sampled once.
    """
    if lam < 0:
        raise ContractViolation("lambda must be nonnegative")
    h = as_tensor(h)
    if noise_std > 0:
        if rng is None:
            raise ContractViolation("noise_std > 0 needs an rng")
        h = h + noise_std * rng.normal(h.shape)
    return -lam * gmm_log_density(h, prior)


@dataclass
class PriorConfig:
    L: int = 3
    learn_means_only: bool = True
    lam: float = 1.0

    def __post_init__(self):
        if self.L < 1:
            raise ContractViolation("prior needs at least one component")
        if self.lam < 0:
            raise ContractViolation("lambda must be nonnegative")


class GmmPrior:
    """Trainable latent prior.

    With ``learn_means_only`` the weights are fixed at 1/L and every
    covariance is the identity, so only the means receive updates.  Otherwise
    diagonal log-scales are learned too.
    """

    def __init__(self, config: PriorConfig, dim: int, rng: Rng):
        self.config = config
        self.dim = dim
        self.means = parameter(0.5 * rng.normal((config.L, dim)))
        self.log_scales = Tensor(np.zeros((config.L, dim)), requires_grad=not config.learn_means_only)
        self._log_w = Tensor(np.full(config.L, -np.log(config.L)))

    def parameters(self) -> dict[str, Tensor]:
        out = {"prior.means": self.means}
        if not self.config.learn_means_only:
            out["prior.log_scales"] = self.log_scales
        return out

    def params(self) -> GmmParams:
        if self.config.learn_means_only:
            scales = Tensor(np.ones((self.config.L, self.dim)))
        else:
            scales = ops.exp(self.log_scales)
        return GmmParams(self._log_w, self.means, "diagonal", scales)
