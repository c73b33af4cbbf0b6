"""Toy continuous codec: deterministic windowed encoder/decoder with a GMM prior."""
from __future__ import annotations

import numpy as np

from gmlab.config import VaeConfig
from gmlab.core import ops
from gmlab.core.rng import Rng
from gmlab.core.tensor import Tensor, as_tensor
from gmlab.errors import ContractViolation
from gmlab.gmm import GmmPrior, PriorConfig, gmm_log_density
from gmlab.nn import Linear, Module

WINDOW = 3


def window_indices(T: int, stride: int) -> np.ndarray:
    """(ceil(T/stride), 3) frame indices; edges are replicated by clipping."""
    n = -(-T // stride)
    centers = np.arange(n) * stride + stride // 2
    return np.clip(centers[:, None] + np.arange(-1, 2)[None, :], 0, T - 1)


def windowed(x: Tensor, stride: int) -> Tensor:
    """Gather width-3 windows: (B, T, C) -> (B, ceil(T/stride), 3C)."""
    B, T, C = x.shape
    idx = window_indices(T, stride)
    w = ops.take(x, idx, axis=1)
    return ops.reshape(w, (B, idx.shape[0], WINDOW * C))


class GmmVae(Module):
    def __init__(self, cfg: VaeConfig, rng: Rng):
        cfg.validate()
        self.cfg = cfg
        F, D, Hd = cfg.feature_dim, cfg.latent_dim, cfg.hidden
        enc_dims = [F] + [Hd] * (cfg.depth - 1) + [D]
        dec_dims = [D] + [Hd] * (cfg.depth - 1) + [F]
        self.enc = [Linear(WINDOW * a, b, rng.substream(1, i)) for i, (a, b) in enumerate(zip(enc_dims, enc_dims[1:]))]
        self.dec = [Linear(WINDOW * a, b, rng.substream(2, i)) for i, (a, b) in enumerate(zip(dec_dims, dec_dims[1:]))]
        self.prior = GmmPrior(
            PriorConfig(cfg.prior_mixtures, cfg.learn_means_only, cfg.lam), D, rng.substream(3)
        )

    def _act(self, x: Tensor) -> Tensor:
        return ops.tanh(x) if self.cfg.activation == "tanh" else x

    def encode(self, x) -> Tensor:
        """(B, T, F) or (T, F) features -> (B, ceil(T/r), D) latents."""
        x = as_tensor(x)
        single = x.ndim == 2
        if single:
            x = ops.reshape(x, (1,) + x.shape)
        if x.shape[1] == 0:
            raise ContractViolation("cannot encode an empty sequence")
        T = x.shape[1]
        r = self.cfg.downsample
        if T % r:
            x = ops.take(x, np.minimum(np.arange(-(-T // r) * r), T - 1), axis=1)
        h = x
        for k, layer in enumerate(self.enc):
            h = layer(windowed(h, r if k == 0 else 1))
            if k < len(self.enc) - 1:
                h = self._act(h)
        return h[0] if single else h

    def decode(self, H, T: int | None = None) -> Tensor:
        """Nearest-neighbour upsampling then windowed maps; output (B, T, F)."""
        H = as_tensor(H)
        single = H.ndim == 2
        if single:
            H = ops.reshape(H, (1,) + H.shape)
        r = self.cfg.downsample
        T = H.shape[1] * r if T is None else T
        h = ops.take(H, np.arange(T) // r, axis=1)
        for k, layer in enumerate(self.dec):
            h = layer(windowed(h, 1))
            if k < len(self.dec) - 1:
                h = self._act(h)
        return h[0] if single else h

    def prior_nll(self, H: Tensor) -> Tensor:
        """Mean over latent frames of -log p(h_t) / D."""
        lp = gmm_log_density(H, self.prior.params())
        return -lp.mean() / self.cfg.latent_dim

    def loss(self, x, lam: float | None = None, rng: Rng | None = None) -> tuple[Tensor, Tensor, Tensor]:
        """Returns ``(total, recon, reg)`` with ``total = recon + lam * reg``.

        ``recon`` is the feature MSE; ``reg`` is the unweighted prior term.
        """
        lam = self.cfg.lam if lam is None else lam
        if lam < 0:
            raise ContractViolation("lambda must be nonnegative")
        x = as_tensor(x)
        H = self.encode(x)
        xhat = self.decode(H, x.shape[-2])
        recon = ops.square(x - xhat).mean()
        Hs = H
        if self.cfg.prior_noise_std > 0:
            if rng is None:
                raise ContractViolation("prior_noise_std > 0 needs an rng")
            Hs = H + self.cfg.prior_noise_std * rng.normal(H.shape)
        reg = self.prior_nll(Hs)
        return recon + lam * reg, recon, reg


def vae_loss(x, model: GmmVae, lam: float) -> tuple[Tensor, Tensor, Tensor]:
    return model.loss(x, lam)


def segment_batch(episodes, rng: Rng, batch_size: int, seg: int) -> np.ndarray:
    """Random fixed-length crops (edge-padded when an episode is shorter)."""
    out = np.empty((batch_size, seg, episodes[0].features.shape[1]))
    picks = rng.integers(0, len(episodes) - 1, (batch_size,))
    for b, k in enumerate(picks):
        feats = episodes[k].features
        T = len(feats)
        start = int(rng.integers(0, max(T - seg, 0)))
        idx = np.minimum(np.arange(start, start + seg), T - 1)
        out[b] = feats[idx]
    return out


def recon_mse(model: GmmVae, episodes) -> float:
    """Feature MSE over whole episodes, pooled over frames and dims."""
    tot, n = 0.0, 0
    for ep in episodes:
        x = ep.features
        xhat = model.decode(model.encode(x), len(x)).data
        tot += float(np.sum((x - xhat) ** 2))
        n += x.size
    return tot / n


def encode_corpus(model: GmmVae, episodes):
    """Replace features by latents; gt alignment is subsampled to latent frames."""
    from gmlab.data import Episode

    r = model.cfg.downsample
    out = []
    for ep in episodes:
        H = model.encode(ep.features).data
        gt = ep.gt_alignment[np.minimum(np.arange(len(H)) * r, len(ep.gt_alignment) - 1)]
        out.append(Episode(ep.tokens, H, gt, ep.index))
    return out
