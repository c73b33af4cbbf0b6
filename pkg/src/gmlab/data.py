"""Synthetic token/frame corpora with known alignments."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from gmlab.core.rng import Rng
from gmlab.errors import ContractViolation


@dataclass
class SyntheticSpec:
    vocab_size: int = 20
    feature_dim: int = 16
    d_min: int = 2
    d_max: int = 3
    tokens_min: int = 4
    tokens_max: int = 8
    sigma_obs: float = 0.1
    n_episodes: int = 200
    seed: int = 0

    def validate(self) -> None:
        if self.d_min < 1 or self.d_max < self.d_min:
            raise ContractViolation("durations need 1 <= d_min <= d_max")
        if self.tokens_min < 1 or self.tokens_max < self.tokens_min:
            raise ContractViolation("token counts need 1 <= tokens_min <= tokens_max")
        if self.vocab_size < 2:
            raise ContractViolation("vocab_size must be at least 2")
        if self.sigma_obs < 0:
            raise ContractViolation("sigma_obs must be nonnegative")


@dataclass
class Episode:
    tokens: np.ndarray  # (J,) int
    features: np.ndarray  # (I, F)
    gt_alignment: np.ndarray  # (I,) int, encoder index per frame
    index: int = 0

    @property
    def n_frames(self) -> int:
        return len(self.features)

    @property
    def n_tokens(self) -> int:
        return len(self.tokens)


def templates(spec: SyntheticSpec) -> np.ndarray:
    """Per-token mean frames, fixed by the corpus seed."""
    return Rng(spec.seed, 0).normal((spec.vocab_size, spec.feature_dim))


def _sample_tokens(rng: Rng, spec: SyntheticSpec, J: int) -> np.ndarray:
    # no immediate repeats: a repeated neighbor makes the stay/advance decision unobservable
    toks = [int(rng.integers(0, spec.vocab_size - 1))]
    for _ in range(J - 1):
        t = int(rng.integers(0, spec.vocab_size - 2))
        toks.append(t if t < toks[-1] else t + 1)
    return np.array(toks, dtype=np.int64)


def make_episode(spec: SyntheticSpec, index: int, table: np.ndarray | None = None) -> Episode:
    table = templates(spec) if table is None else table
    rng = Rng(spec.seed, 1, index)
    J = int(rng.integers(spec.tokens_min, spec.tokens_max))
    tokens = _sample_tokens(rng, spec, J)
    durations = rng.integers(spec.d_min, spec.d_max, (J,))
    gt = np.repeat(np.arange(J), durations)
    noise = rng.normal((len(gt), spec.feature_dim))
    features = table[tokens[gt]] + spec.sigma_obs * noise
    return Episode(tokens, features, gt.astype(np.int64), index)


def gen_corpus(spec: SyntheticSpec) -> list[Episode]:
    """Episodes ``0 .. n_episodes-1``; each depends only on (seed, index)."""
    spec.validate()
    table = templates(spec)
    return [make_episode(spec, k, table) for k in range(spec.n_episodes)]


def corpus_arrays(episodes: list[Episode]) -> dict[str, np.ndarray]:
    """Flatten a corpus into named float64 arrays for the container format."""
    return {
        "tokens": np.concatenate([e.tokens for e in episodes]).astype(np.float64),
        "token_counts": np.array([e.n_tokens for e in episodes], dtype=np.float64),
        "features": np.concatenate([e.features for e in episodes]),
        "frame_counts": np.array([e.n_frames for e in episodes], dtype=np.float64),
        "gt_alignment": np.concatenate([e.gt_alignment for e in episodes]).astype(np.float64),
        "indices": np.array([e.index for e in episodes], dtype=np.float64),
    }


def corpus_from_arrays(arrays: dict[str, np.ndarray]) -> list[Episode]:
    tc = arrays["token_counts"].astype(np.int64)
    fc = arrays["frame_counts"].astype(np.int64)
    tok_off = np.concatenate([[0], np.cumsum(tc)])
    fr_off = np.concatenate([[0], np.cumsum(fc)])
    out = []
    for k in range(len(tc)):
        out.append(
            Episode(
                arrays["tokens"][tok_off[k] : tok_off[k + 1]].astype(np.int64),
                arrays["features"][fr_off[k] : fr_off[k + 1]].copy(),
                arrays["gt_alignment"][fr_off[k] : fr_off[k + 1]].astype(np.int64),
                int(arrays["indices"][k]),
            )
        )
    return out


def spec_meta(spec: SyntheticSpec) -> dict:
    return asdict(spec)
