"""Metrics and alignment dumps."""
from __future__ import annotations

import itertools
from pathlib import Path

import numpy as np

from gmlab.core.rng import Rng
from gmlab.data import Episode
from gmlab.io import ContainerError
from gmlab.lm import GmmLm, collate

EVAL_BATCH = 16
N_DIVERSITY = 3


def alignment_accuracy(trace: np.ndarray, gt: np.ndarray) -> float:
    """Fraction of positions where the attended index equals ground truth (``gt >= 0``)."""
    trace, gt = np.asarray(trace), np.asarray(gt)
    m = gt >= 0
    return float(np.mean(trace[m] == gt[m])) if m.any() else float("nan")


def teacher_forced(model: GmmLm, episodes: list[Episode], seed: int = 0) -> dict:
    """Eval-mode teacher forcing: per-frame NLL and alignment accuracy.

    The alignment for data frame ``t`` is ``argmax alpha_{t+1}`` (the state
    after reading that frame).
    """
    rng = Rng(seed, 7)
    nll_sum = 0.0
    n_frames = 0
    hits = 0
    for start in range(0, len(episodes), EVAL_BATCH):
        batch = collate(episodes[start : start + EVAL_BATCH])
        res = model.forward(batch, rng, s=1.0, training=False, greedy=model.cfg.greedy_align)
        nll_sum += float(res.frame_nll.sum())
        n_frames += int(batch.n_frames.sum())
        m = batch.gt >= 0
        hits += int(np.sum((res.trace[:, 1:] == batch.gt) & m))
    return {"nll": nll_sum / n_frames, "align_acc": hits / n_frames}


def mean_pairwise_distance(samples: list[np.ndarray]) -> float:
    """Mean per-frame L2 distance over all pairs, compared on the common prefix."""
    dists = []
    for a, b in itertools.combinations(samples, 2):
        n = min(len(a), len(b))
        if n == 0:
            continue
        dists.append(float(np.mean(np.linalg.norm(a[:n] - b[:n], axis=-1))))
    return float(np.mean(dists)) if dists else 0.0


def generation_metrics(model: GmmLm, episodes: list[Episode], temperature: float, seed: int = 0,
                       n_samples: int = N_DIVERSITY) -> dict:
    len_errs, divs, stops = [], [], 0
    for ep in episodes:
        gens = []
        for r in range(n_samples):
            frames, _, stop = model.generate(ep.tokens, Rng(seed, 11, ep.index, r), temperature)
            gens.append(frames)
            len_errs.append(abs(len(frames) - ep.n_frames) / ep.n_frames)
            stops += stop is not None
        divs.append(mean_pairwise_distance(gens))
    return {
        "len_err": float(np.mean(len_errs)),
        "diversity": float(np.mean(divs)),
        "stop_rate": stops / max(len(len_errs), 1),
    }


def evaluate(model: GmmLm, episodes: list[Episode], seed: int = 0, temperature: float = 1.0,
             generate: bool = True, vae=None, vae_episodes=None) -> dict:
    """Teacher-forced NLL, alignment accuracy, and (optionally) generation metrics."""
    out = teacher_forced(model, episodes, seed)
    if generate:
        out.update(generation_metrics(model, episodes, temperature, seed))
    if vae is not None:
        from gmlab.vae import recon_mse

        out["recon_mse"] = recon_mse(vae, vae_episodes if vae_episodes is not None else episodes)
    return out


def alignment_matrix(model: GmmLm, ep: Episode, seed: int = 0) -> np.ndarray:
    """Eval-mode alignment rows for the data frames, shape (T, J)."""
    res = model.forward(collate([ep]), Rng(seed, 7), s=1.0, training=False, greedy=model.cfg.greedy_align)
    return res.alpha.data[0, 1:, : ep.n_tokens]


def write_alignment(alpha: np.ndarray, path) -> tuple[Path, Path]:
    """Write ``<path>.csv`` (6 decimals) and ``<path>.pgm`` (P2, max cell = 255)."""
    alpha = np.asarray(alpha, dtype=np.float64)
    base = Path(path)
    csv_path = base.with_suffix(".csv")
    pgm_path = base.with_suffix(".pgm")
    top = alpha.max() if alpha.size and alpha.max() > 0 else 1.0
    pix = np.rint(alpha / top * 255).astype(int)
    csv = "\n".join(",".join(f"{v:.6f}" for v in row) for row in alpha) + "\n"
    rows, cols = alpha.shape
    pgm = f"P2\n{cols} {rows}\n255\n" + "\n".join(" ".join(str(v) for v in row) for row in pix) + "\n"
    try:
        csv_path.write_text(csv)
        pgm_path.write_text(pgm)
    except OSError as exc:
        raise ContainerError(f"cannot write alignment dump at {base}: {exc}") from exc
    return csv_path, pgm_path


def align_dump(model: GmmLm, ep: Episode, path, seed: int = 0) -> tuple[Path, Path]:
    return write_alignment(alignment_matrix(model, ep, seed), path)


def read_pgm(path) -> np.ndarray:
    toks = Path(path).read_text().split()
    if toks[0] != "P2":
        raise ValueError("not a P2 PGM file")
    cols, rows = int(toks[1]), int(toks[2])
    return np.array(toks[4:], dtype=int).reshape(rows, cols)
