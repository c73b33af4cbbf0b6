"""Training loops, metrics CSVs and checkpoint persistence."""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from gmlab import io
from gmlab.align import temperature_schedule
from gmlab.config import RunConfig, parse, serialize
from gmlab.core.optim import Adam, clip_grad_norm
from gmlab.core.rng import Rng
from gmlab.core.tensor import backward
from gmlab.data import Episode
from gmlab.errors import ContractViolation, NumericError
from gmlab.evaluate import teacher_forced
from gmlab.lm import GmmLm, make_train_state, train_step
from gmlab.vae import GmmVae, recon_mse, segment_batch

log = logging.getLogger(__name__)

LM_COLUMNS = ("step", "nll", "stop_loss", "align_acc", "grad_norm", "temperature")
VAE_COLUMNS = ("step", "loss", "recon", "reg", "recon_mse")

# substream ids under the run seed
_MODEL, _BATCH, _NOISE, _EVAL = 100, 101, 102, 103


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, columns, rows) -> None:
    lines = [",".join(columns)] + [",".join(_fmt(r[c]) for c in columns) for r in rows]
    try:
        Path(path).write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise io.ContainerError(f"cannot write metrics {path}: {exc}") from exc


def read_csv(path) -> list[dict[str, float]]:
    text = Path(path).read_text().strip().splitlines()
    cols = text[0].split(",")
    return [dict(zip(cols, map(float, line.split(",")))) for line in text[1:]]


@dataclass
class RunResult:
    model: object
    rows: list[dict] = field(default_factory=list)

    @property
    def final(self) -> dict:
        return self.rows[-1]


def _batch(episodes: list[Episode], rng: Rng, size: int) -> list[Episode]:
    picks = rng.integers(0, len(episodes) - 1, (size,))
    return [episodes[int(k)] for k in picks]


def train_lm(cfg: RunConfig, episodes: list[Episode], steps: int | None = None,
             metrics_path=None, eval_episodes: list[Episode] | None = None) -> RunResult:
    """Train a fresh LM; one metrics row at step 0 and every ``eval_every`` steps.

    ``nll``/``align_acc`` are eval-mode teacher-forced values on the eval
    set; ``stop_loss`` and ``grad_norm`` come from the most recent update.
    """
    cfg.validate()
    tc = cfg.train
    steps = tc.steps if steps is None else steps
    if steps < 1:
        raise ContractViolation("steps must be positive")
    if not episodes:
        raise ContractViolation("empty corpus")
    model = GmmLm(cfg.lm, Rng(tc.seed, _MODEL))
    state = make_train_state(model, tc.lr, tc.clip, steps)
    brng, nrng = Rng(tc.seed, _BATCH), Rng(tc.seed, _NOISE)
    ev = eval_episodes if eval_episodes is not None else episodes[: tc.eval_episodes]
    res = RunResult(model)
    last = {"stop_loss": float("nan"), "grad_norm": float("nan")}

    def record(step: int) -> None:
        m = teacher_forced(model, ev, tc.seed)
        s = temperature_schedule(step, steps, cfg.lm.s_hi, cfg.lm.s_lo)
        res.rows.append({"step": step, "nll": m["nll"], "stop_loss": last["stop_loss"],
                         "align_acc": m["align_acc"], "grad_norm": last["grad_norm"], "temperature": s})
        log.info("step %d nll %.4f align %.3f", step, m["nll"], m["align_acc"])

    record(0)
    for step in range(1, steps + 1):
        out = train_step(state, _batch(episodes, brng, tc.batch_size), nrng)
        if out["aborted"]:
            log.warning("step %d aborted: %s", step, out["error"])
            state.step += 1
        else:
            last = {"stop_loss": out["stop_loss"], "grad_norm": out["grad_norm"]}
        if step % tc.eval_every == 0 or step == steps:
            record(step)
    if metrics_path is not None:
        write_csv(metrics_path, LM_COLUMNS, res.rows)
    return res


def train_vae(cfg: RunConfig, episodes: list[Episode], steps: int | None = None,
              metrics_path=None) -> RunResult:
    """Adam on crops of ``cfg.vae.segment`` frames with loss ``recon + lam * reg``."""
    cfg.validate()
    tc, vc = cfg.train, cfg.vae
    steps = tc.steps if steps is None else steps
    if steps < 1:
        raise ContractViolation("steps must be positive")
    model = GmmVae(vc, Rng(tc.seed, _MODEL))
    opt = Adam(list(model.parameters().values()), lr=tc.lr)
    brng, nrng = Rng(tc.seed, _BATCH), Rng(tc.seed, _NOISE)
    res = RunResult(model)
    for step in range(1, steps + 1):
        x = segment_batch(episodes, brng, tc.batch_size, vc.segment)
        opt.zero_grad()
        try:
            total, recon, reg = model.loss(x, vc.lam, nrng.substream(step))
            backward(total)
        except NumericError as exc:
            log.warning("vae step %d aborted: %s", step, exc)
            opt.zero_grad()
            continue
        clip_grad_norm(opt.params, tc.clip)
        opt.step()
        if step % tc.eval_every == 0 or step == steps:
            res.rows.append({"step": step, "loss": total.item(), "recon": recon.item(), "reg": reg.item(),
                             "recon_mse": recon_mse(model, episodes[: tc.eval_episodes])})
    if metrics_path is not None:
        write_csv(metrics_path, VAE_COLUMNS, res.rows)
    return res


# -- checkpoints -------------------------------------------------------
def save_checkpoint(path, model, cfg: RunConfig) -> None:
    kind = "gmm-lm" if isinstance(model, GmmLm) else "gmm-vae"
    arrays = {k: p.data for k, p in model.parameters().items()}
    io.save(path, arrays, {"kind": kind, "config": serialize(cfg)})


def load_checkpoint(path, kind: str | None = None):
    """Returns ``(model, cfg)``; ``kind`` ("gmm-lm"/"gmm-vae") is checked when given."""
    arrays, meta = io.load(path)
    if kind is not None:
        io.check_meta_kind(meta, kind)
    if "config" not in meta:
        raise io.ContainerError(f"{path}: checkpoint has no config")
    cfg = parse(meta["config"])
    cfg.validate()
    if meta.get("kind") == "gmm-lm":
        model = GmmLm(cfg.lm, Rng(cfg.train.seed, _MODEL))
    elif meta.get("kind") == "gmm-vae":
        model = GmmVae(cfg.vae, Rng(cfg.train.seed, _MODEL))
    else:
        raise ContractViolation(f"unknown checkpoint kind '{meta.get('kind')}'")
    model.load_arrays(arrays)
    return model, cfg


def with_overrides(cfg: RunConfig, **sections) -> RunConfig:
    """Copy of ``cfg`` with per-section field overrides, e.g. ``lm={"mixtures": 1}``."""
    parts = {s: dataclasses.replace(getattr(cfg, s), **sections.get(s, {})) for s in ("data", "vae", "lm", "train")}
    out = RunConfig(**parts)
    out.validate()
    return out
