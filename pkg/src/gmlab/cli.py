"""Command-line entry point: ``python3 -m gmlab <command> [flags]``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from gmlab import checks, io
from gmlab.config import RunConfig, load_config
from gmlab.core.rng import Rng
from gmlab.data import corpus_arrays, corpus_from_arrays, gen_corpus, spec_meta
from gmlab.errors import ContractViolation
from gmlab.evaluate import align_dump, evaluate
from gmlab.train import load_checkpoint, save_checkpoint, train_lm, train_vae, with_overrides, write_csv
from gmlab.vae import encode_corpus, recon_mse

log = logging.getLogger("gmlab")

EXIT_OK, EXIT_CONTRACT, EXIT_IO = 0, 1, 2
COV_FLAGS = {"diag": "diagonal", "full": "full"}
CORPUS_FILE = "corpus.gmlab"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; the CLI contract reserves 2 for I/O errors
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _csv_floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{text}'") from exc


def _csv_ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'") from exc


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key=value run config")
    common.add_argument("--seed", type=int, help="run seed (GMLAB_SEED overrides)")
    common.add_argument("--out", type=Path, default=Path("."), help="output directory or path")
    common.add_argument("--ckpt", type=Path, help="checkpoint to read")
    common.add_argument("--data", type=Path, help="corpus container (default: generate from config)")
    common.add_argument("--align-mode", choices=("st_gumbel", "gumbel", "noise", "soft", "cross"))
    common.add_argument("--cov", choices=tuple(COV_FLAGS))
    common.add_argument("--temperature", type=float)
    common.add_argument("--steps", type=int)
    common.add_argument("--max-len", type=int)
    common.add_argument("--episode", type=int, default=0, help="corpus index for synth/align-dump")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="gmlab", description="Toy GMM-VAE / GMM-LM harness.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen-data", parents=[common], help="write a synthetic corpus")
    for name in ("train-vae", "train-lm"):
        sp = sub.add_parser(name, parents=[common], help=f"{name.split('-')[1]} training")
        sp.add_argument("--mixtures", type=int)
        sp.add_argument("--lambda", dest="lam", type=float)
    sp = sub.add_parser("synth", parents=[common], help="generate frames from an LM checkpoint")
    sp.add_argument("--samples", type=int, default=1)
    sub.add_parser("eval", parents=[common], help="metrics for a checkpoint")
    sub.add_parser("align-dump", parents=[common], help="alignment matrix as CSV + PGM")
    sub.add_parser("self-test", parents=[common], help="oracle and gradient checks")
    sp = sub.add_parser("sweep", parents=[common], help="VAE recon MSE over a lambda x mixtures grid")
    sp.add_argument("--lambda", dest="lam", type=_csv_floats, default=[0.1, 1.0, 10.0, 50.0, 100.0])
    sp.add_argument("--mixtures", type=_csv_ints, default=[1, 3, 6])
    return p


# -- helpers -----------------------------------------------------------
def resolve_seed(args) -> int | None:
    env = os.environ.get("GMLAB_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ContractViolation(f"GMLAB_SEED must be an integer, got '{env}'") from exc
    return args.seed


def run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    train, lm, vae, data = {}, {}, {}, {}
    seed = resolve_seed(args)
    if seed is not None:
        if seed < 0:
            raise ContractViolation("seed must be nonnegative")
        train["seed"] = seed
        data["seed"] = seed
    if args.steps is not None:
        train["steps"] = args.steps
    if args.temperature is not None:
        train["temperature"] = args.temperature
    if args.align_mode is not None:
        lm["align_mode"] = args.align_mode
    if args.cov is not None:
        lm["cov_type"] = COV_FLAGS[args.cov]
    if args.max_len is not None:
        lm["max_len"] = args.max_len
    mix = getattr(args, "mixtures", None)
    if isinstance(mix, int):
        lm["mixtures"] = mix
        vae["prior_mixtures"] = mix
    lam = getattr(args, "lam", None)
    if isinstance(lam, float):
        vae["lam"] = lam
    return with_overrides(cfg, train=train, lm=lm, vae=vae, data=data)


def load_corpus(path):
    arrays, meta = io.load(path)
    io.check_meta_kind(meta, "corpus")
    return corpus_from_arrays(arrays)


def corpus_for(args, cfg: RunConfig):
    return load_corpus(args.data) if args.data else gen_corpus(cfg.data)


def _outdir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise io.ContainerError(f"cannot create {path}: {exc}") from exc
    return path


def _need_ckpt(args) -> Path:
    if args.ckpt is None:
        raise UsageError("this command needs --ckpt")
    return args.ckpt


# -- commands ----------------------------------------------------------
def cmd_gen_data(args) -> int:
    cfg = run_config(args)
    eps = gen_corpus(cfg.data)
    out = _outdir(args.out) / CORPUS_FILE
    io.save(out, corpus_arrays(eps), {"kind": "corpus", "spec": spec_meta(cfg.data)})
    print(f"wrote {len(eps)} episodes to {out}")
    return EXIT_OK


def cmd_train_vae(args) -> int:
    cfg = run_config(args)
    out = _outdir(args.out)
    res = train_vae(cfg, corpus_for(args, cfg), metrics_path=out / "vae_metrics.csv")
    save_checkpoint(out / "vae.ckpt", res.model, cfg)
    print(json.dumps(res.final, sort_keys=True))
    return EXIT_OK


def cmd_train_lm(args) -> int:
    cfg = run_config(args)
    out = _outdir(args.out)
    res = train_lm(cfg, corpus_for(args, cfg), metrics_path=out / "metrics.csv")
    save_checkpoint(out / "lm.ckpt", res.model, cfg)
    print(json.dumps(res.final, sort_keys=True))
    return EXIT_OK


def cmd_synth(args) -> int:
    model, cfg = load_checkpoint(_need_ckpt(args), "gmm-lm")
    eps = corpus_for(args, cfg)
    if not 0 <= args.episode < len(eps):
        raise ContractViolation(f"episode {args.episode} outside corpus of {len(eps)}")
    ep = eps[args.episode]
    temp = cfg.train.temperature if args.temperature is None else args.temperature
    seed = resolve_seed(args)
    seed = cfg.train.seed if seed is None else seed
    out = _outdir(args.out)
    for r in range(args.samples):
        frames, trace, stop = model.generate(ep.tokens, Rng(seed, 11, ep.index, r), temp, max_len=args.max_len)
        path = out / f"synth_{ep.index}_{r}.csv"
        lines = [",".join(f"{v:.6f}" for v in row) for row in frames]
        try:
            path.write_text("\n".join(lines) + ("\n" if lines else ""))
        except OSError as exc:
            raise io.ContainerError(f"cannot write {path}: {exc}") from exc
        print(json.dumps({"file": str(path), "frames": len(frames), "stop_step": stop,
                          "trace": trace.tolist()}))
    return EXIT_OK


def cmd_eval(args) -> int:
    model, cfg = load_checkpoint(_need_ckpt(args), None)
    eps = corpus_for(args, cfg)[: cfg.train.eval_episodes]
    if hasattr(model, "generate"):
        temp = cfg.train.temperature if args.temperature is None else args.temperature
        metrics = evaluate(model, eps, cfg.train.seed, temp)
    else:
        metrics = {"recon_mse": recon_mse(model, eps)}
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def cmd_align_dump(args) -> int:
    model, cfg = load_checkpoint(_need_ckpt(args), "gmm-lm")
    eps = corpus_for(args, cfg)
    if not 0 <= args.episode < len(eps):
        raise ContractViolation(f"episode {args.episode} outside corpus of {len(eps)}")
    base = args.out
    if base.suffix == "" and (base.is_dir() or str(base) == "."):
        base = base / f"align_{args.episode}"
    csv_path, pgm_path = align_dump(model, eps[args.episode], base, cfg.train.seed)
    print(f"wrote {csv_path} and {pgm_path}")
    return EXIT_OK


SELF_TESTS = (
    ("alignment oracle", lambda: checks.alignment_oracle_error(200), lambda v: v < 1e-12),
    ("hard monotonicity", lambda: checks.hard_monotonicity_violations(500), lambda v: v == 0),
    ("st-gumbel gradient", checks.st_gradient_error, lambda v: v < 1e-5),
    ("st-gumbel forward binary", lambda: checks.st_forward_binary_fraction(10000), lambda v: v == 1.0),
    ("gmm density oracle", lambda: checks.gmm_density_error(100), lambda v: v < 1e-10),
    ("mdn gradient", lambda: max(checks.mdn_grad_error(n, c) for n in (1, 3) for c in ("diagonal", "full")),
     lambda v: v < 1e-4),
)


def cmd_self_test(args) -> int:
    ok = True
    for name, run, passes in SELF_TESTS:
        value = run()
        good = bool(passes(value))
        ok &= good
        print(f"{'PASS' if good else 'FAIL'}  {name}: {value}")
    return EXIT_OK if ok else EXIT_CONTRACT


def sweep_grid(cfg: RunConfig, episodes, lams, mixtures, steps=None) -> np.ndarray:
    grid = np.zeros((len(lams), len(mixtures)))
    for a, lam in enumerate(lams):
        for b, L in enumerate(mixtures):
            cell = with_overrides(cfg, vae={"lam": float(lam), "prior_mixtures": int(L)})
            res = train_vae(cell, episodes, steps)
            grid[a, b] = recon_mse(res.model, episodes[: cfg.train.eval_episodes])
            log.info("lambda %g L %d recon %.6f", lam, L, grid[a, b])
    return grid


def write_sweep(path, lams, mixtures, grid) -> None:
    rows = [{"lambda": lam, **{f"L={L}": float(grid[a, b]) for b, L in enumerate(mixtures)}}
            for a, lam in enumerate(lams)]
    write_csv(path, ["lambda"] + [f"L={L}" for L in mixtures], rows)


def cmd_sweep(args) -> int:
    cfg = run_config(args)
    if not args.lam or not args.mixtures:
        raise ContractViolation("sweep needs at least one lambda and one mixture count")
    if any(v < 0 for v in args.lam) or any(L < 1 for L in args.mixtures):
        raise ContractViolation("sweep needs lambda >= 0 and mixtures >= 1")
    eps = corpus_for(args, cfg)
    grid = sweep_grid(cfg, eps, args.lam, args.mixtures)
    out = _outdir(args.out) / "sweep.csv"
    write_sweep(out, args.lam, args.mixtures, grid)
    print(out.read_text(), end="")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-vae": cmd_train_vae,
    "train-lm": cmd_train_lm,
    "synth": cmd_synth,
    "eval": cmd_eval,
    "align-dump": cmd_align_dump,
    "self-test": cmd_self_test,
    "sweep": cmd_sweep,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONTRACT
    except io.ContainerError as exc:
        print(f"gmlab: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ContractViolation as exc:
        print(f"gmlab: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
