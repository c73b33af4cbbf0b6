"""Run configuration as flat ``section.key=value`` text."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from gmlab.align import ALIGN_MODES
from gmlab.data import SyntheticSpec
from gmlab.errors import ContractViolation
from gmlab.gmm import COV_TYPES


@dataclass
class VaeConfig:
    feature_dim: int = 16
    latent_dim: int = 8
    downsample: int = 2
    hidden: int = 32
    depth: int = 3
    lam: float = 1.0
    prior_mixtures: int = 3
    learn_means_only: bool = True
    prior_noise_std: float = 0.0
    activation: str = "tanh"
    segment: int = 8

    def validate(self) -> None:
        if self.downsample < 1 or self.latent_dim < 1 or self.lam < 0:
            raise ContractViolation("vae config needs downsample >= 1, latent_dim >= 1, lam >= 0")
        if self.depth < 2:
            raise ContractViolation("vae depth must be at least 2")
        if self.activation not in ("tanh", "identity"):
            raise ContractViolation(f"unknown activation '{self.activation}'")


@dataclass
class LmConfig:
    vocab_size: int = 20
    frame_dim: int = 16
    model_dim: int = 32
    heads: int = 4
    enc_depth: int = 1
    dec_depth: int = 2
    mixtures: int = 3
    cov_type: str = "diagonal"
    head_mode: str = "mdn"
    align_mode: str = "st_gumbel"
    s_hi: float = 2.0
    s_lo: float = 0.1
    max_len: int = 64
    scale_floor: float = 1e-4
    stop_pos_weight: float = 5.0
    greedy_align: bool = False
    prompt_text: bool = True
    prompt_frames: bool = True

    def validate(self) -> None:
        if self.mixtures < 1 or self.model_dim < 1:
            raise ContractViolation("lm config needs mixtures >= 1 and model_dim >= 1")
        if self.align_mode not in ALIGN_MODES:
            raise ContractViolation(f"unknown align_mode '{self.align_mode}'")
        if self.cov_type not in COV_TYPES:
            raise ContractViolation(f"unknown cov_type '{self.cov_type}'")
        if self.head_mode not in ("mdn", "regression"):
            raise ContractViolation(f"unknown head_mode '{self.head_mode}'")


@dataclass
class TrainConfig:
    seed: int = 0
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-3
    clip: float = 1.0
    eval_every: int = 250
    eval_episodes: int = 50
    temperature: float = 1.0


@dataclass
class RunConfig:
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    vae: VaeConfig = field(default_factory=VaeConfig)
    lm: LmConfig = field(default_factory=LmConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> None:
        self.data.validate()
        self.vae.validate()
        self.lm.validate()


SECTIONS = ("data", "vae", "lm", "train")


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(kind, text: str, key: str):
    try:
        if kind is bool or kind == "bool":
            if text not in ("true", "false"):
                raise ValueError(text)
            return text == "true"
        if kind is int or kind == "int":
            return int(text)
        if kind is float or kind == "float":
            return float(text)
        return text
    except ValueError as exc:
        raise ContractViolation(f"config key {key}: cannot parse '{text}'") from exc


def serialize(cfg: RunConfig) -> str:
    lines = []
    for sec in SECTIONS:
        obj = getattr(cfg, sec)
        for f in fields(obj):
            lines.append(f"{sec}.{f.name}={_format(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def parse(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse key=value lines over ``base`` (defaults); unknown keys are rejected."""
    src = base if base is not None else RunConfig()
    cfg = RunConfig(*(dataclasses.replace(getattr(src, s)) for s in SECTIONS))
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ContractViolation(f"config line {lineno}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        set_key(cfg, key, val)
    return cfg


def set_key(cfg: RunConfig, key: str, val: str) -> None:
    sec, _, name = key.partition(".")
    if sec not in SECTIONS:
        raise ContractViolation(f"unknown config key '{key}'")
    obj = getattr(cfg, sec)
    types = {f.name: f.type for f in fields(obj)}
    if name not in types:
        raise ContractViolation(f"unknown config key '{key}'")
    setattr(obj, name, _coerce(types[name], val, key))


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        from gmlab.io import ContainerError

        raise ContainerError(f"cannot read config {path}: {exc}") from exc
    cfg = parse(text)
    cfg.validate()
    return cfg
