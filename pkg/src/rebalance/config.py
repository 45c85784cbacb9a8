"""Configuration dataclasses and the INI-style run-config reader."""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    input_dim: int
    output_dim: int
    hidden: int
    layers: int
    heads: int
    head_dim: int | None = None
    ffn_dim: int | None = None
    max_positions: int = 512
    type_vocab: int = 2
    coupled: bool = False
    layernorm_eps: float = 1e-12

    def __post_init__(self):
        # fill derived defaults on a frozen instance
        if self.heads < 1:
            raise ConfigError(f"heads must be >= 1, got {self.heads}")
        if self.head_dim is None:
            if self.hidden % self.heads:
                raise ConfigError(f"hidden={self.hidden} is not divisible by heads={self.heads}")
            object.__setattr__(self, "head_dim", self.hidden // self.heads)
        if self.ffn_dim is None:
            object.__setattr__(self, "ffn_dim", 4 * self.hidden)
        self.validate()

    def validate(self) -> None:
        for name in ("vocab_size", "input_dim", "output_dim", "hidden", "layers",
                     "heads", "head_dim", "ffn_dim", "max_positions", "type_vocab"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.heads * self.head_dim != self.hidden:
            raise ConfigError(
                f"heads*head_dim = {self.heads}*{self.head_dim} != hidden = {self.hidden}")
        if self.coupled and self.input_dim != self.output_dim:
            raise ConfigError(
                f"coupled embeddings need input_dim == output_dim "
                f"(got {self.input_dim} and {self.output_dim})")
        if not self.layernorm_eps > 0:
            raise ConfigError("layernorm_eps must be > 0")

    def replace(self, **changes) -> "ModelConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class DataConfig:
    vocab: str | None = None
    corpus_dir: str | None = None
    alpha: float = 0.5
    seq_len: int = 128
    batch_size: int = 32
    mask_prob: float = 0.15
    mask_token_frac: float = 0.8
    random_frac: float = 0.1
    keep_frac: float = 0.1


@dataclass
class TrainConfig:
    steps: int = 1000
    lr: float = 1e-4
    warmup_steps: int = 0
    decay: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    eval_every: int = 0
    log_every: int = 1


@dataclass
class RunConfig:
    model: ModelConfig
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0


_MODEL_TYPES = {f.name: f.type for f in fields(ModelConfig)}


def _coerce(raw: str, typ: str, key: str):
    typ = str(typ)
    try:
        if "bool" in typ:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if "int" in typ:
            return int(raw)
        if "float" in typ:
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r} (expected {typ})") from None


def _section(parser, name: str, schema: dict[str, str]) -> dict[str, Any]:
    if not parser.has_section(name):
        return {}
    out = {}
    for key, raw in parser.items(name):
        if key not in schema:
            raise ConfigError(f"unknown key [{name}] {key}")
        out[key] = _coerce(raw, schema[key], f"[{name}] {key}")
    return out


def parse_run_config(text: str, base_dir: str | Path | None = None) -> RunConfig:
    """Parse a flat sectioned config. Unknown sections or keys are errors.

    ``REBALANCE_SEED`` in the environment overrides ``[run] seed``.
    Relative paths in ``[data]`` are resolved against ``base_dir``.
    """
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(str(e)) from None
    allowed = {"model", "data", "train", "run"}
    extra = set(parser.sections()) - allowed
    if extra:
        raise ConfigError(f"unknown sections: {sorted(extra)}")
    if not parser.has_section("model"):
        raise ConfigError("missing [model] section")

    model = ModelConfig.from_dict(_section(parser, "model", _MODEL_TYPES))
    data = DataConfig(**_section(parser, "data", {f.name: f.type for f in fields(DataConfig)}))
    train = TrainConfig(**_section(parser, "train", {f.name: f.type for f in fields(TrainConfig)}))
    run = _section(parser, "run", {"seed": "int"})
    seed = run.get("seed", 0)
    if os.environ.get("REBALANCE_SEED"):
        seed = _coerce(os.environ["REBALANCE_SEED"], "int", "REBALANCE_SEED")

    if base_dir is not None:
        for key in ("vocab", "corpus_dir"):
            value = getattr(data, key)
            if value and not os.path.isabs(value):
                setattr(data, key, str(Path(base_dir) / value))
    return RunConfig(model=model, data=data, train=train, seed=seed)


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    return parse_run_config(path.read_text(encoding="utf-8"), base_dir=path.parent)
