"""Closed-form parameter accounting and rebalancing search.

Counts follow the parameter inventory of :mod:`rebalance.model` exactly, so
``count_params(c).finetune`` is the number of scalars left after
``to_finetune(build(c))``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

from .config import ConfigError, ModelConfig


@dataclass(frozen=True)
class ParamBudget:
    pretrain_count: int
    finetune_count: int
    embedding_params: int

    @property
    def embedding_fraction(self) -> float:
        return self.embedding_params / self.pretrain_count

    @property
    def output_side(self) -> int:
        return self.pretrain_count - self.finetune_count


def per_layer_params(c: ModelConfig) -> int:
    """Parameters of one encoder layer: attention, FFN and two layernorms."""
    h, f = c.hidden, c.ffn_dim
    inner = c.heads * c.head_dim
    attention = 3 * (h * inner + inner) + inner * h + h
    ffn = h * f + f + f * h + h
    return attention + ffn + 2 * 2 * h


def input_side_params(c: ModelConfig) -> int:
    n = c.vocab_size * c.input_dim
    if c.input_dim != c.hidden:
        n += c.input_dim * c.hidden
    return n + c.max_positions * c.hidden + c.type_vocab * c.hidden + 2 * c.hidden


def pooler_params(c: ModelConfig) -> int:
    return c.hidden * c.hidden + c.hidden


def output_side_params(c: ModelConfig) -> int:
    """Everything discarded before fine-tuning (pooler included)."""
    n = pooler_params(c)
    if c.output_dim != c.hidden:
        n += c.hidden * c.output_dim
    n += 2 * c.output_dim  # head layernorm
    if not c.coupled:
        n += c.output_dim * c.vocab_size
    return n + c.vocab_size  # output bias


def count_params(c: ModelConfig) -> ParamBudget:
    finetune = input_side_params(c) + c.layers * per_layer_params(c)
    return ParamBudget(
        pretrain_count=finetune + output_side_params(c),
        finetune_count=finetune,
        embedding_params=c.vocab_size * c.input_dim,
    )


AXES = ("H", "L", "E_in", "E_out")


class NoConfigInTolerance(ValueError):
    """Raised when the search lattice has no config near the target."""


@dataclass(frozen=True)
class SearchSpec:
    target_ft_count: int
    base: ModelConfig
    free: tuple[str, ...]
    tolerance: float = 0.01  # relative to the target
    h_values: tuple[int, ...] = tuple(range(64, 4096 + 1, 64))
    l_values: tuple[int, ...] = tuple(range(1, 65))
    e_values: tuple[int, ...] = tuple(range(64, 4096 + 1, 64))
    head_dim: int = 64

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ConfigError("tolerance must be > 0")
        if not self.free:
            raise ConfigError("at least one free axis is required")
        bad = set(self.free) - set(AXES)
        if bad:
            raise ConfigError(f"unknown axes {sorted(bad)}; choose from {AXES}")


def _candidate(spec: SearchSpec, h: int, l: int, e_in: int, e_out: int) -> ModelConfig | None:
    base = spec.base
    changes = {"layers": l, "input_dim": e_in, "output_dim": e_out}
    if "H" in spec.free:
        if h % spec.head_dim:
            return None
        changes.update(hidden=h, heads=h // spec.head_dim, head_dim=spec.head_dim, ffn_dim=4 * h)
    if base.coupled and e_in != e_out:
        return None
    try:
        return base.replace(**changes)
    except ConfigError:
        return None


def search_config(spec: SearchSpec) -> list[ModelConfig]:
    """All lattice configs whose fine-tuning count is within tolerance of the target.

    Free H moves in steps of ``head_dim`` with heads = H / head_dim and a 4H FFN.
    Results are sorted by distance to the target, then smaller L, then smaller H.
    """
    base = spec.base
    hs = spec.h_values if "H" in spec.free else (base.hidden,)
    ls = spec.l_values if "L" in spec.free else (base.layers,)
    eins = spec.e_values if "E_in" in spec.free else (base.input_dim,)
    eouts = spec.e_values if "E_out" in spec.free else (base.output_dim,)
    if base.coupled and ("E_in" in spec.free) != ("E_out" in spec.free):
        # one free side drags the other along
        eouts = eins = tuple(sorted(set(eins) | set(eouts)))

    target = spec.target_ft_count
    hits = []
    for h, l, e_in, e_out in itertools.product(hs, ls, eins, eouts):
        c = _candidate(spec, h, l, e_in, e_out)
        if c is None:
            continue
        ft = count_params(c).finetune_count
        if abs(ft - target) <= spec.tolerance * target:
            hits.append((abs(ft - target), l, h, e_in, e_out, c))
    if not hits:
        raise NoConfigInTolerance(
            f"no config in tolerance: target {target:,} +/- {spec.tolerance:.1%} "
            f"over free axes {','.join(spec.free)}")
    hits.sort(key=lambda t: t[:5])
    return [t[-1] for t in hits]


def format_millions(n: int) -> str:
    return f"{n / 1e6:.1f}M"


def budget_table(rows: list[tuple[str, ModelConfig]]) -> str:
    """Plain-text table of PT/FT counts, one row per named config."""
    header = f"{'config':<28}{'PT':>10}{'FT':>10}{'emb':>10}{'%emb':>7}"
    lines = [header, "-" * len(header)]
    for name, c in rows:
        b = count_params(c)
        lines.append(
            f"{name:<28}{format_millions(b.pretrain_count):>10}"
            f"{format_millions(b.finetune_count):>10}"
            f"{format_millions(b.embedding_params):>10}"
            f"{100 * b.embedding_fraction:>6.1f}%")
    return "\n".join(lines)


@dataclass
class BudgetReport:
    name: str
    config: ModelConfig
    budget: ParamBudget = field(init=False)

    def __post_init__(self):
        self.budget = count_params(self.config)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "config": self.config.to_dict(),
            "pretrain_count": self.budget.pretrain_count,
            "finetune_count": self.budget.finetune_count,
            "embedding_params": self.budget.embedding_params,
            "embedding_fraction": self.budget.embedding_fraction,
            "per_layer_params": per_layer_params(self.config),
        }
