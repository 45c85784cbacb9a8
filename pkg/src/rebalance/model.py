"""Transformer encoder with independently shaped input and output embeddings.

The input side looks up ``input_embedding`` [V x E_in] and projects to H when
E_in != H. The MLM head projects H -> E_out (when different), applies GELU and
a layernorm at width E_out, and scores against ``output_embedding`` [E_out x V].
A coupled model has no ``output_embedding`` parameter: it reads the transpose
of ``input_embedding`` instead, so both sides share one storage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig
from .tensor import (
    Tensor,
    gather_rows,
    gelu,
    layer_norm,
    no_grad,
    softmax,
    softmax_cross_entropy,
    transpose,
)

INIT_STD = 0.02
ATTN_MASK_BIAS = -1e9

OUTPUT_SIDE = ("pooler.weight", "pooler.bias", "output_proj", "mlm_ln.gamma", "mlm_ln.beta",
               "output_embedding", "output_bias")


class StateError(RuntimeError):
    """An operation was asked of a model in the wrong stage."""


@dataclass
class Batch:
    ids: np.ndarray  # [B, T] int
    type_ids: np.ndarray  # [B, T] int
    attention_mask: np.ndarray  # [B, T] bool, False on padding
    langs: list[str] | None = None

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.ids.ndim == 1:
            self.ids = self.ids[None, :]
        self.type_ids = np.asarray(self.type_ids, dtype=np.int64).reshape(self.ids.shape)
        self.attention_mask = np.asarray(self.attention_mask, dtype=bool).reshape(self.ids.shape)

    @classmethod
    def from_ids(cls, ids, type_ids=None, attention_mask=None) -> "Batch":
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        if type_ids is None:
            type_ids = np.zeros_like(ids)
        if attention_mask is None:
            attention_mask = np.ones(ids.shape, dtype=bool)
        return cls(ids, type_ids, attention_mask)

    @property
    def shape(self):
        return self.ids.shape


@dataclass
class MaskedBatch(Batch):
    positions: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    targets: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        super().__post_init__()
        self.positions = np.asarray(self.positions, dtype=np.int64).reshape(-1)
        self.targets = np.asarray(self.targets, dtype=np.int64).reshape(-1)
        if self.positions.shape != self.targets.shape:
            raise ValueError("positions and targets must align")

    @property
    def num_masked(self) -> int:
        return int(self.positions.size)


@dataclass
class LayerActivations:
    """Hidden states h^0..h^L; each entry is [B, T, H] (tokens grouped by sequence)."""

    states: list[np.ndarray]

    def __len__(self):
        return len(self.states)

    def __getitem__(self, layer: int) -> np.ndarray:
        return self.states[layer]


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, Tensor]

    @property
    def has_output_side(self) -> bool:
        return "output_bias" in self.params

    @property
    def stage(self) -> str:
        return "pretrain" if self.has_output_side else "finetune"

    def num_params(self) -> int:
        return sum(int(p.data.size) for p in self.params.values())

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def output_embedding(self) -> np.ndarray:
        """The [E_out x V] output matrix (a view of the input matrix when coupled)."""
        if not self.has_output_side:
            raise StateError("fine-tuning model has no output embedding")
        if self.config.coupled:
            return self.params["input_embedding"].data.T
        return self.params["output_embedding"].data

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}


def _trunc_normal(rng: np.random.Generator, shape, std=INIT_STD, dtype=np.float32) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return (x * std).astype(dtype)


def layer_param_shapes(c: ModelConfig, i: int) -> list[tuple[str, tuple[int, ...]]]:
    h, f, inner = c.hidden, c.ffn_dim, c.heads * c.head_dim
    p = f"layer.{i}."
    shapes = []
    for name in ("q", "k", "v"):
        shapes += [(p + f"attn.{name}.weight", (h, inner)), (p + f"attn.{name}.bias", (inner,))]
    shapes += [(p + "attn.o.weight", (inner, h)), (p + "attn.o.bias", (h,)),
               (p + "attn_ln.gamma", (h,)), (p + "attn_ln.beta", (h,)),
               (p + "ffn.in.weight", (h, f)), (p + "ffn.in.bias", (f,)),
               (p + "ffn.out.weight", (f, h)), (p + "ffn.out.bias", (h,)),
               (p + "ffn_ln.gamma", (h,)), (p + "ffn_ln.beta", (h,))]
    return shapes


def param_shapes(c: ModelConfig, output_side: bool = True) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered parameter inventory; this order is the checkpoint order."""
    h = c.hidden
    shapes = [("input_embedding", (c.vocab_size, c.input_dim))]
    if c.input_dim != h:
        shapes.append(("input_proj", (c.input_dim, h)))
    shapes += [("position_embedding", (c.max_positions, h)),
               ("type_embedding", (c.type_vocab, h)),
               ("embedding_ln.gamma", (h,)), ("embedding_ln.beta", (h,))]
    for i in range(c.layers):
        shapes += layer_param_shapes(c, i)
    if output_side:
        shapes += [("pooler.weight", (h, h)), ("pooler.bias", (h,))]
        if c.output_dim != h:
            shapes.append(("output_proj", (h, c.output_dim)))
        shapes += [("mlm_ln.gamma", (c.output_dim,)), ("mlm_ln.beta", (c.output_dim,))]
        if not c.coupled:
            shapes.append(("output_embedding", (c.output_dim, c.vocab_size)))
        shapes.append(("output_bias", (c.vocab_size,)))
    return shapes


def is_no_decay(name: str) -> bool:
    """Biases and layernorm parameters are excluded from weight decay."""
    return name.endswith(("bias", ".gamma", ".beta"))


def init_array(name: str, shape, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    if name.endswith(".gamma"):
        return np.ones(shape, dtype=dtype)
    if name.endswith(("bias", ".beta")):
        return np.zeros(shape, dtype=dtype)
    return _trunc_normal(rng, shape, dtype=dtype)


def build(config: ModelConfig, seed: int = 0, dtype=np.float32) -> Model:
    """Fresh model: truncated-normal(0.02) weights, zero biases, unit layernorm gains."""
    config.validate()
    rng = np.random.default_rng(seed)
    params = {name: Tensor(init_array(name, shape, rng, dtype), requires_grad=True, name=name)
              for name, shape in param_shapes(config)}
    return Model(config, params)


def from_arrays(config: ModelConfig, arrays: dict[str, np.ndarray]) -> Model:
    return Model(config, {k: Tensor(np.asarray(v), requires_grad=True, name=k) for k, v in arrays.items()})


def _check_batch(m: Model, batch: Batch) -> None:
    c = m.config
    ids = batch.ids
    if ids.size and (ids.min() < 0 or ids.max() >= c.vocab_size):
        pos = int(np.flatnonzero((ids < 0) | (ids >= c.vocab_size))[0])
        raise IndexError(f"token id {int(ids.reshape(-1)[pos])} at flat position {pos} "
                         f"outside vocabulary of size {c.vocab_size}")
    if ids.shape[1] > c.max_positions:
        raise IndexError(f"sequence length {ids.shape[1]} exceeds max_positions {c.max_positions}")
    if batch.type_ids.size and (batch.type_ids.min() < 0 or batch.type_ids.max() >= c.type_vocab):
        raise IndexError(f"type id outside [0, {c.type_vocab})")


def embed(m: Model, batch: Batch) -> Tensor:
    c, p = m.config, m.params
    _check_batch(m, batch)
    seq = batch.ids.shape[1]
    x = gather_rows(p["input_embedding"], batch.ids)
    if "input_proj" in p:
        x = x @ p["input_proj"]
    x = x + gather_rows(p["position_embedding"], np.arange(seq))
    x = x + gather_rows(p["type_embedding"], batch.type_ids)
    return layer_norm(x, p["embedding_ln.gamma"], p["embedding_ln.beta"], c.layernorm_eps)


def attention_bias(batch: Batch, dtype) -> np.ndarray:
    bias = np.where(batch.attention_mask, 0.0, ATTN_MASK_BIAS).astype(dtype)
    return bias[:, None, None, :]


def encoder_layer(m: Model, i: int, x: Tensor, bias: np.ndarray) -> Tensor:
    """Post-layernorm block: LN(x + attn(x)), then LN(x + ffn(x))."""
    c, p = m.config, m.params
    pre = f"layer.{i}."
    b, t, _ = x.shape
    a, d = c.heads, c.head_dim

    def heads(name):
        y = x @ p[pre + f"attn.{name}.weight"] + p[pre + f"attn.{name}.bias"]
        return y.reshape(b, t, a, d).transpose(0, 2, 1, 3)

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(d)) + bias
    ctx = softmax(scores) @ v
    ctx = ctx.transpose(0, 2, 1, 3).reshape(b, t, a * d)
    attn = ctx @ p[pre + "attn.o.weight"] + p[pre + "attn.o.bias"]
    x = layer_norm(x + attn, p[pre + "attn_ln.gamma"], p[pre + "attn_ln.beta"], c.layernorm_eps)
    ff = gelu(x @ p[pre + "ffn.in.weight"] + p[pre + "ffn.in.bias"])
    ff = ff @ p[pre + "ffn.out.weight"] + p[pre + "ffn.out.bias"]
    return layer_norm(x + ff, p[pre + "ffn_ln.gamma"], p[pre + "ffn_ln.beta"], c.layernorm_eps)


def hidden_states(m: Model, batch: Batch, all_layers: bool = False) -> list[Tensor]:
    """[h^0, ..., h^L] when ``all_layers`` else [h^L]; each [B, T, H]."""
    x = embed(m, batch)
    bias = attention_bias(batch, x.dtype)
    out = [x] if all_layers else []
    for i in range(m.config.layers):
        x = encoder_layer(m, i, x, bias)
        if all_layers:
            out.append(x)
    return out if all_layers else [x]


def mlm_head(m: Model, h: Tensor) -> Tensor:
    """Rows of final hidden states [n x H] -> vocabulary logits [n x V]."""
    if not m.has_output_side:
        raise StateError("model has no output side (already stripped for fine-tuning)")
    p = m.params
    if "output_proj" in p:
        h = h @ p["output_proj"]
    h = layer_norm(gelu(h), p["mlm_ln.gamma"], p["mlm_ln.beta"], m.config.layernorm_eps)
    w = p["output_embedding"] if "output_embedding" in p else transpose(p["input_embedding"])
    return h @ w + p["output_bias"]


def forward_mlm(m: Model, batch: MaskedBatch) -> Tensor:
    (final,) = hidden_states(m, batch)
    b, t, hdim = final.shape
    if batch.positions.size and (batch.positions.min() < 0 or batch.positions.max() >= b * t):
        raise IndexError("masked position outside the batch")
    rows = gather_rows(final.reshape(b * t, hdim), batch.positions)
    return mlm_head(m, rows)


def mlm_loss(m: Model, batch: MaskedBatch) -> Tensor:
    logits = forward_mlm(m, batch)
    return softmax_cross_entropy(logits, batch.targets)


def encode(m: Model, batch: Batch) -> LayerActivations:
    with no_grad():
        states = hidden_states(m, batch, all_layers=True)
    return LayerActivations([s.data for s in states])


def truncate_layers(m: Model, keep: int, keep_output: bool = True) -> Model:
    """Delete every layer above ``keep``; the embedding side is kept as is."""
    c = m.config
    if not 1 <= keep <= c.layers:
        raise ValueError(f"keep must be in [1, {c.layers}], got {keep}")
    new_c = c.replace(layers=keep)
    params = {}
    for name, t in m.params.items():
        if name.startswith("layer."):
            if int(name.split(".")[1]) >= keep:
                continue
        elif name in OUTPUT_SIDE and not keep_output:
            continue
        params[name] = Tensor(t.data.copy(), requires_grad=True, name=name)
    return Model(new_c, params)


def to_finetune(m: Model) -> Model:
    """Drop the pooler, output projection, MLM head and output embedding/bias."""
    params = {name: Tensor(t.data.copy(), requires_grad=True, name=name)
              for name, t in m.params.items() if name not in OUTPUT_SIDE}
    return Model(m.config, params)

