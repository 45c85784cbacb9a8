"""Deterministic MLM pre-training at desk scale.

Languages are sampled from exponentially smoothed sentence counts, sequences
are packed from consecutive sentences of a single language, and tokens are
corrupted BERT-style before an AdamW update with warmup and global-norm
clipping.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .config import ConfigError, DataConfig, TrainConfig
from .model import Batch, MaskedBatch, Model, forward_mlm, is_no_decay, mlm_loss
from .tensor import no_grad
from .tokenizer import CLS, MASK, NUM_SPECIALS, PAD, SEP, Vocab, segment

log = logging.getLogger(__name__)


# -- language sampling -------------------------------------------------------

@dataclass
class SamplingConfig:
    counts: dict[str, int]
    alpha: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.alpha <= 1:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        for lang, n in self.counts.items():
            if n <= 0:
                raise ConfigError(f"language {lang!r} has non-positive count {n}")


def smooth_distribution(counts: dict[str, int | float], alpha: float = 0.5) -> dict[str, float]:
    """q_l proportional to (n_l / sum n)^alpha."""
    if not counts:
        raise ConfigError("no languages to sample from")
    for lang, n in counts.items():
        if not n > 0:
            raise ConfigError(f"language {lang!r} has non-positive count {n}")
    langs = sorted(counts)
    total = math.fsum(counts[l] for l in langs)
    powered = [(counts[l] / total) ** alpha for l in langs]
    z = math.fsum(powered)
    return {l: p / z for l, p in zip(langs, powered)}


def load_corpora(corpus_dir: str | Path, vocab: Vocab) -> dict[str, list[list[int]]]:
    """``<lang>.txt`` files, one sentence per line, segmented into id lists."""
    corpus_dir = Path(corpus_dir)
    corpora = {}
    for path in sorted(corpus_dir.glob("*.txt")):
        sents = []
        for line in path.read_text(encoding="utf-8").splitlines():
            ids = segment(line, vocab)
            if ids:
                sents.append(ids)
        if not sents:
            raise ConfigError(f"corpus {path} is empty")
        corpora[path.stem] = sents
    if not corpora:
        raise ConfigError(f"no <lang>.txt files in {corpus_dir}")
    return corpora


def pack_sequence(sents: list[list[int]], start: int, seq_len: int) -> list[int]:
    """[CLS] s_start [SEP] s_start+1 [SEP] ... while whole sentences fit.

    The first sentence is truncated if it alone overflows; later sentences are
    only added whole. The corpus wraps around.
    """
    room = seq_len - 2
    first = sents[start % len(sents)][:room]
    ids = [CLS] + first + [SEP]
    i = start + 1
    while len(sents) > 1 and (i - start) < len(sents):
        nxt = sents[i % len(sents)]
        if len(ids) + len(nxt) + 1 > seq_len:
            break
        ids += nxt + [SEP]
        i += 1
    return ids


def sample_batch(corpora: dict[str, list[list[int]]], q: dict[str, float], batch_size: int,
                 seq_len: int, rng: np.random.Generator) -> Batch:
    if seq_len < 3:
        raise ValueError("seq_len must be >= 3")
    langs = sorted(q)
    for l in langs:
        if not corpora.get(l):
            raise ConfigError(f"corpus for language {l!r} is empty")
    probs = np.array([q[l] for l in langs], dtype=np.float64)
    choice = rng.choice(len(langs), size=batch_size, p=probs / probs.sum())
    starts = rng.random(batch_size)
    ids = np.full((batch_size, seq_len), PAD, dtype=np.int64)
    picked = []
    for row, (li, u) in enumerate(zip(choice, starts)):
        sents = corpora[langs[li]]
        seq = pack_sequence(sents, int(u * len(sents)), seq_len)
        ids[row, :len(seq)] = seq
        picked.append(langs[li])
    return Batch(ids, np.zeros_like(ids), ids != PAD, langs=picked)


# -- masking -----------------------------------------------------------------

@dataclass
class MaskingPolicy:
    mask_prob: float = 0.15
    mask_token_frac: float = 0.8
    random_frac: float = 0.1
    keep_frac: float = 0.1

    def __post_init__(self):
        if not 0 <= self.mask_prob <= 1:
            raise ConfigError("mask_prob must be in [0, 1]")
        fracs = (self.mask_token_frac, self.random_frac, self.keep_frac)
        if min(fracs) < 0 or abs(sum(fracs) - 1) > 1e-9:
            raise ConfigError(f"replacement fractions must be >= 0 and sum to 1, got {fracs}")

    @classmethod
    def from_data_config(cls, d: DataConfig) -> "MaskingPolicy":
        return cls(d.mask_prob, d.mask_token_frac, d.random_frac, d.keep_frac)


def apply_masking(b: Batch, policy: MaskingPolicy, rng: np.random.Generator,
                  vocab_size: int) -> MaskedBatch:
    """Select each non-special token with ``mask_prob``; corrupt per the policy.

    Draw order is fixed (selection, replacement kind, random ids) so the result
    is a pure function of the generator state.
    """
    ids = b.ids
    eligible = (ids >= NUM_SPECIALS) & b.attention_mask
    selected = eligible & (rng.random(ids.shape) < policy.mask_prob)
    positions = np.flatnonzero(selected.reshape(-1))
    n = positions.size
    kind = rng.random(n)
    random_ids = rng.integers(NUM_SPECIALS, vocab_size, size=n) if vocab_size > NUM_SPECIALS \
        else np.full(n, MASK)
    flat = ids.reshape(-1).copy()
    targets = flat[positions].copy()
    to_mask = kind < policy.mask_token_frac
    to_random = ~to_mask & (kind < policy.mask_token_frac + policy.random_frac)
    flat[positions[to_mask]] = MASK
    flat[positions[to_random]] = random_ids[to_random]
    return MaskedBatch(flat.reshape(ids.shape), b.type_ids.copy(), b.attention_mask.copy(),
                       langs=b.langs, positions=positions, targets=targets)


def unmask(mb: MaskedBatch) -> Batch:
    flat = mb.ids.reshape(-1).copy()
    flat[mb.positions] = mb.targets
    return Batch(flat.reshape(mb.ids.shape), mb.type_ids.copy(), mb.attention_mask.copy(), langs=mb.langs)


# -- optimizer ---------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    weight_decay: float = 0.01
    clip_norm: float | None = 1.0
    warmup_steps: int = 0
    train_steps: int | None = None
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_train_config(cls, t: TrainConfig, train_steps: int | None = None) -> "OptimizerState":
        return cls(lr=t.lr, beta1=t.beta1, beta2=t.beta2, eps=t.eps, weight_decay=t.weight_decay,
                   clip_norm=t.clip_norm, warmup_steps=t.warmup_steps,
                   train_steps=(train_steps if train_steps is not None else t.steps) if t.decay else None)


def learning_rate(step: int, peak: float, warmup: int, total: int | None) -> float:
    """Rate for the update with 0-based index ``step``: linear warmup, then linear decay to 0."""
    if warmup > 0 and step < warmup:
        return peak * (step + 1) / warmup
    if total is None or total <= warmup:
        return peak
    return peak * max(0.0, (total - step) / (total - warmup))


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(math.fsum(float(np.square(g, dtype=np.float64).sum()) for g in grads.values()))


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], st: OptimizerState) -> float:
    """One in-place AdamW update; returns the learning rate that was used."""
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in {name}")
    scale = 1.0
    if st.clip_norm:
        norm = global_norm(grads)
        if norm > st.clip_norm:
            scale = st.clip_norm / norm
    lr = learning_rate(st.step, st.lr, st.warmup_steps, st.train_steps)
    st.step += 1
    t = st.step
    bc1 = 1 - st.beta1 ** t
    bc2 = 1 - st.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        elif scale != 1.0:
            g = g * p.dtype.type(scale)
        m = st.m.get(name)
        if m is None:
            m = st.m[name] = np.zeros_like(p)
            st.v[name] = np.zeros_like(p)
        v = st.v[name]
        m *= st.beta1
        m += (1 - st.beta1) * g
        v *= st.beta2
        v += (1 - st.beta2) * g * g
        if st.weight_decay and not is_no_decay(name):
            p -= p.dtype.type(lr * st.weight_decay) * p
        p -= p.dtype.type(lr) * (m / bc1) / (np.sqrt(v / bc2) + p.dtype.type(st.eps))
    return lr


def model_grads(model: Model) -> dict[str, np.ndarray]:
    return {n: (t.grad if t.grad is not None else np.zeros_like(t.data)) for n, t in model.params.items()}


# -- training ----------------------------------------------------------------

class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, model: Model):
        super().__init__(f"loss became non-finite at step {step}")
        self.step = step
        self.model = model


@dataclass
class TrainResult:
    model: Model
    history: list[dict]

    def losses(self) -> list[float]:
        return [r["loss"] for r in self.history]


def mlm_accuracy(model: Model, batches: list[MaskedBatch]) -> float:
    correct = total = 0
    with no_grad():
        for mb in batches:
            if mb.num_masked == 0:
                continue
            logits = forward_mlm(model, mb).data
            correct += int((logits.argmax(axis=1) == mb.targets).sum())
            total += mb.num_masked
    if total == 0:
        raise ValueError("mlm_accuracy needs at least one masked position")
    return correct / total


def make_eval_batches(corpora, q, data: DataConfig, vocab_size: int, n_batches: int, seed: int):
    """Fixed masked batches, independent of the training stream."""
    rng = np.random.default_rng(seed)
    policy = MaskingPolicy.from_data_config(data)
    out = []
    for _ in range(n_batches):
        b = sample_batch(corpora, q, data.batch_size, data.seq_len, rng)
        out.append(apply_masking(b, policy, rng, vocab_size))
    return out


def train(model: Model, corpora: dict[str, list[list[int]]], data: DataConfig, cfg: TrainConfig,
          seed: int = 0, eval_batches: list[MaskedBatch] | None = None,
          on_record: Callable[[dict], None] | None = None, out: str | Path | None = None) -> TrainResult:
    """Run ``cfg.steps`` MLM updates in place; optionally write the final checkpoint.

    On a non-finite loss the pre-step parameters are written to ``out`` (if
    given) and :class:`TrainingDiverged` is raised.
    """
    from .checkpoint import save_checkpoint

    if not model.has_output_side:
        raise ValueError("pre-training needs a model with its output side")
    rng = np.random.default_rng(seed)
    q = smooth_distribution({l: len(s) for l, s in corpora.items()}, data.alpha)
    policy = MaskingPolicy.from_data_config(data)
    state = OptimizerState.from_train_config(cfg)
    params = model.arrays()
    history = []
    for step in range(cfg.steps):
        # small batches can come out with nothing selected; redraw them
        for _ in range(100):
            batch = sample_batch(corpora, q, data.batch_size, data.seq_len, rng)
            mb = apply_masking(batch, policy, rng, model.config.vocab_size)
            if mb.num_masked:
                break
        else:
            raise ValueError(f"step {step + 1}: 100 batches in a row had no masked positions")
        model.zero_grad()
        loss = mlm_loss(model, mb)
        value = float(loss.data)
        if not math.isfinite(value):
            if out is not None:
                save_checkpoint(model, out)
            raise TrainingDiverged(step + 1, model)
        loss.backward()
        lr = adamw_step(params, model_grads(model), state)
        rec = {"step": step + 1, "loss": value, "lr": lr}
        if eval_batches and cfg.eval_every and (step + 1) % cfg.eval_every == 0:
            rec["mlm_acc"] = mlm_accuracy(model, eval_batches)
        history.append(rec)
        if on_record is not None:
            on_record(rec)
    model.zero_grad()
    if out is not None:
        save_checkpoint(model, out)
    return TrainResult(model, history)


def jsonl_writer(path: str | Path) -> Callable[[dict], None]:
    fh = open(path, "w", encoding="utf-8")

    def write(rec: dict) -> None:
        fh.write(json.dumps(rec) + "\n")
        fh.flush()

    return write
