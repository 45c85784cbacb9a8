"""Embedding and representation probes: word similarity, nearest-neighbour
translation across layers, and the softmax layer-mix probe."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import spearmanr

from .checkpoint import save_tensor
from .config import ConfigError
from .model import Batch, Model, StateError, encode
from .pretrain import OptimizerState, adamw_step
from .tensor import Tensor, gelu, softmax, softmax_cross_entropy, no_grad
from .tokenizer import CLS, PAD, SEP, UNK, Vocab, pack_ids, segment

MAX_SKIP_RATIO = 0.2


class AnalysisError(ValueError):
    pass


# -- word similarity ----------------------------------------------------------

def read_wordsim(path) -> list[tuple[str, str, float]]:
    rows = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ConfigError(f"{path}:{lineno}: expected word1<TAB>word2<TAB>score")
        score = float(parts[2])
        if not math.isfinite(score):
            raise ConfigError(f"{path}:{lineno}: non-finite score")
        rows.append((parts[0], parts[1], score))
    return rows


def rank_correlation(gold: Sequence[float], predicted: Sequence[float]) -> float:
    """Spearman's rho with average ranks for ties."""
    if len(gold) != len(predicted):
        raise AnalysisError("gold and predicted lengths differ")
    if len(gold) < 2:
        raise AnalysisError(f"need at least 2 pairs, got {len(gold)}")
    if np.ptp(np.asarray(gold, dtype=float)) == 0 or np.ptp(np.asarray(predicted, dtype=float)) == 0:
        raise AnalysisError("correlation undefined for a constant input")
    return float(spearmanr(gold, predicted).statistic)


def embedding_matrix(m: Model, side: str) -> np.ndarray:
    """Vocabulary-ordered rows: input_embedding as is, or output_embedding transposed."""
    if side == "input":
        return m.params["input_embedding"].data
    if side == "output":
        return m.output_embedding().T
    raise ConfigError(f"side must be 'input' or 'output', got {side!r}")


def word_vector(word: str, vocab: Vocab, table: np.ndarray) -> np.ndarray | None:
    ids = segment(word, vocab)
    if not ids or UNK in ids:
        return None
    return table[ids].astype(np.float64).mean(axis=0)


@dataclass
class WordSimResult:
    correlation: float
    pairs: int
    skipped: int


def word_similarity(m: Model, vocab: Vocab, triples: Sequence[tuple[str, str, float]],
                    side: str = "input") -> WordSimResult:
    table = embedding_matrix(m, side)
    gold, dots, skipped = [], [], 0
    for w1, w2, score in triples:
        a, b = word_vector(w1, vocab, table), word_vector(w2, vocab, table)
        if a is None or b is None:
            skipped += 1
            continue
        gold.append(score)
        dots.append(float(a @ b))
    if triples and skipped / len(triples) > MAX_SKIP_RATIO:
        raise AnalysisError(f"{skipped} of {len(triples)} pairs out of vocabulary "
                            f"(limit {MAX_SKIP_RATIO:.0%})")
    return WordSimResult(rank_correlation(gold, dots), len(gold), skipped)


# -- nearest-neighbour translation ------------------------------------------

def read_pairs(path) -> list[tuple[str, str]]:
    rows = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ConfigError(f"{path}:{lineno}: expected source<TAB>target")
        rows.append((parts[0], parts[1]))
    return rows


def sentence_vectors(m: Model, vocab: Vocab, sentences: Sequence[str], batch_size: int = 64) -> np.ndarray:
    """[L+1, M, H] token averages, ignoring [CLS], [SEP] and padding."""
    max_len = m.config.max_positions
    out = []
    for i in range(0, len(sentences), batch_size):
        encs = [pack_ids(segment(s, vocab), None, max_len) for s in sentences[i:i + batch_size]]
        t = max(len(e.ids) for e in encs)
        ids = np.full((len(encs), t), PAD, dtype=np.int64)
        for j, e in enumerate(encs):
            ids[j, :len(e.ids)] = e.ids
        keep = (ids != PAD) & (ids != CLS) & (ids != SEP)
        acts = encode(m, Batch.from_ids(ids, attention_mask=ids != PAD))
        w = keep.astype(np.float64)
        denom = np.maximum(w.sum(axis=1, keepdims=True), 1.0)
        out.append(np.stack([(s.astype(np.float64) * w[..., None]).sum(axis=1) / denom for s in acts.states]))
    return np.concatenate(out, axis=1)


def translation_vector(src: np.ndarray, tgt: np.ndarray) -> np.ndarray:
    return (tgt - src).mean(axis=0)


def nn_translation(src: np.ndarray, tgt: np.ndarray, chunk: int = 256) -> float:
    """Share of sources whose shifted vector lands strictly nearest its own target."""
    src = np.asarray(src, dtype=np.float64)
    tgt = np.asarray(tgt, dtype=np.float64)
    if src.shape != tgt.shape:
        raise AnalysisError(f"pair count or width mismatch: {src.shape} vs {tgt.shape}")
    if src.ndim != 2 or len(src) < 2:
        raise AnalysisError("need an [M x H] array with M >= 2")
    moved = src + translation_vector(src, tgt)
    correct = 0
    for lo in range(0, len(src), chunk):
        q = moved[lo:lo + chunk]
        d = np.square(q[:, None, :] - tgt[None, :, :]).sum(axis=2)
        own = d[np.arange(len(q)), np.arange(lo, lo + len(q))]
        d[np.arange(len(q)), np.arange(lo, lo + len(q))] = np.inf
        correct += int((own < d.min(axis=1)).sum())
    return correct / len(src)


def nn_translation_by_layer(src: np.ndarray, tgt: np.ndarray) -> list[float]:
    """``src``/``tgt`` are [L+1, M, H]; one accuracy per layer."""
    if src.shape != tgt.shape:
        raise AnalysisError(f"pair count or width mismatch: {src.shape} vs {tgt.shape}")
    return [nn_translation(s, t) for s, t in zip(src, tgt)]


# -- mix probe ----------------------------------------------------------------

@dataclass
class MixProbe:
    params: dict[str, Tensor]

    @property
    def layer_weights(self) -> np.ndarray:
        s = self.params["mix.scalars"].data.astype(np.float64)
        e = np.exp(s - s.max())
        return e / e.sum()

    def logits(self, acts: np.ndarray) -> Tensor:
        n, layers, h = acts.shape
        stacked = Tensor(np.ascontiguousarray(acts.transpose(0, 2, 1)).reshape(n * h, layers))
        w = softmax(self.params["mix.scalars"].reshape(layers, 1), axis=0)
        x = (stacked @ w).reshape(n, h)
        p = self.params
        z = gelu(x @ p["mix.dense1.weight"] + p["mix.dense1.bias"])
        return z @ p["mix.dense2.weight"] + p["mix.dense2.bias"]

    def predict(self, acts: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.logits(np.asarray(acts, dtype=np.float32)).data.argmax(axis=1)


@dataclass
class MixProbeResult:
    probe: MixProbe
    dev_accuracy: float
    train_accuracy: float
    history: list[dict] = field(default_factory=list)

    @property
    def layer_weights(self) -> np.ndarray:
        return self.probe.layer_weights


def init_mix_probe(layers: int, hidden: int, num_classes: int, seed: int = 0) -> MixProbe:
    rng = np.random.default_rng(seed)
    inner = max(1, hidden // 2)

    def dense(shape):
        return rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape).astype(np.float32)

    arrays = {
        "mix.scalars": np.zeros(layers, dtype=np.float32),
        "mix.dense1.weight": dense((hidden, inner)),
        "mix.dense1.bias": np.zeros(inner, dtype=np.float32),
        "mix.dense2.weight": dense((inner, num_classes)),
        "mix.dense2.bias": np.zeros(num_classes, dtype=np.float32),
    }
    return MixProbe({n: Tensor(a, requires_grad=True, name=n) for n, a in arrays.items()})


def mix_probe_train(acts: np.ndarray, labels: Sequence[int], seed: int = 0,
                    dev: tuple[np.ndarray, Sequence[int]] | None = None, steps: int = 300,
                    lr: float = 1e-2, batch_size: int = 64, weight_decay: float = 0.01) -> MixProbeResult:
    """``acts`` is [N, L+1, H]. Without ``dev`` a seeded 80/20 split is held out."""
    acts = np.asarray(acts, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if acts.ndim != 3 or len(acts) != len(labels):
        raise AnalysisError("need one [L+1 x H] activation stack per label")
    classes = np.unique(labels)
    if len(classes) < 2:
        raise AnalysisError("probe needs at least two classes")
    rng = np.random.default_rng(seed)
    if dev is None:
        order = rng.permutation(len(acts))
        cut = max(1, int(round(0.8 * len(acts))))
        tr, dv = order[:cut], order[cut:]
        x_tr, y_tr, x_dev, y_dev = acts[tr], labels[tr], acts[dv], labels[dv]
    else:
        x_tr, y_tr = acts, labels
        x_dev, y_dev = np.asarray(dev[0], dtype=np.float32), np.asarray(dev[1], dtype=np.int64)
    if len(x_dev) == 0:
        raise AnalysisError("empty dev split")
    k = int(max(labels.max(), y_dev.max())) + 1
    probe = init_mix_probe(acts.shape[1], acts.shape[2], k, seed)
    st = OptimizerState(lr=lr, weight_decay=weight_decay, clip_norm=1.0, train_steps=steps)
    data = {n: t.data for n, t in probe.params.items()}
    history = []
    for _ in range(steps):
        idx = rng.choice(len(x_tr), size=min(batch_size, len(x_tr)), replace=False)
        for t in probe.params.values():
            t.grad = None
        loss = softmax_cross_entropy(probe.logits(x_tr[idx]), y_tr[idx])
        loss.backward()
        adamw_step(data, {n: t.grad for n, t in probe.params.items()}, st)
        history.append({"step": st.step, "loss": float(loss.data), "weights": probe.layer_weights.tolist()})
    return MixProbeResult(
        probe,
        dev_accuracy=float((probe.predict(x_dev) == y_dev).mean()),
        train_accuracy=float((probe.predict(x_tr) == y_tr).mean()),
        history=history,
    )


# -- export -------------------------------------------------------------------

def export_embeddings(m: Model, side: str, path) -> np.ndarray:
    """Write one side's [V x E] matrix as a single-tensor checkpoint file.

    Both sides of a coupled model produce byte-identical files.
    """
    if side == "output" and not m.has_output_side:
        raise StateError("fine-tuning model has no output embedding to export")
    table = np.ascontiguousarray(embedding_matrix(m, side))
    tag = "shared" if m.config.coupled else side
    save_tensor(path, f"{tag}_embedding", table, {"side": tag})
    return table
