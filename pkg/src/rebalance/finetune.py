"""Task heads, supervised fine-tuning and the accuracy / F1 / EM metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .checkpoint import CheckpointError, head_param_count, read_checkpoint, write_tensors
from .config import ConfigError
from .model import Batch, Model, StateError, from_arrays, hidden_states, init_array, param_shapes
from .pretrain import OptimizerState, adamw_step
from .tensor import Tensor, gather_rows, no_grad, softmax_cross_entropy, tanh
from .tokenizer import CLS, PAD, SEP, Vocab, pack_ids, segment, segment_with_offsets

KINDS = {"classification": "classification", "cls": "classification",
         "tagging": "tagging", "tag": "tagging", "span": "span"}
MASKED_LOGIT = -1e9


@dataclass
class TaskHead:
    kind: str
    num_labels: int
    pooler: bool
    params: dict[str, Tensor]
    labels: list[str] | None = None

    @property
    def width(self) -> int:
        return 2 if self.kind == "span" else self.num_labels


@dataclass
class TaskModel:
    base: Model
    head: TaskHead

    @property
    def params(self) -> dict[str, Tensor]:
        return {**self.base.params, **self.head.params}

    def num_params(self) -> int:
        return sum(int(t.data.size) for t in self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None


def attach_head(m: Model, kind: str, num_labels: int = 2, seed: int = 0, pooler: bool = False,
                labels: list[str] | None = None) -> TaskModel:
    """Fresh head on a fine-tuning model (its output side must already be gone)."""
    if m.has_output_side:
        raise StateError("attach_head needs a fine-tuning model; call to_finetune first")
    if kind not in KINDS:
        raise ConfigError(f"unknown head kind {kind!r}")
    kind = KINDS[kind]
    if kind == "span":
        num_labels = 2
    elif num_labels < 2:
        raise ConfigError(f"{kind} head needs at least 2 labels, got {num_labels}")
    h = m.config.hidden
    rng = np.random.default_rng(seed)
    shapes = []
    if pooler:
        shapes += [("head.pooler.weight", (h, h)), ("head.pooler.bias", (h,))]
    width = 2 if kind == "span" else num_labels
    shapes += [("head.weight", (h, width)), ("head.bias", (width,))]
    dtype = m.params["input_embedding"].dtype
    params = {n: Tensor(init_array(n, s, rng, dtype), requires_grad=True, name=n) for n, s in shapes}
    return TaskModel(m, TaskHead(kind, num_labels, pooler, params, labels))


# -- datasets ----------------------------------------------------------------

@dataclass
class Encoded:
    ids: list[int]
    type_ids: list[int]
    label: int | None = None  # classification
    tags: list[int] | None = None  # tagging: per token, -1 where unsupervised
    span: tuple[int, int] | None = None  # span: inclusive token indices
    passage: tuple[int, int] | None = None  # span: inclusive token range of the passage


@dataclass
class TaskDataset:
    kind: str
    examples: list[Encoded]
    labels: list[str] = field(default_factory=list)
    skipped: int = 0

    def __len__(self):
        return len(self.examples)

    def __post_init__(self):
        self.kind = KINDS[self.kind]
        for ex in self.examples:
            if self.kind == "classification" and not 0 <= ex.label < max(len(self.labels), ex.label + 1):
                raise ConfigError(f"label {ex.label} out of range")
            if self.kind == "span":
                s, e = ex.span
                ps, pe = ex.passage
                if not ps <= s <= e <= pe:
                    raise ConfigError(f"span {ex.span} outside passage {ex.passage}")


def _label_ids(names: Sequence[str], labels: list[str] | None) -> tuple[list[int], list[str]]:
    labels = list(labels) if labels is not None else sorted(set(names))
    index = {l: i for i, l in enumerate(labels)}
    missing = sorted(set(names) - set(index))
    if missing:
        raise ConfigError(f"labels not in label set: {missing}")
    return [index[n] for n in names], labels


def classification_dataset(rows: Sequence[tuple[str, str, str | None]], vocab: Vocab, max_len: int,
                           labels: list[str] | None = None) -> TaskDataset:
    ids, labels = _label_ids([r[0] for r in rows], labels)
    out = []
    for (_, a, b), y in zip(rows, ids):
        enc = pack_ids(segment(a, vocab), segment(b, vocab) if b else None, max_len)
        out.append(Encoded(enc.ids, enc.type_ids, label=y))
    return TaskDataset("classification", out, labels)


def tagging_dataset(sentences: Sequence[list[tuple[str, str]]], vocab: Vocab, max_len: int,
                    labels: list[str] | None = None) -> TaskDataset:
    """Words are labelled on their first subword; later subwords are unsupervised."""
    all_tags = [t for s in sentences for _, t in s]
    _, labels = _label_ids(all_tags, labels)
    index = {l: i for i, l in enumerate(labels)}
    out = []
    for sent in sentences:
        ids, tags = [CLS], [-1]
        for word, tag in sent:
            pieces = segment(word, vocab) or [PAD]
            if len(ids) + len(pieces) + 1 > max_len:
                break
            ids += pieces
            tags += [index[tag]] + [-1] * (len(pieces) - 1)
        ids.append(SEP)
        tags.append(-1)
        out.append(Encoded(ids, [0] * len(ids), tags=tags))
    return TaskDataset("tagging", out, labels)


def span_dataset(rows: Sequence[tuple[str, str, int, int]], vocab: Vocab, max_len: int) -> TaskDataset:
    """Character spans (end exclusive) mapped onto passage tokens; unreachable answers are skipped."""
    out, skipped = [], 0
    for question, passage, cs, ce in rows:
        q_ids = segment(question, vocab)
        pieces = segment_with_offsets(passage, vocab)
        enc = pack_ids(q_ids, [p for p, _, _ in pieces], max_len)
        n_q = enc.type_ids.count(0) - 2
        n_p = len(enc.ids) - n_q - 3
        first = n_q + 2
        hits = [i for i, (_, s, e) in enumerate(pieces[:n_p]) if s < ce and e > cs]
        if not hits or n_p == 0:
            skipped += 1
            continue
        out.append(Encoded(enc.ids, enc.type_ids, span=(first + hits[0], first + hits[-1]),
                           passage=(first, first + n_p - 1)))
    return TaskDataset("span", out, ["start", "end"], skipped)


def read_classification_file(path) -> list[tuple[str, str, str | None]]:
    rows = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) not in (2, 3):
            raise ConfigError(f"{path}:{lineno}: expected label<TAB>textA[<TAB>textB]")
        rows.append((parts[0], parts[1], parts[2] if len(parts) == 3 and parts[2] else None))
    return rows


def read_tagging_file(path) -> list[list[tuple[str, str]]]:
    sents, cur = [], []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            if cur:
                sents.append(cur)
                cur = []
            continue
        parts = line.split(" ")
        if len(parts) != 2:
            raise ConfigError(f"{path}:{lineno}: expected 'token tag'")
        cur.append((parts[0], parts[1]))
    if cur:
        sents.append(cur)
    return sents


def read_span_file(path) -> list[tuple[str, str, int, int]]:
    rows = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ConfigError(f"{path}:{lineno}: expected question<TAB>passage<TAB>start<TAB>end")
        q, p, s, e = parts
        rows.append((q, p, int(s), int(e)))
    return rows


def load_task_file(kind: str, path, vocab: Vocab, max_len: int, labels=None) -> TaskDataset:
    kind = KINDS[kind]
    if kind == "classification":
        return classification_dataset(read_classification_file(path), vocab, max_len, labels)
    if kind == "tagging":
        return tagging_dataset(read_tagging_file(path), vocab, max_len, labels)
    return span_dataset(read_span_file(path), vocab, max_len)


# -- forward -----------------------------------------------------------------

def collate(examples: Sequence[Encoded]) -> Batch:
    t = max(len(e.ids) for e in examples)
    ids = np.full((len(examples), t), PAD, dtype=np.int64)
    types = np.zeros_like(ids)
    mask = np.zeros(ids.shape, dtype=bool)
    for i, e in enumerate(examples):
        ids[i, :len(e.ids)] = e.ids
        types[i, :len(e.ids)] = e.type_ids
        mask[i, :len(e.ids)] = True
    return Batch(ids, types, mask)


def head_logits(tm: TaskModel, batch: Batch) -> Tensor:
    """classification [B x K]; tagging [B*T x K]; span [B*2 x T] (start/end rows interleaved)."""
    (h,) = hidden_states(tm.base, batch)
    b, t, hd = h.shape
    p = tm.head.params
    kind = tm.head.kind
    if kind == "classification":
        x = gather_rows(h.reshape(b * t, hd), np.arange(b) * t)
        if tm.head.pooler:
            x = tanh(x @ p["head.pooler.weight"] + p["head.pooler.bias"])
        return x @ p["head.weight"] + p["head.bias"]
    if kind == "tagging":
        return h.reshape(b * t, hd) @ p["head.weight"] + p["head.bias"]
    logits = (h @ p["head.weight"] + p["head.bias"]).transpose(0, 2, 1).reshape(b * 2, t)
    pad = np.repeat(np.where(batch.attention_mask, 0.0, MASKED_LOGIT), 2, axis=0)
    return logits + pad.astype(logits.dtype)


def task_loss(tm: TaskModel, examples: Sequence[Encoded]) -> Tensor:
    batch = collate(examples)
    logits = head_logits(tm, batch)
    kind = tm.head.kind
    if kind == "classification":
        return softmax_cross_entropy(logits, [e.label for e in examples])
    if kind == "tagging":
        t = batch.ids.shape[1]
        tags = np.full((len(examples), t), -1, dtype=np.int64)
        for i, e in enumerate(examples):
            tags[i, :len(e.tags)] = e.tags
        tags = tags.reshape(-1)
        return softmax_cross_entropy(logits, np.maximum(tags, 0), tags >= 0)
    targets = [x for e in examples for x in e.span]
    return softmax_cross_entropy(logits, targets)


def best_span(start: np.ndarray, end: np.ndarray, lo: int, hi: int, max_answer: int = 30) -> tuple[int, int]:
    best, arg = -np.inf, (lo, lo)
    for s in range(lo, hi + 1):
        for e in range(s, min(hi, s + max_answer - 1) + 1):
            score = start[s] + end[e]
            if score > best:
                best, arg = score, (s, e)
    return arg


def predict(tm: TaskModel, ds: TaskDataset, batch_size: int = 32) -> list:
    preds = []
    with no_grad():
        for i in range(0, len(ds), batch_size):
            chunk = ds.examples[i:i + batch_size]
            batch = collate(chunk)
            logits = head_logits(tm, batch).data
            t = batch.ids.shape[1]
            if tm.head.kind == "classification":
                preds += [int(k) for k in logits.argmax(axis=1)]
            elif tm.head.kind == "tagging":
                lab = logits.argmax(axis=1).reshape(len(chunk), t)
                preds += [[int(lab[j, k]) for k, g in enumerate(e.tags) if g >= 0]
                          for j, e in enumerate(chunk)]
            else:
                se = logits.reshape(len(chunk), 2, t)
                preds += [best_span(se[j, 0], se[j, 1], *e.passage) for j, e in enumerate(chunk)]
    return preds


# -- metrics -----------------------------------------------------------------

def bio_entities(tags: Sequence[str]) -> set[tuple[str, int, int]]:
    """(type, start, end) spans; a stray I-X is read as B-X."""
    ents, cur = set(), None
    for i, tag in enumerate(list(tags) + ["O"]):
        prefix, _, typ = tag.partition("-")
        if prefix == "I" and cur is not None and cur[0] == typ:
            cur = (typ, cur[1], i)
            continue
        if cur is not None:
            ents.add(cur)
            cur = None
        if prefix in ("B", "I") and typ:
            cur = (typ, i, i)
    return ents


def entity_f1(gold: Sequence[Sequence[str]], pred: Sequence[Sequence[str]]) -> tuple[float, float, float]:
    tp = n_pred = n_gold = 0
    for i, (g, p) in enumerate(zip(gold, pred)):
        ge = {(i,) + e for e in bio_entities(g)}
        pe = {(i,) + e for e in bio_entities(p)}
        tp += len(ge & pe)
        n_pred += len(pe)
        n_gold += len(ge)
    if n_gold == 0 and n_pred == 0:
        return 1.0, 1.0, 1.0
    prec = tp / n_pred if n_pred else 0.0
    rec = tp / n_gold if n_gold else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return prec, rec, f1


def span_em_f1(gold: tuple[int, int], pred: tuple[int, int]) -> tuple[float, float]:
    em = float(gold == pred)
    overlap = max(0, min(gold[1], pred[1]) - max(gold[0], pred[0]) + 1)
    if overlap == 0:
        return em, 0.0
    prec = overlap / (pred[1] - pred[0] + 1)
    rec = overlap / (gold[1] - gold[0] + 1)
    return em, 2 * prec * rec / (prec + rec)


def score(kind: str, gold: list, pred: list, labels: list[str] | None = None) -> dict[str, float]:
    """Percent-scale metrics from gold and predicted labels."""
    kind = KINDS[kind]
    if not gold:
        raise ValueError("empty evaluation set")
    if kind == "classification":
        return {"accuracy": 100.0 * float(np.mean([g == p for g, p in zip(gold, pred)]))}
    if kind == "tagging":
        name = (lambda seq: [labels[k] for k in seq]) if labels else (lambda seq: list(seq))
        prec, rec, f1 = entity_f1([name(g) for g in gold], [name(p) for p in pred])
        return {"precision": 100 * prec, "recall": 100 * rec, "f1": 100 * f1}
    ems, f1s = zip(*(span_em_f1(tuple(g), tuple(p)) for g, p in zip(gold, pred)))
    return {"em": 100.0 * float(np.mean(ems)), "f1": 100.0 * float(np.mean(f1s))}


def gold_labels(ds: TaskDataset) -> list:
    if ds.kind == "classification":
        return [e.label for e in ds.examples]
    if ds.kind == "tagging":
        return [[t for t in e.tags if t >= 0] for e in ds.examples]
    return [e.span for e in ds.examples]


def evaluate(tm: TaskModel, ds: TaskDataset) -> dict[str, float]:
    if len(ds) == 0:
        raise ValueError("empty evaluation set")
    return score(ds.kind, gold_labels(ds), predict(tm, ds), ds.labels or tm.head.labels)


# -- training ----------------------------------------------------------------

@dataclass
class FinetuneResult:
    model: TaskModel
    history: list[dict]


def finetune(tm: TaskModel, train_set: TaskDataset, lr: float = 2e-5, batch_size: int = 32,
             epochs: int = 3, seed: int = 0, warmup_frac: float = 0.1,
             weight_decay: float = 0.01, clip_norm: float = 1.0) -> FinetuneResult:
    """AdamW over base and head, shuffled per epoch from ``seed``."""
    if len(train_set) == 0:
        raise ValueError("empty training set")
    if train_set.kind != tm.head.kind:
        raise ConfigError(f"{train_set.kind} data for a {tm.head.kind} head")
    rng = np.random.default_rng(seed)
    steps_per_epoch = math.ceil(len(train_set) / batch_size)
    total = steps_per_epoch * epochs
    st = OptimizerState(lr=lr, weight_decay=weight_decay, clip_norm=clip_norm,
                        warmup_steps=int(warmup_frac * total), train_steps=total)
    params = {n: t.data for n, t in tm.params.items()}
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(train_set))
        for k in range(steps_per_epoch):
            chunk = [train_set.examples[i] for i in order[k * batch_size:(k + 1) * batch_size]]
            tm.zero_grad()
            loss = task_loss(tm, chunk)
            value = float(loss.data)
            if not math.isfinite(value):
                raise FloatingPointError(
                    f"fine-tuning diverged at epoch {epoch}, step {k}: loss={value}, lr={lr}")
            loss.backward()
            grads = {n: (t.grad if t.grad is not None else np.zeros_like(t.data))
                     for n, t in tm.params.items()}
            used = adamw_step(params, grads, st)
            history.append({"epoch": epoch, "step": st.step, "loss": value, "lr": used})
    tm.zero_grad()
    return FinetuneResult(tm, history)


def primary_metric(kind: str) -> str:
    return {"classification": "accuracy", "tagging": "f1", "span": "f1"}[KINDS[kind]]


def lr_sweep(make_model: Callable[[], TaskModel], train_set: TaskDataset, dev_set: TaskDataset,
             lrs: Sequence[float] = (1e-5, 2e-5, 3e-5), **kwargs) -> tuple[float, dict[float, dict]]:
    """Fine-tune a fresh model per learning rate; return the best rate on dev and all scores."""
    metric = primary_metric(train_set.kind)
    results = {}
    for lr in lrs:
        tm = finetune(make_model(), train_set, lr=lr, **kwargs).model
        results[lr] = evaluate(tm, dev_set)
    best = max(lrs, key=lambda lr: (results[lr][metric], -lr))
    return best, results


# -- persistence -------------------------------------------------------------

def save_task_checkpoint(tm: TaskModel, path) -> None:
    h = tm.head
    extra = {"head": {"kind": h.kind, "num_labels": h.num_labels, "pooler": h.pooler,
                      "labels": h.labels}}
    arrays = {n: t.data for n, t in tm.params.items()}
    write_tensors(path, arrays, "task", tm.base.config, extra)


def load_task_checkpoint(path) -> TaskModel:
    ck = read_checkpoint(path)
    if ck.stage != "task":
        raise CheckpointError(f"expected a task checkpoint, found stage {ck.stage!r}")
    c = ck.config
    base_names = [n for n, _ in param_shapes(c, output_side=False)]
    base = from_arrays(c, {n: ck.arrays[n] for n in base_names})
    hd = ck.manifest["head"]
    head_params = {n: Tensor(a, requires_grad=True, name=n)
                   for n, a in ck.arrays.items() if n.startswith("head.")}
    if len(base_names) + len(head_params) != len(ck.arrays):
        raise CheckpointError("inventory mismatch in task checkpoint")
    return TaskModel(base, TaskHead(hd["kind"], hd["num_labels"], hd["pooler"], head_params, hd.get("labels")))


def head_params_formula(hidden: int, kind: str, num_labels: int, pooler: bool = False) -> int:
    return head_param_count(hidden, KINDS[kind], num_labels, pooler)
