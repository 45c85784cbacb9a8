"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import analysis, finetune as ft
from .budget import (AXES, BudgetReport, NoConfigInTolerance, SearchSpec, budget_table,
                     per_layer_params, search_config)
from .checkpoint import CheckpointError, load_checkpoint, read_checkpoint, save_checkpoint
from .config import ConfigError, ModelConfig, load_run_config
from .model import StateError, build, to_finetune, truncate_layers
from .pretrain import jsonl_writer, load_corpora, make_eval_batches, smooth_distribution, train
from .tokenizer import VocabError, load_vocab

RUNTIME_ERRORS = (ConfigError, CheckpointError, StateError, VocabError, NoConfigInTolerance,
                  analysis.AnalysisError, FloatingPointError, ValueError, KeyError, OSError)


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def parse_count(text: str) -> int:
    """'177.6M', '1.2e8' or '177600000'."""
    t = text.strip().upper().replace(",", "").replace("_", "")
    scale = {"K": 1e3, "M": 1e6, "B": 1e9}.get(t[-1:], None)
    try:
        return int(round(float(t[:-1]) * scale)) if scale else int(round(float(t)))
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a parameter count: {text!r}") from None


def write_report(path: str | None, payload: dict) -> None:
    if path:
        Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def model_config_from(path: str) -> ModelConfig:
    return load_run_config(path).model


# -- subcommands ---------------------------------------------------------------

def cmd_pretrain(a) -> int:
    run = load_run_config(a.config)
    data, cfg = run.data, run.train
    if a.corpus_dir:
        data.corpus_dir = a.corpus_dir
    if a.vocab:
        data.vocab = a.vocab
    if a.steps is not None:
        cfg.steps = a.steps
    if not data.vocab or not data.corpus_dir:
        raise ConfigError("pretraining needs [data] vocab and corpus_dir (or --vocab/--corpus-dir)")
    vocab = load_vocab(data.vocab)
    if len(vocab) != run.model.vocab_size:
        raise ConfigError(f"vocab file has {len(vocab)} ids but [model] vocab_size = {run.model.vocab_size}")
    corpora = load_corpora(data.corpus_dir, vocab)
    q = smooth_distribution({l: len(s) for l, s in corpora.items()}, data.alpha)
    evals = make_eval_batches(corpora, q, data, run.model.vocab_size, 4, run.seed + 1) if cfg.eval_every else None
    model = build(run.model, seed=run.seed)
    log = jsonl_writer(a.log) if a.log else None

    def on_record(rec):
        if log:
            log(rec)
        if cfg.log_every and rec["step"] % cfg.log_every == 0:
            extra = f" mlm_acc={rec['mlm_acc']:.4f}" if "mlm_acc" in rec else ""
            print(f"step {rec['step']:>6} loss={rec['loss']:.4f} lr={rec['lr']:.3g}{extra}")

    train(model, corpora, data, cfg, seed=run.seed, eval_batches=evals, on_record=on_record, out=a.out)
    print(f"wrote {a.out} ({model.num_params():,} parameters)")
    return 0


def _load_finetune_model(path: str):
    m = load_checkpoint(path)
    return to_finetune(m) if m.has_output_side else m


def cmd_finetune(a) -> int:
    vocab = load_vocab(a.vocab)
    base = _load_finetune_model(a.ckpt)
    max_len = a.max_len or base.config.max_positions
    train_set = ft.load_task_file(a.task, a.train, vocab, max_len)
    dev_set = ft.load_task_file(a.task, a.dev, vocab, max_len, labels=train_set.labels or None)
    k = len(train_set.labels) if train_set.kind != "span" else 2
    labels = train_set.labels if train_set.kind != "span" else None

    def fresh():
        return ft.attach_head(_load_finetune_model(a.ckpt), a.task, k, seed=a.seed, pooler=a.pooler,
                              labels=labels)

    kw = dict(batch_size=a.batch_size, epochs=a.epochs, seed=a.seed)
    lrs = a.lr or [1e-5, 2e-5, 3e-5]
    best, results = ft.lr_sweep(fresh, train_set, dev_set, lrs, **kw)
    metric = ft.primary_metric(a.task)
    print(f"{'lr':>10}  " + "  ".join(f"{m:>9}" for m in results[best]))
    for lr, res in results.items():
        mark = " *" if lr == best else ""
        print(f"{lr:>10.2g}  " + "  ".join(f"{v:>9.2f}" for v in res.values()) + mark)
    print(f"best lr {best:g} ({metric} {results[best][metric]:.2f})")
    if a.out:
        tm = ft.finetune(fresh(), train_set, lr=best, **kw).model
        ft.save_task_checkpoint(tm, a.out)
        print(f"wrote {a.out} ({tm.num_params():,} parameters)")
    write_report(a.report, {"task": ft.KINDS[a.task], "best_lr": best,
                            "results": {str(k): v for k, v in results.items()}})
    return 0


def cmd_evaluate(a) -> int:
    vocab = load_vocab(a.vocab)
    tm = ft.load_task_checkpoint(a.ckpt)
    ds = ft.load_task_file(tm.head.kind, a.data, vocab, tm.base.config.max_positions, labels=tm.head.labels)
    res = ft.evaluate(tm, ds)
    for k, v in res.items():
        print(f"{k:<10}{v:>8.2f}")
    write_report(a.report, res)
    return 0


def cmd_truncate(a) -> int:
    m = load_checkpoint(a.inp)
    before = m.num_params()
    out = truncate_layers(m, a.keep, keep_output=not a.drop_output)
    save_checkpoint(out, a.out)
    print(f"{a.inp}: {m.config.layers} layers, {before:,} parameters")
    print(f"{a.out}: {a.keep} layers, {out.num_params():,} parameters "
          f"(-{before - out.num_params():,}; {per_layer_params(m.config):,} per layer)")
    return 0


def cmd_budget_count(a) -> int:
    rows = [(Path(p).stem, model_config_from(p)) for p in a.config]
    print(budget_table(rows))
    write_report(a.report, {"configs": [BudgetReport(n, c).to_dict() for n, c in rows]})
    return 0


def cmd_budget_search(a) -> int:
    free = tuple(x.strip() for x in a.free.split(",") if x.strip())
    bad = set(free) - set(AXES)
    if bad:
        raise ConfigError(f"unknown axes {sorted(bad)}; choose from {', '.join(AXES)}")
    base = model_config_from(a.config)
    hits = search_config(SearchSpec(a.target, base, free, tolerance=a.tolerance))
    top = hits[:a.top]
    print(f"target FT {a.target:,} +/- {a.tolerance:.1%}, free {','.join(free)}: {len(hits)} configs")
    print(budget_table([(f"H={c.hidden} L={c.layers} E={c.input_dim}/{c.output_dim}", c) for c in top]))
    write_report(a.report, {"target": a.target, "free": list(free), "tolerance": a.tolerance,
                            "matches": len(hits),
                            "configs": [BudgetReport(f"rank{i + 1}", c).to_dict() for i, c in enumerate(top)]})
    return 0


def _sides(m, side: str) -> list[str]:
    if side != "both":
        return [side]
    return ["input"] if m.config.coupled else ["input", "output"]


def cmd_wordsim(a) -> int:
    vocab = load_vocab(a.vocab)
    m = load_checkpoint(a.ckpt)
    report = {}
    print(f"{'dataset':<20}" + "".join(f"{s:>10}" for s in _sides(m, a.side)))
    for path in a.data:
        triples = analysis.read_wordsim(path)
        row = {s: analysis.word_similarity(m, vocab, triples, s) for s in _sides(m, a.side)}
        print(f"{Path(path).stem:<20}" + "".join(f"{r.correlation:>10.3f}" for r in row.values()))
        report[Path(path).stem] = {s: vars(r) for s, r in row.items()}
    if m.config.coupled and a.side == "both":
        print("(coupled: one shared matrix, one column)")
    write_report(a.report, report)
    return 0


def cmd_nntrans(a) -> int:
    vocab = load_vocab(a.vocab)
    m = load_checkpoint(a.ckpt)
    pairs = analysis.read_pairs(a.pairs)
    src = analysis.sentence_vectors(m, vocab, [s for s, _ in pairs])
    tgt = analysis.sentence_vectors(m, vocab, [t for _, t in pairs])
    if a.layer == "all":
        layers = list(range(src.shape[0]))
    else:
        layer = int(a.layer)
        if not 0 <= layer < src.shape[0]:
            raise ConfigError(f"layer must be in [0, {src.shape[0] - 1}]")
        layers = [layer]
    accs = {l: analysis.nn_translation(src[l], tgt[l]) for l in layers}
    print(f"{'layer':>5}{'accuracy':>10}   (M={len(pairs)})")
    for l, acc in accs.items():
        print(f"{l:>5}{acc:>10.4f}")
    write_report(a.report, {"pairs": len(pairs), "accuracy": {str(l): v for l, v in accs.items()}})
    return 0


def cmd_probe_mix(a) -> int:
    vocab = load_vocab(a.vocab)
    m = load_checkpoint(a.ckpt)
    rows = ft.read_classification_file(a.data)
    names = sorted({r[0] for r in rows})
    labels = [names.index(r[0]) for r in rows]
    acts = analysis.sentence_vectors(m, vocab, [r[1] for r in rows]).transpose(1, 0, 2)
    res = analysis.mix_probe_train(acts, labels, seed=a.seed, steps=a.steps)
    print(f"{'layer':>5}{'weight':>10}")
    for l, w in enumerate(res.layer_weights):
        print(f"{l:>5}{w:>10.4f}")
    print(f"dev accuracy {res.dev_accuracy:.4f}")
    write_report(a.report, {"layer_weights": res.layer_weights.tolist(),
                            "dev_accuracy": res.dev_accuracy, "train_accuracy": res.train_accuracy})
    return 0


def cmd_export(a) -> int:
    m = load_checkpoint(a.ckpt)
    table = analysis.export_embeddings(m, a.side, a.out)
    print(f"wrote {a.out} ({table.shape[0]} x {table.shape[1]})")
    return 0


def cmd_inspect(a) -> int:
    ck = read_checkpoint(a.ckpt)
    man = {k: v for k, v in ck.manifest.items() if k != "tensors"}
    print(json.dumps(man, indent=2))
    for e in ck.manifest["tensors"]:
        print(f"{e['name']:<32}{str(tuple(e['shape'])):>16}{e['offset']:>14}")
    return 0


# -- parser --------------------------------------------------------------------

def build_parser() -> Parser:
    p = Parser(prog="rebalance", description="Decoupled-embedding transformer toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    s = sub.add_parser("pretrain", help="MLM pre-training from a run config")
    s.add_argument("--config", required=True)
    s.add_argument("--corpus-dir")
    s.add_argument("--vocab")
    s.add_argument("--out", required=True)
    s.add_argument("--log", help="JSON-lines training log")
    s.add_argument("--steps", type=int)
    s.set_defaults(fn=cmd_pretrain)

    s = sub.add_parser("finetune", help="fine-tune with a task head, sweeping learning rates")
    s.add_argument("--task", required=True, choices=["cls", "tag", "span"])
    s.add_argument("--ckpt", required=True)
    s.add_argument("--train", required=True)
    s.add_argument("--dev", required=True)
    s.add_argument("--vocab", required=True)
    s.add_argument("--out")
    s.add_argument("--lr", type=float, nargs="+")
    s.add_argument("--epochs", type=int, default=3)
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--max-len", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--pooler", action="store_true", help="add a fresh tanh pooler before the head")
    s.add_argument("--report")
    s.set_defaults(fn=cmd_finetune)

    s = sub.add_parser("evaluate", help="score a task checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--vocab", required=True)
    s.add_argument("--report")
    s.set_defaults(fn=cmd_evaluate)

    s = sub.add_parser("truncate", help="drop the top encoder layers")
    s.add_argument("--keep", type=int, required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--drop-output", action="store_true", help="also strip the output side")
    s.set_defaults(fn=cmd_truncate)

    s = sub.add_parser("budget", help="parameter counts and budget search")
    bsub = s.add_subparsers(dest="budget_command", required=True, parser_class=Parser)
    b = bsub.add_parser("count")
    b.add_argument("--config", required=True, nargs="+")
    b.add_argument("--report")
    b.set_defaults(fn=cmd_budget_count)
    b = bsub.add_parser("search")
    b.add_argument("--target", required=True, type=parse_count, help="fine-tuning count, e.g. 177.6M")
    b.add_argument("--free", required=True, help=f"comma list from {','.join(AXES)}")
    b.add_argument("--config", required=True, help="base config")
    b.add_argument("--tolerance", type=float, default=0.01)
    b.add_argument("--top", type=int, default=10)
    b.add_argument("--report")
    b.set_defaults(fn=cmd_budget_search)

    s = sub.add_parser("analyze", help="embedding and representation probes")
    asub = s.add_subparsers(dest="analysis", required=True, parser_class=Parser)
    w = asub.add_parser("wordsim")
    w.add_argument("--ckpt", required=True)
    w.add_argument("--vocab", required=True)
    w.add_argument("--data", required=True, nargs="+")
    w.add_argument("--side", choices=["input", "output", "both"], default="both")
    w.add_argument("--report")
    w.set_defaults(fn=cmd_wordsim)
    n = asub.add_parser("nntrans")
    n.add_argument("--ckpt", required=True)
    n.add_argument("--vocab", required=True)
    n.add_argument("--pairs", required=True)
    n.add_argument("--layer", default="all")
    n.add_argument("--report")
    n.set_defaults(fn=cmd_nntrans)
    pm = asub.add_parser("probe-mix")
    pm.add_argument("--ckpt", required=True)
    pm.add_argument("--vocab", required=True)
    pm.add_argument("--data", required=True, help="classification task file")
    pm.add_argument("--seed", type=int, default=0)
    pm.add_argument("--steps", type=int, default=300)
    pm.add_argument("--report")
    pm.set_defaults(fn=cmd_probe_mix)

    s = sub.add_parser("export", help="write one embedding matrix as a tensor file")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--side", choices=["input", "output"], required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_export)

    s = sub.add_parser("inspect", help="print a checkpoint manifest")
    s.add_argument("ckpt")
    s.set_defaults(fn=cmd_inspect)
    return p


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return 0 if e.code in (0, None) else 1
    try:
        return args.fn(args)
    except RUNTIME_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
