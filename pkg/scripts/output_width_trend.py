"""Held-out MLM accuracy as the output embedding widens at a fixed small input width."""

import argparse
import json

import numpy as np

from rebalance.config import DataConfig, ModelConfig, TrainConfig
from rebalance.model import build
from rebalance.pretrain import make_eval_batches, mlm_accuracy, smooth_distribution, train
from rebalance.synthetic import make_corpus, split_corpus
from rebalance.tokenizer import segment


def tokenized(corp, vocab):
    return {l: [segment(s, vocab) for s in corp.sentences(l)] for l in corp.langs}


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--widths", type=int, nargs="+", default=[8, 64, 256])
    p.add_argument("--input-dim", type=int, default=16)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--steps", type=int, default=1500)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--sentences", type=int, default=500)
    a = p.parse_args()

    corp, held = split_corpus(make_corpus(a.sentences, seed=12), 300, seed=12)
    vocab = corp.vocab()
    corpora, held_corpora = tokenized(corp, vocab), tokenized(held, vocab)
    data = DataConfig(seq_len=16, batch_size=64)
    cfg = TrainConfig(steps=a.steps, lr=a.lr, warmup_steps=100)
    q = smooth_distribution({l: len(s) for l, s in held_corpora.items()})
    results = {}
    for e_out in a.widths:
        c = ModelConfig(vocab_size=len(vocab), input_dim=a.input_dim, output_dim=e_out, hidden=64, layers=2,
                        heads=4, max_positions=16)
        accs = []
        for seed in range(a.seeds):
            model = train(build(c, seed), corpora, data, cfg, seed=seed).model
            evals = make_eval_batches(held_corpora, q, data, len(vocab), 16, seed=1000 + seed)
            accs.append(mlm_accuracy(model, evals))
        results[e_out] = {"mean": float(np.mean(accs)), "runs": accs}
        print(json.dumps({"output_dim": e_out, **results[e_out]}))
    means = [results[e]["mean"] for e in a.widths]
    print("non-decreasing:", all(x <= y for x, y in zip(means, means[1:])))


if __name__ == "__main__":
    main()
