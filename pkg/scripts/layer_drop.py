"""Drop top encoder layers after pre-training and measure what the rest still supports.

For each kept depth: fine-tuned accuracy on a coherence task (real walk vs
shuffled words) and nearest-neighbour translation between the two synthetic
languages at the top kept layer.
"""

import argparse
import json

import numpy as np

from rebalance.analysis import nn_translation, sentence_vectors
from rebalance.config import DataConfig, ModelConfig, TrainConfig
from rebalance.finetune import attach_head, classification_dataset, evaluate, finetune
from rebalance.model import build, to_finetune, truncate_layers
from rebalance.pretrain import train
from rebalance.synthetic import make_corpus, split_corpus
from rebalance.tokenizer import segment


def coherence_rows(corp, rng):
    rows = []
    for lang in corp.langs:
        for s in corp.sentences(lang):
            words = s.split()
            if rng.random() < 0.5:
                rows.append(("real", s, None))
            else:
                rows.append(("shuffled", " ".join(rng.permutation(words)), None))
    return rows


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--steps", type=int, default=1500)
    p.add_argument("--ft-epochs", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args()

    corp, held = split_corpus(make_corpus(500, seed=a.seed), 200, seed=a.seed)
    vocab = corp.vocab()
    corpora = {l: [segment(s, vocab) for s in corp.sentences(l)] for l in corp.langs}
    c = ModelConfig(vocab_size=len(vocab), input_dim=64, output_dim=64, hidden=64, layers=a.layers, heads=4,
                    max_positions=16)
    base = train(build(c, a.seed), corpora, DataConfig(seq_len=16, batch_size=128),
                 TrainConfig(steps=a.steps, lr=3e-3, warmup_steps=100), seed=a.seed).model

    rng = np.random.default_rng(a.seed)
    labels = ["real", "shuffled"]
    train_set = classification_dataset(coherence_rows(corp, rng), vocab, 16, labels)
    dev_set = classification_dataset(coherence_rows(held, rng), vocab, 16, labels)
    src, tgt = corp.langs[:2]
    for keep in range(a.layers, 0, -1):
        cut = truncate_layers(base, keep)
        acts_src = sentence_vectors(cut, vocab, held.sentences(src))
        acts_tgt = sentence_vectors(cut, vocab, held.sentences(tgt))
        tm = attach_head(to_finetune(cut), "classification", 2, seed=a.seed, labels=labels)
        tm = finetune(tm, train_set, lr=1e-3, epochs=a.ft_epochs, seed=a.seed).model
        print(json.dumps({
            "layers_kept": keep,
            "params": tm.num_params(),
            "coherence_acc": evaluate(tm, dev_set)["accuracy"],
            "nn_translation_top": nn_translation(acts_src[-1], acts_tgt[-1]),
        }))


if __name__ == "__main__":
    main()
