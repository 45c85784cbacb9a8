"""Write a synthetic two-language corpus, its vocabulary and parallel pairs."""

import argparse
from pathlib import Path

from rebalance.synthetic import make_corpus, split_corpus
from rebalance.tokenizer import save_vocab


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default="data/synthetic")
    p.add_argument("--sentences", type=int, default=500, help="walks per language")
    p.add_argument("--words", type=int, default=240, help="words per language")
    p.add_argument("--heldout", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args()

    out = Path(a.out)
    corpus = make_corpus(a.sentences, words_per_lang=a.words, seed=a.seed)
    _, held = split_corpus(corpus, a.heldout, seed=a.seed)
    corpus.write(out / "corpus")
    held.write(out / "heldout")
    save_vocab(corpus.vocab(), out / "vocab.txt")
    src, tgt = corpus.langs[:2]
    pairs = [f"{held.sentence(src, w)}\t{held.sentence(tgt, w)}" for w in held.walks]
    (out / "pairs.tsv").write_text("\n".join(pairs) + "\n", encoding="utf-8")
    print(f"wrote {out}: {len(corpus.walks)} sentences x {len(corpus.langs)} languages, "
          f"vocab {len(corpus.vocab())}, {len(pairs)} held-out pairs")


if __name__ == "__main__":
    main()
