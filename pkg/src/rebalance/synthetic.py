"""Synthetic multilingual corpora for desk-scale experiments.

Every language has its own word list ``<lang><index>`` but all languages share
one successor permutation over word indices, so a sentence is a walk along a
fixed chain and the sentence with the same walk in another language is its
translation. Each masked word is recoverable from either neighbour.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tokenizer import WORD_MARK, Vocab


@dataclass
class SyntheticCorpus:
    langs: tuple[str, ...]
    words_per_lang: int
    successor: np.ndarray
    walks: list[tuple[int, int]]  # (start index, length)

    def word(self, lang: str, index: int) -> str:
        return f"{lang}{index:03d}"

    def sentence(self, lang: str, walk: tuple[int, int]) -> str:
        start, length = walk
        out, w = [], start
        for _ in range(length):
            out.append(self.word(lang, w))
            w = int(self.successor[w])
        return " ".join(out)

    def sentences(self, lang: str) -> list[str]:
        return [self.sentence(lang, w) for w in self.walks]

    def vocab(self) -> Vocab:
        n = len(self.langs) * self.words_per_lang
        lp = -math.log(n)
        return Vocab.from_pieces([(WORD_MARK + self.word(l, i), lp)
                                  for l in self.langs for i in range(self.words_per_lang)])

    def write(self, corpus_dir: str | Path) -> None:
        corpus_dir = Path(corpus_dir)
        corpus_dir.mkdir(parents=True, exist_ok=True)
        for lang in self.langs:
            (corpus_dir / f"{lang}.txt").write_text("\n".join(self.sentences(lang)) + "\n", encoding="utf-8")


def make_corpus(n_sentences: int = 1000, langs=("xa", "xb"), words_per_lang: int = 240,
                min_len: int = 6, max_len: int = 12, seed: int = 0) -> SyntheticCorpus:
    rng = np.random.default_rng(seed)
    successor = rng.permutation(words_per_lang)
    starts = rng.integers(0, words_per_lang, size=n_sentences)
    lengths = rng.integers(min_len, max_len + 1, size=n_sentences)
    walks = [(int(s), int(n)) for s, n in zip(starts, lengths)]
    return SyntheticCorpus(tuple(langs), words_per_lang, successor, walks)


def split_corpus(corpus: SyntheticCorpus, n_heldout: int, seed: int = 0) -> tuple[SyntheticCorpus, SyntheticCorpus]:
    """Fresh walks for held-out evaluation (the chain itself is shared)."""
    rng = np.random.default_rng(seed + 7919)
    lens = [n for _, n in corpus.walks]
    starts = rng.integers(0, corpus.words_per_lang, size=n_heldout)
    lengths = rng.integers(min(lens), max(lens) + 1, size=n_heldout)
    held = SyntheticCorpus(corpus.langs, corpus.words_per_lang, corpus.successor,
                           [(int(s), int(n)) for s, n in zip(starts, lengths)])
    return corpus, held
