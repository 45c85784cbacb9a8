"""Unigram-LM subword segmentation over an ingested vocabulary.

Vocabulary files are UTF-8 TSV, one ``piece<TAB>logprob`` per line; piece ids
start at 5 after the reserved specials.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4
SPECIALS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
NUM_SPECIALS = len(SPECIALS)
WORD_MARK = "▁"


class VocabError(ValueError):
    pass


@dataclass(frozen=True)
class Vocab:
    pieces: tuple[tuple[str, float], ...]
    index: dict = field(init=False, repr=False, compare=False)
    max_len: int = field(init=False, repr=False, compare=False)
    uses_word_mark: bool = field(init=False, repr=False, compare=False)
    unk_score: float = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        index = {}
        for i, (piece, lp) in enumerate(self.pieces):
            if not piece:
                raise VocabError(f"empty piece at id {i + NUM_SPECIALS}")
            if piece in index or piece in SPECIALS:
                raise VocabError(f"duplicate piece {piece!r}")
            if lp > 0:
                raise VocabError(f"positive log-probability for {piece!r}")
            index[piece] = i + NUM_SPECIALS
        object.__setattr__(self, "index", index)
        object.__setattr__(self, "max_len", max((len(p) for p, _ in self.pieces), default=0))
        object.__setattr__(self, "uses_word_mark", any(p.startswith(WORD_MARK) for p, _ in self.pieces))
        # an uncovered character always costs more than any real piece
        worst = min((lp for _, lp in self.pieces), default=0.0)
        object.__setattr__(self, "unk_score", worst - 10.0)

    def __len__(self):
        return NUM_SPECIALS + len(self.pieces)

    def id_to_piece(self, i: int) -> str:
        return SPECIALS[i] if i < NUM_SPECIALS else self.pieces[i - NUM_SPECIALS][0]

    def score(self, i: int) -> float:
        return self.unk_score if i < NUM_SPECIALS else self.pieces[i - NUM_SPECIALS][1]

    @classmethod
    def from_pieces(cls, pieces) -> "Vocab":
        if isinstance(pieces, dict):
            pieces = pieces.items()
        return cls(tuple((str(p), float(lp)) for p, lp in pieces))


def load_vocab(path: str | Path) -> Vocab:
    pieces: list[tuple[str, float]] = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                raise VocabError(f"line {lineno}: empty line")
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0]:
                raise VocabError(f"line {lineno}: expected 'piece<TAB>logprob'")
            piece, raw = parts
            try:
                lp = float(raw)
            except ValueError:
                raise VocabError(f"line {lineno}: bad log-probability {raw!r}") from None
            if lp > 0:
                raise VocabError(f"line {lineno}: positive log-probability {lp}")
            if piece in seen or piece in SPECIALS:
                first = seen.get(piece)
                where = f" (first on line {first})" if first else ""
                raise VocabError(f"line {lineno}: duplicate piece {piece!r}{where}")
            seen[piece] = lineno
            pieces.append((piece, lp))
    return Vocab(tuple(pieces))


def save_vocab(v: Vocab, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for piece, lp in v.pieces:
            fh.write(f"{piece}\t{lp!r}\n")


def _viterbi(word: str, v: Vocab) -> list[tuple[int, int, int]]:
    """Best segmentation of one word as (id, start, end) character spans."""
    n = len(word)
    best = [float("-inf")] * (n + 1)
    back: list[tuple[int, int] | None] = [None] * (n + 1)  # (start, id)
    best[0] = 0.0
    for end in range(1, n + 1):
        # longest candidates first so that equal scores keep the longer final piece
        for start in range(max(0, end - v.max_len), end):
            if best[start] == float("-inf"):
                continue
            pid = v.index.get(word[start:end])
            if pid is None:
                continue
            s = best[start] + v.score(pid)
            if s > best[end]:
                best[end], back[end] = s, (start, pid)
        s = best[end - 1] + v.unk_score
        if back[end] is None or s > best[end]:
            best[end], back[end] = s, (end - 1, UNK)
    out = []
    end = n
    while end > 0:
        start, pid = back[end]
        out.append((pid, start, end))
        end = start
    out.reverse()
    return out


def segment_with_offsets(text: str, v: Vocab) -> list[tuple[int, int, int]]:
    """(id, char_start, char_end) per piece; offsets index into ``text``.

    The word-boundary mark is prepended only when the vocabulary uses it; its
    character offset collapses onto the word start.
    """
    out = []
    pos = 0
    for word in text.split():
        start = text.index(word, pos)
        pos = start + len(word)
        if v.uses_word_mark:
            for pid, s, e in _viterbi(WORD_MARK + word, v):
                out.append((pid, start + max(s - 1, 0), start + e - 1))
        else:
            for pid, s, e in _viterbi(word, v):
                out.append((pid, start + s, start + e))
    return out


def segment(text: str, v: Vocab) -> list[int]:
    return [pid for pid, _, _ in segment_with_offsets(text, v)]


def segmentation_score(ids: list[int], v: Vocab) -> float:
    return sum(v.score(i) for i in ids)


@dataclass
class Encoding:
    ids: list[int]
    type_ids: list[int]
    special_mask: list[bool]

    def __len__(self):
        return len(self.ids)


def _truncate_pair(a: list, b: list | None, budget: int) -> None:
    while len(a) + (len(b) if b is not None else 0) > budget:
        if b is not None and len(b) > len(a):
            b.pop()
        else:
            a.pop()


def pack_ids(a: list[int], b: list[int] | None, max_len: int) -> Encoding:
    if max_len < 3:
        raise ValueError(f"max_len must be >= 3, got {max_len}")
    a = list(a)
    b = list(b) if b is not None else None
    if b is not None and max_len < 4:
        b = []
    n_special = 3 if b is not None else 2
    _truncate_pair(a, b, max_len - n_special)
    ids = [CLS] + a + [SEP]
    types = [0] * len(ids)
    if b is not None:
        ids += b + [SEP]
        types += [1] * (len(b) + 1)
    special = [False] * len(ids)
    special[0] = True
    special[len(a) + 1] = True
    if b is not None:
        special[-1] = True
    return Encoding(ids, types, special)


def encode_pair(a: str, b: str | None, v: Vocab, max_len: int) -> Encoding:
    """BERT-style packing; truncation trims the longer segment first."""
    return pack_ids(segment(a, v), segment(b, v) if b is not None else None, max_len)
