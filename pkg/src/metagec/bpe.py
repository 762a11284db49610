"""Byte pair encoding: learn merges from a word-tokenised corpus and apply them.

Non-final subwords carry a ``@@`` continuation marker, as in subword-nmt, so
``undo_bpe(apply_bpe(word, table)) == word`` for every word.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

MARKER = "@@"
FORMAT_HEADER = "#metagec-bpe version 1"


@dataclass
class MergeTable:
    merges: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        self._cache: dict[str, list[str]] = {}

    def __len__(self) -> int:
        return len(self.merges)

    def save(self, path: str | Path) -> None:
        lines = [FORMAT_HEADER] + [f"{a} {b}" for a, b in self.merges]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> MergeTable:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or lines[0] != FORMAT_HEADER:
            raise ValueError(f"{path}: missing BPE header {FORMAT_HEADER!r}")
        merges = []
        for lineno, line in enumerate(lines[1:], start=2):
            parts = line.split(" ")
            if len(parts) != 2 or not all(parts):
                raise ValueError(f"{path}:{lineno}: expected 'left right'")
            merges.append((parts[0], parts[1]))
        return cls(merges)


def _merge_word(symbols: tuple[str, ...], pair: tuple[str, str]) -> tuple[str, ...]:
    a, b = pair
    out = []
    i = 0
    while i < len(symbols):
        if i + 1 < len(symbols) and symbols[i] == a and symbols[i + 1] == b:
            out.append(a + b)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return tuple(out)


def learn_bpe(corpus: Iterable[Sequence[str]], num_merges: int) -> MergeTable:
    """Greedy most-frequent-pair merging; ties go to the lexicographically smallest pair."""
    word_freq = Counter(tok for sent in corpus for tok in sent)
    if not word_freq:
        raise ValueError("cannot learn BPE from an empty corpus")
    vocab = {tuple(word): freq for word, freq in word_freq.items()}
    merges: list[tuple[str, str]] = []
    for _ in range(num_merges):
        pairs: Counter = Counter()
        for symbols, freq in vocab.items():
            for pair in zip(symbols, symbols[1:]):
                pairs[pair] += freq
        if not pairs:
            break
        best = min(pairs.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        merges.append(best)
        vocab = {_merge_word(symbols, best): freq for symbols, freq in vocab.items()}
    return MergeTable(merges)


def apply_bpe(token: str, table: MergeTable) -> list[str]:
    """Segment one word by replaying the merges in learned order."""
    if not token:
        raise ValueError("apply_bpe needs a non-empty token")
    cached = table._cache.get(token)
    if cached is not None:
        return list(cached)
    symbols = tuple(token)
    for pair in table.merges:
        if len(symbols) == 1:
            break
        symbols = _merge_word(symbols, pair)
    pieces = [s + MARKER for s in symbols[:-1]] + [symbols[-1]]
    table._cache[token] = pieces
    return list(pieces)


def undo_bpe(pieces: Sequence[str]) -> str:
    """Inverse of :func:`apply_bpe` for a single word."""
    last = len(pieces) - 1
    return "".join(p[: -len(MARKER)] if i < last else p for i, p in enumerate(pieces))


def join_subwords(pieces: Sequence[str]) -> list[str]:
    """Regroup a subword stream into words. A dangling trailing marker is dropped."""
    words, current = [], []
    for piece in pieces:
        if piece.endswith(MARKER):
            current.append(piece)
        else:
            current.append(piece)
            words.append(undo_bpe(current))
            current = []
    if current:
        words.append(undo_bpe(current[:-1] + [current[-1][: -len(MARKER)]]))
    return words
