"""Sentence pairs, domain datasets, corpus files, vocabulary and split construction."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .bpe import MergeTable, apply_bpe, join_subwords

UNK, PAD, BOS, EOS = 0, 1, 2, 3
SPECIALS = ("<unk>", "<pad>", "<s>", "</s>")


@dataclass(frozen=True)
class SentencePair:
    source: tuple[str, ...]
    target: tuple[str, ...]
    domain: str
    pair_id: str = ""

    def __post_init__(self):
        if not self.source or not self.target:
            raise ValueError(f"empty side in sentence pair {self.pair_id or self}")


@dataclass
class DomainDataset:
    domain: str
    pairs: list[SentencePair] = field(default_factory=list)

    def __post_init__(self):
        for p in self.pairs:
            if p.domain != self.domain:
                raise ValueError(f"pair {p.pair_id} has domain {p.domain!r}, dataset is {self.domain!r}")

    def __len__(self) -> int:
        return len(self.pairs)

    def subset(self, indices: Iterable[int]) -> DomainDataset:
        return DomainDataset(self.domain, [self.pairs[i] for i in indices])


def domain_rng(seed: int, domain: str) -> np.random.Generator:
    """RNG keyed by (seed, domain) so one domain's draws never shift another's."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(domain.encode())]))


# ---------------------------------------------------------------------------
# parallel corpus files

def load_parallel(path: str | Path, domain: str | None = None) -> DomainDataset:
    """Read a TAB-separated parallel file; an optional ``#domain:<id>`` first line names the domain."""
    path = Path(path)
    raw = path.read_bytes().decode("utf-8")
    lines = raw.replace("\r\n", "\n").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ValueError(f"{path}: empty corpus file")
    start = 0
    if lines[0].startswith("#domain:"):
        domain = lines[0][len("#domain:"):].strip()
        start = 1
    domain = domain or path.stem
    pairs = []
    for lineno in range(start, len(lines)):
        fields = lines[lineno].split("\t")
        if len(fields) != 2 or not fields[0].split() or not fields[1].split():
            raise ValueError(f"{path}:{lineno + 1}: expected 'source<TAB>target'")
        pairs.append(SentencePair(tuple(fields[0].split()), tuple(fields[1].split()), domain, f"{domain}:{len(pairs)}"))
    if not pairs:
        raise ValueError(f"{path}: no sentence pairs")
    return DomainDataset(domain, pairs)


def write_parallel(dataset: DomainDataset, path: str | Path) -> None:
    lines = [f"#domain:{dataset.domain}"]
    lines += [" ".join(p.source) + "\t" + " ".join(p.target) for p in dataset.pairs]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# vocabulary

class Vocabulary:
    """Subword symbol <-> id map on top of a BPE merge table."""

    def __init__(self, symbols: Sequence[str], table: MergeTable):
        self.symbols = list(SPECIALS) + [s for s in symbols if s not in SPECIALS]
        self.index = {s: i for i, s in enumerate(self.symbols)}
        self.table = table

    @classmethod
    def build(cls, sentences: Iterable[Sequence[str]], table: MergeTable) -> Vocabulary:
        seen = {piece for sent in sentences for word in sent for piece in apply_bpe(word, table)}
        return cls(sorted(seen), table)

    def __len__(self) -> int:
        return len(self.symbols)

    def encode(self, words: Sequence[str]) -> list[int]:
        return [self.index.get(piece, UNK) for w in words for piece in apply_bpe(w, self.table)]

    def decode(self, ids: Sequence[int]) -> list[str]:
        pieces = [self.symbols[i] for i in ids if i not in (PAD, BOS, EOS)]
        return join_subwords(pieces)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.symbols) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path, table: MergeTable) -> Vocabulary:
        symbols = Path(path).read_text(encoding="utf-8").split("\n")[:-1]
        if tuple(symbols[:4]) != SPECIALS:
            raise ValueError(f"{path}: vocabulary must start with {SPECIALS}")
        return cls(symbols[4:], table)


# ---------------------------------------------------------------------------
# splits

@dataclass(frozen=True)
class SplitSpec:
    source_domains: tuple[str, ...]
    valid_domain: str
    test_domains: tuple[str, ...]
    source_count: int = 1000
    valid_counts: tuple[int, int, int] = (200, 800, 400)
    test_train_count: int = 200
    dev_test_ratio: tuple[int, int] = (2, 1)

    def __post_init__(self):
        counts = (self.source_count, *self.valid_counts, self.test_train_count, *self.dev_test_ratio)
        if any(int(c) != c or c <= 0 for c in counts):
            raise ValueError(f"split counts must be positive integers: {counts}")


@dataclass
class TargetSplit:
    domain: str
    train: DomainDataset
    dev: DomainDataset
    test: DomainDataset


def _sample(dataset: DomainDataset, sizes: Sequence[int], seed: int) -> list[DomainDataset]:
    need = sum(sizes)
    if need > len(dataset):
        raise ValueError(f"domain {dataset.domain!r} has {len(dataset)} pairs, needs {need} (short by {need - len(dataset)})")
    order = domain_rng(seed, dataset.domain).permutation(len(dataset))
    out, at = [], 0
    for n in sizes:
        out.append(dataset.subset(sorted(order[at:at + n].tolist())))
        at += n
    return out


def make_splits(datasets: Sequence[DomainDataset], spec: SplitSpec, rng_seed: int):
    """Return ``(source_tasks, valid_task, test_tasks)`` sampled without replacement.

    Test domains keep ``test_train_count`` pairs for training and split the
    rest into dev/test by ``dev_test_ratio``; the dev share is rounded down.
    """
    by_name = {d.domain: d for d in datasets}
    missing = [d for d in (*spec.source_domains, spec.valid_domain, *spec.test_domains) if d not in by_name]
    if missing:
        raise ValueError(f"no dataset for domains {missing}")

    sources = [_sample(by_name[d], [spec.source_count], rng_seed)[0] for d in spec.source_domains]
    valid = TargetSplit(spec.valid_domain, *_sample(by_name[spec.valid_domain], spec.valid_counts, rng_seed))

    tests = []
    r_dev, r_test = spec.dev_test_ratio
    for d in spec.test_domains:
        data = by_name[d]
        rest = len(data) - spec.test_train_count
        if rest < r_dev + r_test:
            short = r_dev + r_test - rest
            raise ValueError(f"domain {d!r} has {len(data)} pairs, needs {spec.test_train_count + r_dev + r_test} (short by {short})")
        n_dev = rest * r_dev // (r_dev + r_test)
        tests.append(TargetSplit(d, *_sample(data, [spec.test_train_count, n_dev, rest - n_dev], rng_seed)))
    return sources, valid, tests
