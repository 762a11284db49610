"""Span edits, MaxMatch-style edit scoring and F-beta.

Edits are untyped ``(start, end, replacement)`` spans over source tokens.
System edits are chosen by :func:`max_match`, which searches the ways of
grouping the operations of every minimum-cost alignment into span edits and
keeps the grouping that agrees best with the gold edits.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence


class EditSpan(NamedTuple):
    start: int
    end: int
    replacement: tuple[str, ...] = ()

    @property
    def is_insertion(self) -> bool:
        return self.start == self.end


@dataclass
class ScoreCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other: ScoreCounts) -> ScoreCounts:
        return ScoreCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


@dataclass(frozen=True)
class ScoreReport:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f: float


def _edit(start: int, end: int, replacement) -> EditSpan:
    return EditSpan(start, end, tuple(replacement))


def validate_edits(edits: Sequence[EditSpan], source_len: int) -> None:
    prev = None
    for e in edits:
        if not 0 <= e.start <= e.end <= source_len:
            raise ValueError(f"edit {e} out of bounds for source of length {source_len}")
        if prev is not None:
            if (prev.start, prev.end) > (e.start, e.end) or prev.end > e.start:
                raise ValueError(f"edits {prev} and {e} overlap or are unsorted")
            if prev.is_insertion and e.is_insertion and prev.start == e.start:
                raise ValueError(f"two insertions at position {e.start}")
        prev = e


def apply_edits(source: Sequence[str], edits: Sequence[EditSpan]) -> list[str]:
    validate_edits(edits, len(source))
    out, at = [], 0
    for e in edits:
        out.extend(source[at:e.start])
        out.extend(e.replacement)
        at = e.end
    out.extend(source[at:])
    return out


# ---------------------------------------------------------------------------
# alignment

def _distance_table(a: Sequence[str], b: Sequence[str]) -> list[list[int]]:
    n, m = len(a), len(b)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        d[i][0] = i
    for j in range(m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            diag = d[i - 1][j - 1] + (a[i - 1] != b[j - 1])
            d[i][j] = min(diag, d[i - 1][j] + 1, d[i][j - 1] + 1)
    return d


def align(source: Sequence[str], target: Sequence[str]) -> list[str]:
    """One minimum-cost alignment as ops ``M``/``S``/``D``/``I``.

    Backtracking prefers match, then substitution, deletion, insertion.
    """
    d = _distance_table(source, target)
    i, j = len(source), len(target)
    ops = []
    while i or j:
        if i and j and source[i - 1] == target[j - 1] and d[i][j] == d[i - 1][j - 1]:
            ops.append("M")
            i, j = i - 1, j - 1
        elif i and j and d[i][j] == d[i - 1][j - 1] + 1:
            ops.append("S")
            i, j = i - 1, j - 1
        elif i and d[i][j] == d[i - 1][j] + 1:
            ops.append("D")
            i -= 1
        else:
            ops.append("I")
            j -= 1
    return ops[::-1]


def extract_edits(source: Sequence[str], corrected: Sequence[str]) -> list[EditSpan]:
    """Minimal span edits: maximal runs of non-match alignment ops become one edit each."""
    edits = []
    i = j = 0
    run = None  # (start i, start j)
    for op in align(source, corrected) + ["M"]:
        if op == "M":
            if run is not None:
                edits.append(_edit(run[0], i, corrected[run[1]:j]))
                run = None
            i += 1
            j += 1
            continue
        if run is None:
            run = (i, j)
        if op in "SD":
            i += 1
        if op in "SI":
            j += 1
    return edits


# ---------------------------------------------------------------------------
# MaxMatch

def _optimal_moves(source, hyp):
    """Moves lying on some minimum-cost alignment path: cell -> [(next cell, is_match)]."""
    d = _distance_table(source, hyp)
    n, m = len(source), len(hyp)

    def moves_into(i, j):
        if i and j and d[i - 1][j - 1] + (source[i - 1] != hyp[j - 1]) == d[i][j]:
            yield (i - 1, j - 1), source[i - 1] == hyp[j - 1]
        if i and d[i - 1][j] + 1 == d[i][j]:
            yield (i - 1, j), False
        if j and d[i][j - 1] + 1 == d[i][j]:
            yield (i, j - 1), False

    succ: dict[tuple[int, int], list] = {(n, m): []}
    stack = [(n, m)]
    while stack:
        v = stack.pop()
        for u, match in moves_into(*v):
            if u not in succ:
                succ[u] = []
                stack.append(u)
            succ[u].append((v, match))
    return succ


def _segments_from(u, succ, max_unchanged):
    """Cells reachable from ``u`` through a path with at most ``max_unchanged`` matches."""
    fewest = {u: 0}
    frontier = [u]
    out = []
    while frontier:
        w = heapq.heappop(frontier)
        if w != u:
            out.append(w)
        for v, match in succ[w]:
            k = fewest[w] + match
            if max_unchanged is not None and k > max_unchanged:
                continue
            if v not in fewest:
                fewest[v] = k
                heapq.heappush(frontier, v)
            elif k < fewest[v]:
                fewest[v] = k
    return out


def max_match(
    source: Sequence[str],
    hypothesis: Sequence[str],
    gold_edits: Sequence[EditSpan],
    max_unchanged: int | None = 2,
) -> ScoreCounts:
    """TP/FP/FN under the system edit segmentation that best matches ``gold_edits``.

    Candidate system edits group consecutive operations of any minimum-cost
    alignment; a group may swallow up to ``max_unchanged`` matched tokens
    (``None``: no limit). Ties on true positives go to fewer system edits.
    """
    gold = [_edit(*e) for e in gold_edits]
    validate_edits(gold, len(source))
    gold_set = set(gold)
    succ = _optimal_moves(source, hypothesis)

    # best[cell][ends_with_insertion] = (tp, -edits)
    worst = (-1, 0)
    best = {c: [worst, worst] for c in succ}
    best[(0, 0)][0] = (0, 0)
    for u in sorted(succ):  # lexicographic order is topological
        if best[u] == [worst, worst]:
            continue
        targets = _segments_from(u, succ, max_unchanged)
        for flag in (0, 1):
            here = best[u][flag]
            if here == worst:
                continue
            for v in targets:
                repl = tuple(hypothesis[u[1]:v[1]])
                if tuple(source[u[0]:v[0]]) == repl:
                    cand, new_flag = here, 0
                else:
                    insertion = u[0] == v[0]
                    if insertion and flag:
                        continue
                    hit = EditSpan(u[0], v[0], repl) in gold_set
                    cand, new_flag = (here[0] + hit, here[1] - 1), int(insertion)
                if cand > best[v][new_flag]:
                    best[v][new_flag] = cand
    end = (len(source), len(hypothesis))
    tp, neg_edits = max(best[end])
    return ScoreCounts(tp, -neg_edits - tp, len(gold) - tp)


def f_beta(counts: ScoreCounts, beta: float = 0.5) -> tuple[float, float, float]:
    """Precision, recall and F-beta; an empty denominator counts as 1."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    p = counts.tp / (counts.tp + counts.fp) if counts.tp + counts.fp else 1.0
    r = counts.tp / (counts.tp + counts.fn) if counts.tp + counts.fn else 1.0
    if p == 0 and r == 0:
        return p, r, 0.0
    b2 = beta * beta
    return p, r, (1 + b2) * p * r / (b2 * p + r)


def score_corpus(sources, hypotheses, gold_edit_sets, beta: float = 0.5, max_unchanged: int | None = 2) -> ScoreReport:
    """Micro-averaged corpus score: counts are summed first, then P/R/F computed once."""
    if not len(sources) == len(hypotheses) == len(gold_edit_sets):
        raise ValueError(f"length mismatch: {len(sources)} sources, {len(hypotheses)} hypotheses, {len(gold_edit_sets)} gold sets")
    total = ScoreCounts()
    for src, hyp, gold in zip(sources, hypotheses, gold_edit_sets):
        total = total + max_match(src, hyp, gold, max_unchanged)
    p, r, f = f_beta(total, beta)
    return ScoreReport(total.tp, total.fp, total.fn, p, r, f)


# ---------------------------------------------------------------------------
# gold edit files: "index<TAB>start<TAB>end<TAB>tokens", "-" for an empty replacement

def write_gold(path: str | Path, edit_sets: Sequence[Sequence[EditSpan]]) -> None:
    lines = []
    for idx, edits in enumerate(edit_sets):
        for e in edits:
            repl = " ".join(e.replacement) if e.replacement else "-"
            lines.append(f"{idx}\t{e.start}\t{e.end}\t{repl}")
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_gold(path: str | Path, n_sentences: int) -> list[list[EditSpan]]:
    sets: list[list[EditSpan]] = [[] for _ in range(n_sentences)]
    text = Path(path).read_text(encoding="utf-8").replace("\r\n", "\n")
    for lineno, line in enumerate(text.split("\n"), start=1):
        if not line:
            continue
        fields = line.split("\t")
        try:
            idx, start, end = int(fields[0]), int(fields[1]), int(fields[2])
            repl = () if fields[3] == "-" else tuple(fields[3].split())
        except (IndexError, ValueError) as exc:
            raise ValueError(f"{path}:{lineno}: malformed gold edit line") from exc
        if not 0 <= idx < n_sentences:
            raise ValueError(f"{path}:{lineno}: sentence index {idx} out of range")
        sets[idx].append(EditSpan(start, end, repl))
    return sets
