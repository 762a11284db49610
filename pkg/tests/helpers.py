"""Shared oracles for the test suite: finite differences, exhaustive edit scoring, tiny configs."""

from __future__ import annotations

import itertools
from pathlib import Path

import numpy as np

from metagec import autodiff as ad
from metagec.evaluation import EditSpan, ScoreCounts, _distance_table

FD_STEP = 1e-5
FD_TOLERANCE = 1e-4


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """``||a - n|| / max(||a||, ||n||)``; the floor only matters for all-zero gradients."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), floor))


def numeric_gradient(f, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x``, one coordinate at a time."""
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f(x)
        x[idx] = old - h
        down = f(x)
        x[idx] = old
        grad[idx] = (up - down) / (2 * h)
    return grad


def check_op(build, inputs: list[np.ndarray], rng: np.random.Generator) -> float:
    """Worst relative error over the inputs of ``build(*tensors) -> Tensor``.

    The op output is contracted with a fixed random tensor so every output
    element contributes to the scalar being differentiated.
    """
    leaves = [ad.Tensor(x) for x in inputs]
    out = build(*leaves)
    weights = ad.Tensor(rng.normal(size=out.shape))
    loss = ad.sum_all(ad.mul(out, weights))
    grads = ad.backward(loss, {str(i): t for i, t in enumerate(leaves)})

    worst = 0.0
    for i, x in enumerate(inputs):
        def f(xi, i=i):
            vals = [ad.Tensor(v) if j != i else ad.Tensor(xi) for j, v in enumerate(inputs)]
            return float(np.sum(build(*vals).data * weights.data))

        worst = max(worst, relative_error(grads[str(i)], numeric_gradient(f, x.copy())))
    return worst


def directional_check(loss_fn, params: dict, name: str, rng: np.random.Generator, h: float = FD_STEP) -> float:
    """Relative error of the directional derivative of ``loss_fn`` along a random direction in tensor ``name``."""
    loss, grads = loss_fn(params)
    v = rng.normal(size=params[name].shape)
    analytic = float(np.sum(grads[name] * v))

    def at(sign):
        moved = dict(params)
        moved[name] = params[name] + sign * h * v
        return loss_fn(moved)[0]

    numeric = (at(+1) - at(-1)) / (2 * h)
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


# ---------------------------------------------------------------------------
# exhaustive MaxMatch oracle

def _all_optimal_alignments(src, hyp):
    """Every minimum-cost alignment as a list of (i, j) cells from (0, 0) to the end."""
    d = _distance_table(src, hyp)
    n, m = len(src), len(hyp)
    paths = []
    # forward walk only follows cells that lie on some optimal path
    back = _distance_table(src[::-1], hyp[::-1])
    total = d[n][m]

    def on_path(i, j):
        return d[i][j] + back[n - i][m - j] == total

    def walk_opt(i, j, acc):
        if (i, j) == (n, m):
            paths.append(acc)
            return
        for di, dj in ((1, 1), (1, 0), (0, 1)):
            a, b = i + di, j + dj
            if a > n or b > m or not on_path(a, b):
                continue
            step = (src[i] != hyp[j]) if (di, dj) == (1, 1) else 1
            if d[a][b] == d[i][j] + step:
                walk_opt(a, b, acc + [(a, b)])

    walk_opt(0, 0, [(0, 0)])
    return paths


def exhaustive_max_match(src, hyp, gold, max_unchanged=2) -> ScoreCounts:
    """Enumerate every optimal alignment and every way of cutting it into edits."""
    gold = [EditSpan(s, e, tuple(r)) for s, e, r in gold]
    gold_set = set(gold)
    best = None
    for path in _all_optimal_alignments(src, hyp):
        inner = len(path) - 2
        for cuts in itertools.product((False, True), repeat=max(inner, 0)):
            bounds = [path[0]] + [c for c, cut in zip(path[1:-1], cuts) if cut] + [path[-1]]
            if len(path) == 1:  # both sentences empty
                bounds = [path[0]]
            edits, ok = [], True
            prev_insert_at = None
            for u, v in zip(bounds, bounds[1:]):
                seg = path[path.index(u): path.index(v) + 1]
                matches = sum(
                    1 for a, b in zip(seg, seg[1:])
                    if b[0] - a[0] == 1 and b[1] - a[1] == 1 and src[a[0]] == hyp[a[1]]
                )
                repl = tuple(hyp[u[1]:v[1]])
                if tuple(src[u[0]:v[0]]) == repl:
                    prev_insert_at = None
                    continue
                if max_unchanged is not None and matches > max_unchanged:
                    ok = False
                    break
                insertion = u[0] == v[0]
                if insertion and prev_insert_at == u[0]:
                    ok = False
                    break
                prev_insert_at = u[0] if insertion else None
                edits.append(EditSpan(u[0], v[0], repl))
            if not ok:
                continue
            tp = sum(e in gold_set for e in edits)
            key = (tp, -len(edits))
            if best is None or key > best:
                best = key
    tp, neg = best
    return ScoreCounts(tp, -neg - tp, len(gold) - tp)


# ---------------------------------------------------------------------------
# a tiny end-to-end configuration (seconds, not minutes)

TINY_INI = """
[data]
general_size = 400
source_pool = 40
valid_pool = 60
test_pool = 45
bpe_merges = 60

[split]
source_count = 30
valid_counts = 20, 20, 20
test_train_count = 20

[model]
d_model = 16
n_heads = 2
d_ff = 32

[pretrain]
epochs = 1
batch = 32

[meta]
meta_steps = 4
eval_every = 2
support_size = 4
query_size = 4
finetune_epochs = 1
finetune_batch = 10

[experiment]
beam_size = 2
seeds = 0
"""


def write_tiny_config(directory: Path, extra: str = "") -> Path:
    path = Path(directory) / "tiny.ini"
    path.write_text(TINY_INI + extra, encoding="utf-8")
    return path
