"""First-order MAML over domain tasks, plus the plain training loops it is compared with.

Everything here is model-agnostic: a model enters only through a
``grad_fn(params, batch) -> (loss, grads)`` callable, where ``params`` and
``grads`` are dicts of same-shaped arrays.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .autodiff import AdamState, adam_step

log = logging.getLogger(__name__)

Params = dict[str, np.ndarray]
GradFn = Callable[[Mapping[str, np.ndarray], Sequence], tuple[float, Params]]


class NonFiniteLoss(ArithmeticError):
    pass


@dataclass
class MetaHyperparams:
    """Step sizes and batch shapes; the step-size defaults are the published ones."""

    alpha: float = 1e-7
    beta: float = 1e-5
    tasks_per_meta_batch: int = 3
    support_size: int = 8
    query_size: int = 8
    meta_steps: int = 1000
    finetune_lr: float = 5e-4
    finetune_epochs: int = 10
    finetune_batch: int = 16
    inner_steps: int = 1
    inner: str = "sgd"  # or "adam": a fresh Adam state per adaptation, lr = alpha
    outer: str = "adam"  # or "sgd"
    eval_every: int = 100

    def __post_init__(self):
        if self.alpha < 0 or self.beta <= 0 or self.finetune_lr <= 0:
            raise ValueError("step sizes must be positive (alpha may be 0)")
        if min(self.tasks_per_meta_batch, self.support_size, self.query_size, self.finetune_batch, self.inner_steps, self.eval_every) < 1:
            raise ValueError("batch sizes, inner_steps and eval_every must be >= 1")
        if self.meta_steps < 0 or self.finetune_epochs < 0:
            raise ValueError("meta_steps and finetune_epochs must be >= 0")
        if self.outer not in ("adam", "sgd") or self.inner not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer (inner={self.inner!r}, outer={self.outer!r})")


@dataclass
class EpisodeBatch:
    support: list
    query: list
    domain: str


@dataclass
class StepRecord:
    step: int
    domains: list[str]
    support_loss: float
    query_loss: float
    skipped: int = 0


def sample_episode(task, support_size: int, query_size: int, rng: np.random.Generator) -> EpisodeBatch:
    """Two independent draws without replacement (within a batch) from one task."""
    n = len(task.pairs)
    if n == 0 or max(support_size, query_size) > n:
        raise ValueError(f"domain {task.domain!r} has {n} pairs, episode needs {max(support_size, query_size)}")
    support = [task.pairs[i] for i in rng.choice(n, size=support_size, replace=False)]
    query = [task.pairs[i] for i in rng.choice(n, size=query_size, replace=False)]
    return EpisodeBatch(support, query, task.domain)


def _finite(loss: float, grads: Mapping[str, np.ndarray]) -> bool:
    return math.isfinite(loss) and all(np.isfinite(g).all() for g in grads.values())


def sum_grads(grads: Sequence[Mapping[str, np.ndarray]]) -> Params:
    """Sum gradient dicts left to right (the summation order is part of the contract)."""
    total = {k: g.copy() for k, g in grads[0].items()}
    for g in grads[1:]:
        for k in total:
            total[k] = total[k] + g[k]
    return total


def _adapt(params, support, alpha: float, grad_fn: GradFn, steps: int, optimizer: str = "sgd") -> tuple[Params, float]:
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    adapted, first_loss = dict(params), math.nan
    state = AdamState.for_params(params) if optimizer == "adam" else None
    for i in range(steps):
        loss, grads = grad_fn(adapted, support)
        if not _finite(loss, grads):
            raise NonFiniteLoss(f"non-finite support loss {loss}")
        if i == 0:
            first_loss = loss
        if state is None:
            adapted = {k: p - alpha * grads[k] for k, p in adapted.items()}
        else:
            adapted = adam_step(adapted, grads, state, alpha)
    return adapted, first_loss


def inner_adapt(
    params: Mapping[str, np.ndarray], support, alpha: float, grad_fn: GradFn, steps: int = 1, optimizer: str = "sgd",
) -> Params:
    """theta' = theta - alpha * grad L_support(theta), repeated ``steps`` times. Returns new arrays.

    ``optimizer="adam"`` replaces the plain step by Adam steps from a fresh state.
    """
    return _adapt(params, support, alpha, grad_fn, steps, optimizer)[0]


def _outer_update(params, grad, hyper: MetaHyperparams, adam_state: AdamState | None) -> Params:
    if hyper.outer == "sgd":
        return {k: p - hyper.beta * grad[k] for k, p in params.items()}
    return adam_step(params, grad, adam_state, hyper.beta)


def meta_gradient(params, episodes: Sequence[EpisodeBatch], hyper: MetaHyperparams, grad_fn: GradFn):
    """First-order meta-gradient: query gradients taken at the adapted parameters, summed in episode order."""
    grads, s_losses, q_losses = [], [], []
    for ep in episodes:
        try:
            adapted, s_loss = _adapt(params, ep.support, hyper.alpha, grad_fn, hyper.inner_steps, hyper.inner)
            q_loss, q_grads = grad_fn(adapted, ep.query)
        except NonFiniteLoss as exc:
            log.warning("skipping episode on %s: %s", ep.domain, exc)
            continue
        if not _finite(q_loss, q_grads):
            log.warning("skipping episode on %s: non-finite query loss %s", ep.domain, q_loss)
            continue
        grads.append(q_grads)
        s_losses.append(s_loss)
        q_losses.append(q_loss)
    if not grads:
        raise NonFiniteLoss("every episode in the meta-batch was skipped")
    return sum_grads(grads), s_losses, q_losses


def meta_step(params, episodes: Sequence[EpisodeBatch], hyper: MetaHyperparams, adam_state: AdamState | None, grad_fn: GradFn):
    """One outer update. Returns ``(new params, record)``; ``adam_state`` advances in place."""
    if not episodes:
        raise ValueError("meta_step needs at least one episode")
    grad, s_losses, q_losses = meta_gradient(params, episodes, hyper, grad_fn)
    record = StepRecord(0, [e.domain for e in episodes], float(np.mean(s_losses)), float(np.mean(q_losses)), len(episodes) - len(q_losses))
    return _outer_update(params, grad, hyper, adam_state), record


def pooled_step(params, batches: Sequence, adam_state: AdamState, lr: float, grad_fn: GradFn):
    """Plain multi-task Adam step on the summed per-batch gradients. Returns ``(new params, mean loss)``."""
    results = [grad_fn(params, b) for b in batches]
    for loss, grads in results:
        if not _finite(loss, grads):
            raise NonFiniteLoss(f"non-finite loss {loss}")
    grad = sum_grads([g for _, g in results])
    return adam_step(params, grad, adam_state, lr), float(np.mean([l for l, _ in results]))


def _sample_tasks(tasks, count: int, rng: np.random.Generator):
    picks = rng.choice(len(tasks), size=min(count, len(tasks)), replace=False)
    return [tasks[i] for i in picks]


class _BestTracker:
    def __init__(self, validate):
        self.validate = validate
        self.best_score = -math.inf
        self.best_params = None
        self.history: list[tuple[int, float]] = []

    def check(self, step: int, params) -> float | None:
        if self.validate is None:
            return None
        score = float(self.validate(params))
        self.history.append((step, score))
        if score > self.best_score:
            self.best_score, self.best_params = score, params
        return score

    def result(self, params):
        return params if self.best_params is None else self.best_params


def meta_train(
    params,
    source_tasks: Sequence,
    hyper: MetaHyperparams,
    rng: np.random.Generator,
    grad_fn: GradFn,
    validate: Callable[[Params], float] | None = None,
    on_record: Callable[[StepRecord, float | None], None] | None = None,
    consumed: set | None = None,
):
    """Meta-train from ``params`` for ``hyper.meta_steps`` outer updates.

    With ``validate``, the parameters are scored at step 0 and every
    ``eval_every`` steps, and the best-scoring ones are returned (earliest wins ties).
    """
    if not source_tasks:
        raise ValueError("meta_train needs at least one source task")
    state = AdamState.for_params(params)
    tracker = _BestTracker(validate)
    tracker.check(0, params)
    for step in range(1, hyper.meta_steps + 1):
        tasks = _sample_tasks(source_tasks, hyper.tasks_per_meta_batch, rng)
        episodes = [sample_episode(t, hyper.support_size, hyper.query_size, rng) for t in tasks]
        if consumed is not None:
            consumed.update(p.pair_id for e in episodes for p in (*e.support, *e.query))
        params, record = meta_step(params, episodes, hyper, state, grad_fn)
        record.step = step
        score = tracker.check(step, params) if step % hyper.eval_every == 0 or step == hyper.meta_steps else None
        if on_record:
            on_record(record, score)
    return tracker.result(params)


def multitask_train(
    params,
    source_tasks: Sequence,
    hyper: MetaHyperparams,
    rng: np.random.Generator,
    grad_fn: GradFn,
    lr: float,
    validate: Callable[[Params], float] | None = None,
    on_record: Callable[[StepRecord, float | None], None] | None = None,
    consumed: set | None = None,
):
    """Pooled multi-task training drawing exactly the episodes :func:`meta_train` would draw.

    Each episode contributes its support and query pairs as one batch.
    """
    if not source_tasks:
        raise ValueError("multitask_train needs at least one source task")
    state = AdamState.for_params(params)
    tracker = _BestTracker(validate)
    tracker.check(0, params)
    for step in range(1, hyper.meta_steps + 1):
        tasks = _sample_tasks(source_tasks, hyper.tasks_per_meta_batch, rng)
        episodes = [sample_episode(t, hyper.support_size, hyper.query_size, rng) for t in tasks]
        if consumed is not None:
            consumed.update(p.pair_id for e in episodes for p in (*e.support, *e.query))
        params, loss = pooled_step(params, [e.support + e.query for e in episodes], state, lr, grad_fn)
        score = tracker.check(step, params) if step % hyper.eval_every == 0 or step == hyper.meta_steps else None
        if on_record:
            on_record(StepRecord(step, [e.domain for e in episodes], loss, loss), score)
    return tracker.result(params)


def fine_tune(params, target_train, hyper: MetaHyperparams, rng: np.random.Generator, grad_fn: GradFn) -> Params:
    """Adam on all parameters over the target's training pairs for ``finetune_epochs`` shuffled epochs."""
    pairs = list(target_train.pairs if hasattr(target_train, "pairs") else target_train)
    if not pairs:
        raise ValueError("fine_tune needs a non-empty training set")
    state = AdamState.for_params(params)
    for _ in range(hyper.finetune_epochs):
        order = rng.permutation(len(pairs))
        for at in range(0, len(pairs), hyper.finetune_batch):
            batch = [pairs[i] for i in order[at:at + hyper.finetune_batch]]
            params, _ = pooled_step(params, [batch], state, hyper.finetune_lr, grad_fn)
    return params


def train_epochs(params, pairs: Iterable, epochs: int, batch_size: int, lr: float, rng: np.random.Generator, grad_fn: GradFn, on_epoch=None) -> Params:
    """Shuffled mini-batch Adam training (used for base-model pretraining)."""
    pairs = list(pairs)
    state = AdamState.for_params(params)
    for epoch in range(epochs):
        order = rng.permutation(len(pairs))
        losses = []
        for at in range(0, len(pairs), batch_size):
            params, loss = pooled_step(params, [[pairs[i] for i in order[at:at + batch_size]]], state, lr, grad_fn)
            losses.append(loss)
        if on_epoch:
            on_epoch(epoch, float(np.mean(losses)))
    return params
