"""A small pre-norm encoder-decoder transformer over subword ids.

Parameters live in a plain ``dict[str, np.ndarray]`` (:data:`ModelParams`) so
that adapted copies can be produced with ordinary array arithmetic. Token
embeddings are shared by encoder and decoder and tied to the output
projection; positions use a fixed sinusoidal table.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import BOS, EOS, PAD

ModelParams = dict[str, np.ndarray]

NEG_INF = -1e9


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 2
    enc_layers: int = 1
    dec_layers: int = 1
    d_ff: int = 128
    max_len: int = 64

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if min(self.vocab_size, self.d_model, self.n_heads, self.d_ff, self.max_len) <= 0:
            raise ValueError("model dimensions must be positive")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        d, f = self.d_model, self.d_ff
        shapes: dict[str, tuple[int, ...]] = {"embed": (self.vocab_size, d)}

        def block(prefix: str, attns: Sequence[str]):
            for i, attn in enumerate(attns, start=1):
                shapes[f"{prefix}.ln{i}.g"] = (d,)
                shapes[f"{prefix}.ln{i}.b"] = (d,)
                for w in ("wq", "wk", "wv", "wo"):
                    shapes[f"{prefix}.{attn}.{w}"] = (d, d)
            n = len(attns) + 1
            shapes[f"{prefix}.ln{n}.g"] = (d,)
            shapes[f"{prefix}.ln{n}.b"] = (d,)
            shapes[f"{prefix}.ff.w1"] = (d, f)
            shapes[f"{prefix}.ff.b1"] = (f,)
            shapes[f"{prefix}.ff.w2"] = (f, d)
            shapes[f"{prefix}.ff.b2"] = (d,)

        for layer in range(self.enc_layers):
            block(f"enc.{layer}", ["self"])
        shapes["enc.ln.g"] = (d,)
        shapes["enc.ln.b"] = (d,)
        for layer in range(self.dec_layers):
            block(f"dec.{layer}", ["self", "cross"])
        shapes["dec.ln.g"] = (d,)
        shapes["dec.ln.b"] = (d,)
        return shapes


def init_params(cfg: ModelConfig, rng: np.random.Generator, scale: float = 0.08) -> ModelParams:
    """Weights uniform in (-scale, scale); layer-norm gains 1 and all biases 0."""
    params = {}
    for name, shape in cfg.param_shapes().items():
        if name.endswith(".g"):
            params[name] = np.ones(shape)
        elif name.endswith(".b") or ".ff.b" in name:
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.uniform(-scale, scale, size=shape)
    return params


def zeros_like_params(cfg: ModelConfig) -> ModelParams:
    return {name: np.zeros(shape) for name, shape in cfg.param_shapes().items()}


def positional_table(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    rate = np.exp(-math.log(10000.0) * (np.arange(0, d, 2) / d))
    table = np.zeros((length, d))
    table[:, 0::2] = np.sin(pos * rate)
    table[:, 1::2] = np.cos(pos * rate[: d // 2])
    return table


# ---------------------------------------------------------------------------
# building blocks

def _attention(p, prefix: str, xq: Tensor, xkv: Tensor, mask: np.ndarray, n_heads: int) -> Tensor:
    b, tq, d = xq.shape
    tk = xkv.shape[1]
    dh = d // n_heads
    q = ad.transpose(ad.reshape(xq @ p[f"{prefix}.wq"], (b, tq, n_heads, dh)), (0, 2, 1, 3))
    k = ad.transpose(ad.reshape(xkv @ p[f"{prefix}.wk"], (b, tk, n_heads, dh)), (0, 2, 3, 1))
    v = ad.transpose(ad.reshape(xkv @ p[f"{prefix}.wv"], (b, tk, n_heads, dh)), (0, 2, 1, 3))
    scores = ad.scale(q @ k, 1.0 / math.sqrt(dh)) + Tensor(mask)
    ctx = ad.softmax_rows(scores) @ v
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, tq, d))
    return ctx @ p[f"{prefix}.wo"]


def _feed_forward(p, prefix: str, x: Tensor) -> Tensor:
    h = ad.gelu(x @ p[f"{prefix}.w1"] + p[f"{prefix}.b1"])
    return h @ p[f"{prefix}.w2"] + p[f"{prefix}.b2"]


def _ln(p, prefix: str, x: Tensor) -> Tensor:
    return ad.layer_norm(x, p[f"{prefix}.g"], p[f"{prefix}.b"])


def _embed(p, cfg: ModelConfig, ids: np.ndarray) -> Tensor:
    t = ids.shape[1]
    pos = Tensor(positional_table(t, cfg.d_model))
    return ad.scale(ad.embedding(p["embed"], ids), math.sqrt(cfg.d_model)) + pos


def encode(p, cfg: ModelConfig, src: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Encoder states (B, Ts, d) and the additive key mask for source padding (B, 1, 1, Ts)."""
    key_mask = np.where(src == PAD, NEG_INF, 0.0)[:, None, None, :]
    x = _embed(p, cfg, src)
    for layer in range(cfg.enc_layers):
        pre = f"enc.{layer}"
        h = _ln(p, f"{pre}.ln1", x)
        x = x + _attention(p, f"{pre}.self", h, h, key_mask, cfg.n_heads)
        x = x + _feed_forward(p, f"{pre}.ff", _ln(p, f"{pre}.ln2", x))
    return _ln(p, "enc.ln", x), key_mask


def decode_states(p, cfg: ModelConfig, enc: Tensor, src_mask: np.ndarray, tgt_in: np.ndarray) -> Tensor:
    """Final decoder states (B, Tt, d) under a causal + padding mask."""
    t = tgt_in.shape[1]
    causal = np.triu(np.full((t, t), NEG_INF), k=1)[None, None]
    self_mask = causal + np.where(tgt_in == PAD, NEG_INF, 0.0)[:, None, None, :]
    y = _embed(p, cfg, tgt_in)
    for layer in range(cfg.dec_layers):
        pre = f"dec.{layer}"
        h = _ln(p, f"{pre}.ln1", y)
        y = y + _attention(p, f"{pre}.self", h, h, self_mask, cfg.n_heads)
        y = y + _attention(p, f"{pre}.cross", _ln(p, f"{pre}.ln2", y), enc, src_mask, cfg.n_heads)
        y = y + _feed_forward(p, f"{pre}.ff", _ln(p, f"{pre}.ln3", y))
    return _ln(p, "dec.ln", y)


def output_logits(p, states: Tensor) -> Tensor:
    return states @ ad.transpose(p["embed"], (1, 0))


# ---------------------------------------------------------------------------
# batching and loss

def pad_batch(seqs: Sequence[Sequence[int]]) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def as_leaves(params: ModelParams) -> dict[str, Tensor]:
    return {k: Tensor(v) for k, v in params.items()}


def forward_loss(params, cfg: ModelConfig, batch: Sequence[tuple[Sequence[int], Sequence[int]]]) -> Tensor:
    """Mean token cross-entropy of teacher-forced targets.

    ``batch`` holds (source ids, target ids) without BOS/EOS; ``params`` may be
    arrays or leaf tensors (pass tensors to differentiate).
    """
    if not batch:
        raise ValueError("forward_loss needs a non-empty batch")
    for i, (src, tgt) in enumerate(batch):
        if len(src) + 1 > cfg.max_len or len(tgt) + 1 > cfg.max_len:
            raise ValueError(f"pair {i} exceeds max_len={cfg.max_len} (source {len(src)}, target {len(tgt)})")
    p = params if isinstance(next(iter(params.values())), Tensor) else as_leaves(params)
    src = pad_batch([list(s) + [EOS] for s, _ in batch])
    tgt_in = pad_batch([[BOS] + list(t) for _, t in batch])
    tgt_out = pad_batch([list(t) + [EOS] for _, t in batch])
    enc, src_mask = encode(p, cfg, src)
    logits = output_logits(p, decode_states(p, cfg, enc, src_mask, tgt_in))
    b, t, v = logits.shape
    flat = tgt_out.reshape(-1)
    return ad.cross_entropy(ad.reshape(logits, (b * t, v)), flat, flat == PAD)


def loss_and_grads(params: ModelParams, cfg: ModelConfig, batch) -> tuple[float, ModelParams]:
    leaves = as_leaves(params)
    loss = forward_loss(leaves, cfg, batch)
    return float(loss.data), ad.backward(loss, leaves)


def target_logprobs(params: ModelParams, cfg: ModelConfig, src: Sequence[int], tgt_in: Sequence[int]) -> np.ndarray:
    """Per-position log-distributions (Tt, V) for one teacher-forced prefix."""
    with ad.no_grad():
        p = as_leaves(params)
        enc, mask = encode(p, cfg, pad_batch([list(src) + [EOS]]))
        states = decode_states(p, cfg, enc, mask, np.asarray([tgt_in], dtype=np.int64))
        return ad.log_softmax_rows(output_logits(p, states)).data[0]


# ---------------------------------------------------------------------------
# decoding

class _DecoderCache:
    """Self-attention keys/values of the decoded prefix plus cross-attention keys/values, per row."""

    def __init__(self, p, cfg: ModelConfig, enc: np.ndarray, src_mask: np.ndarray):
        self.cfg = cfg
        self.src_mask = src_mask
        self.cross = []
        for layer in range(cfg.dec_layers):
            pre = f"dec.{layer}.cross"
            self.cross.append((_split_heads(enc @ p[pre + ".wk"].data, cfg), _split_heads(enc @ p[pre + ".wv"].data, cfg)))
        self.self_kv: list[tuple[np.ndarray, np.ndarray]] = []
        self.length = 0

    def select(self, rows: np.ndarray) -> None:
        self.src_mask = self.src_mask[rows]
        self.cross = [(k[rows], v[rows]) for k, v in self.cross]
        self.self_kv = [(k[rows], v[rows]) for k, v in self.self_kv]


def _split_heads(x: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    r, t, d = x.shape
    return x.reshape(r, t, cfg.n_heads, d // cfg.n_heads).transpose(0, 2, 1, 3)


def _cached_attention(q_in: np.ndarray, w_q: np.ndarray, w_o: np.ndarray, k: np.ndarray, v: np.ndarray, mask, cfg) -> np.ndarray:
    q = _split_heads(q_in @ w_q, cfg)
    scores = (q @ k.transpose(0, 1, 3, 2)) / math.sqrt(cfg.d_model // cfg.n_heads)
    if mask is not None:
        scores = scores + mask
    ctx = ad.softmax_rows(Tensor(scores)).data @ v
    r = ctx.shape[0]
    return ctx.transpose(0, 2, 1, 3).reshape(r, 1, cfg.d_model) @ w_o


def _decoder_step(p, cache: _DecoderCache, tokens: np.ndarray) -> np.ndarray:
    """Feed one token per row at the next position; return next-token log-probs (R, V)."""
    cfg = cache.cfg
    pos = cache.length
    x = p["embed"].data[tokens][:, None, :] * math.sqrt(cfg.d_model) + positional_table(pos + 1, cfg.d_model)[pos]
    new_kv = []

    def ln(name, h):
        return ad.layer_norm(Tensor(h), p[name + ".g"], p[name + ".b"]).data

    for layer in range(cfg.dec_layers):
        pre = f"dec.{layer}"
        h = ln(f"{pre}.ln1", x)
        k_new = _split_heads(h @ p[f"{pre}.self.wk"].data, cfg)
        v_new = _split_heads(h @ p[f"{pre}.self.wv"].data, cfg)
        if cache.self_kv:
            k_old, v_old = cache.self_kv[layer]
            k_new = np.concatenate([k_old, k_new], axis=2)
            v_new = np.concatenate([v_old, v_new], axis=2)
        new_kv.append((k_new, v_new))
        x = x + _cached_attention(h, p[f"{pre}.self.wq"].data, p[f"{pre}.self.wo"].data, k_new, v_new, None, cfg)
        h = ln(f"{pre}.ln2", x)
        ck, cv = cache.cross[layer]
        x = x + _cached_attention(h, p[f"{pre}.cross.wq"].data, p[f"{pre}.cross.wo"].data, ck, cv, cache.src_mask, cfg)
        x = x + _feed_forward(p, f"{pre}.ff", Tensor(ln(f"{pre}.ln3", x))).data
    cache.self_kv = new_kv
    cache.length += 1
    states = ln("dec.ln", x[:, 0, :])
    return ad.log_softmax_rows(output_logits(p, Tensor(states))).data


def _start(params: ModelParams, cfg: ModelConfig, sources: Sequence[Sequence[int]]):
    for i, s in enumerate(sources):
        if len(s) + 1 > cfg.max_len:
            raise ValueError(f"source {i} exceeds max_len={cfg.max_len}")
    p = as_leaves(params)
    enc, mask = encode(p, cfg, pad_batch([list(s) + [EOS] for s in sources]))
    return p, _DecoderCache(p, cfg, enc.data, mask)


def greedy_decode(params: ModelParams, cfg: ModelConfig, source: Sequence[int], max_len: int) -> list[int]:
    """Append the argmax token (lowest id on ties) until EOS or ``max_len`` tokens."""
    with ad.no_grad():
        p, cache = _start(params, cfg, [source])
        out: list[int] = []
        last = BOS
        while len(out) < max_len:
            lp = _decoder_step(p, cache, np.asarray([last]))[0]
            last = int(np.argmax(lp))
            if last == EOS:
                break
            out.append(last)
        return out


def beam_decode(params: ModelParams, cfg: ModelConfig, source: Sequence[int], beam_size: int = 12, max_len: int = 64) -> list[int]:
    return beam_search(params, cfg, [source], beam_size, max_len)[0]


def beam_search(
    params: ModelParams,
    cfg: ModelConfig,
    sources: Sequence[Sequence[int]],
    beam_size: int = 12,
    max_len: int | Sequence[int] = 64,
) -> list[list[int]]:
    """Length-normalised beam search for many sources at once.

    A hypothesis scores ``sum(log p) / length``, where length counts the EOS
    token when present. Each step ranks the expansions of the live beams by
    cumulative log-probability (ties: lower beam slot, then lower token id);
    EOS expansions ranked ahead of the ``beam_size``-th live survivor become
    finished hypotheses. A source stops once it has ``beam_size`` finished
    hypotheses or reaches its ``max_len``; live hypotheses are then finished as is.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    n = len(sources)
    if n == 0:
        return []
    limits = [max_len] * n if isinstance(max_len, int) else list(max_len)
    k = beam_size
    with ad.no_grad():
        p, cache = _start(params, cfg, sources)

        live = [[([], 0.0)] for _ in range(n)]  # (tokens, cumulative logprob)
        finished: list[list[tuple[float, list[int]]]] = [[] for _ in range(n)]
        active = [i for i in range(n) if limits[i] > 0]
        for i in range(n):
            if limits[i] <= 0:
                finished[i].append((0.0, []))
        # cache rows follow the live hypotheses of the active sources, in order
        cache.select(np.asarray(active, dtype=np.int64))
        last = np.full(len(active), BOS, dtype=np.int64)

        step = 0
        while active:
            lp = _decoder_step(p, cache, last)
            vocab = lp.shape[1]
            step += 1

            row = 0
            still, keep_rows, keep_last = [], [], []
            for i in active:
                beams = live[i]
                first = row
                cum = np.asarray([s for _, s in beams])[:, None] + lp[row: row + len(beams)]
                row += len(beams)
                flat = cum.reshape(-1)
                order = np.argsort(-flat, kind="stable")
                new_live = []
                for idx in order:
                    b, tok = divmod(int(idx), vocab)
                    score = float(flat[idx])
                    toks = beams[b][0]
                    if tok == EOS:
                        if len(finished[i]) < k:
                            finished[i].append((score / (len(toks) + 1), toks))
                    else:
                        new_live.append((toks + [tok], score, first + b))
                        if len(new_live) == k:
                            break
                if len(finished[i]) >= k:
                    continue
                if step >= limits[i]:
                    for toks, score, _ in new_live:
                        finished[i].append((score / len(toks), toks))
                    continue
                live[i] = [(toks, score) for toks, score, _ in new_live]
                keep_rows += [r for _, _, r in new_live]
                keep_last += [toks[-1] for toks, _, _ in new_live]
                still.append(i)
            active = still
            if active:
                cache.select(np.asarray(keep_rows, dtype=np.int64))
                last = np.asarray(keep_last, dtype=np.int64)

    results = []
    for cands in finished:
        best = max(range(len(cands)), key=lambda j: (cands[j][0], -j))
        results.append(cands[best][1])
    return results


def sequence_score(params: ModelParams, cfg: ModelConfig, source: Sequence[int], output: Sequence[int], max_len: int) -> float:
    """Length-normalised model score of a complete output, as ranked by :func:`beam_search`."""
    ended = len(output) < max_len
    tgt = list(output) + ([EOS] if ended else [])
    lp = target_logprobs(params, cfg, source, [BOS] + list(output))
    total = float(sum(lp[t, tok] for t, tok in enumerate(tgt)))
    return total / max(len(tgt), 1)
