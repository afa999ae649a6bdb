"""Toy-scale Transformer-XL style language model on the tape autodiff.

Layout of one forward pass over a segment of ``n`` observed tokens:

* the input at position t is the token observed *before* position t (the last
  token of the previous segment, or the reserved start-of-stream row of the
  embedding table), so the distribution at position t never sees token t;
* every layer attends over ``mem_len`` cached states plus the segment. Keys
  are always ``mem_len + segment_len`` long. Unfilled memory slots and
  positions in the future are masked to exactly zero weight, and short
  segments are padded to ``segment_len``. Array shapes therefore never depend
  on where a stream is cut, so results for any given position are
  bit-reproducible;
* attention scores use the relative decomposition
  ``q.k + q.r[i-j] + u.k + v.r[i-j]`` scaled by ``1/sqrt(d_head)``, with
  sinusoidal distance embeddings projected per layer.

Memory for layer l holds the *input* states of layer l (the embedding output
for layer 0, the output of block l-1 above that). They are plain arrays, so no
gradient flows into them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from functools import lru_cache
from typing import Iterator, Mapping

import numpy as np

from . import core_math as cm
from .core_math import Graph, Tensor
from .errors import ConfigError, DataError, ModelStateError


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_head: int = 16
    d_ff: int = 256
    segment_len: int = 64
    mem_len: int = 64
    dropout_rate: float = 0.0
    output_layer_kind: str = "full"
    adaptive_cutoffs: tuple[int, ...] = ()
    adaptive_tail_shrink_factor: int = 4
    adaptive_order: tuple[int, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "adaptive_cutoffs", tuple(int(c) for c in self.adaptive_cutoffs))
        if self.adaptive_order is not None:
            object.__setattr__(self, "adaptive_order", tuple(int(c) for c in self.adaptive_order))
        self.validate()

    def validate(self):
        for name in ("vocab_size", "d_model", "n_heads", "d_head", "d_ff", "segment_len"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        if self.n_layers < 0:
            raise ConfigError("n_layers", "must be >= 0")
        if self.mem_len < 0:
            raise ConfigError("mem_len", "must be >= 0")
        if self.d_model != self.n_heads * self.d_head:
            raise ConfigError(
                "d_model", f"{self.d_model} != n_heads x d_head = {self.n_heads} x {self.d_head}"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate", "must lie in [0, 1)")
        if self.output_layer_kind not in ("full", "adaptive"):
            raise ConfigError("output_layer_kind", "must be 'full' or 'adaptive'")
        cuts = self.adaptive_cutoffs
        if any(b <= a for a, b in zip(cuts, cuts[1:])):
            raise ConfigError("adaptive_cutoffs", "must be strictly increasing")
        if cuts and (cuts[0] < 1 or cuts[-1] > self.vocab_size):
            raise ConfigError("adaptive_cutoffs", f"must lie in [1, {self.vocab_size}]")
        if self.output_layer_kind == "adaptive":
            if not cuts:
                raise ConfigError("adaptive_cutoffs", "adaptive output needs at least one cutoff")
            if len(self.clusters) - 1 > 2:
                raise ConfigError("adaptive_cutoffs", "at most two tail clusters are supported")
            if self.adaptive_tail_shrink_factor < 1 or self.d_model % self.adaptive_tail_shrink_factor:
                raise ConfigError("adaptive_tail_shrink_factor", "must divide d_model")
        if self.adaptive_order is not None and sorted(self.adaptive_order) != list(range(self.vocab_size)):
            raise ConfigError("adaptive_order", "must be a permutation of the vocabulary ids")

    @property
    def bos(self) -> int:
        return self.vocab_size

    @property
    def clusters(self) -> list[tuple[int, int]]:
        """[start, stop) rank ranges: the head, then each non-empty tail."""
        bounds = [c for c in self.adaptive_cutoffs if c < self.vocab_size] if self.adaptive_cutoffs else []
        edges = [0, *bounds, self.vocab_size]
        return list(zip(edges[:-1], edges[1:]))

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class ModelParams:
    """Named parameter arrays in a fixed order, plus the architecture they belong to."""

    config: ModelConfig
    tensors: dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self) -> list[str]:
        return list(self.tensors)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def n_elements(self) -> int:
        return sum(v.size for v in self.tensors.values())


@dataclass
class SegmentMemory:
    """Cached layer inputs, right-aligned in fixed ``mem_len`` slots.

    ``length`` counts how many trailing slots hold real states. ``last_token``
    is the most recent observed token per stream, used as the next input.
    A zero-length memory carries neither, so every segment starts fresh.
    """

    states: list[np.ndarray]
    length: int
    last_token: np.ndarray

    @property
    def batch(self) -> int:
        return int(self.last_token.shape[0])


def empty_memory(config: ModelConfig, batch: int = 1) -> SegmentMemory:
    return SegmentMemory(
        [np.zeros((batch, config.mem_len, config.d_model)) for _ in range(config.n_layers)],
        0,
        np.full(batch, config.bos, dtype=np.int64),
    )


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, h, dh, ff = config.d_model, config.n_heads, config.d_head, config.d_ff
    shapes: dict[str, tuple[int, ...]] = {"embed": (config.vocab_size + 1, d)}
    for l in range(config.n_layers):
        p = f"layers.{l}."
        shapes.update({
            p + "ln1.gain": (d,), p + "ln1.bias": (d,),
            p + "attn.q": (d, h * dh), p + "attn.k": (d, h * dh), p + "attn.v": (d, h * dh),
            p + "attn.r": (d, h * dh),
            p + "attn.u_bias": (h, dh), p + "attn.v_bias": (h, dh),
            p + "attn.o": (h * dh, d),
            p + "ln2.gain": (d,), p + "ln2.bias": (d,),
            p + "ff.w1": (d, ff), p + "ff.b1": (ff,), p + "ff.w2": (ff, d), p + "ff.b2": (d,),
        })
    shapes["ln_f.gain"] = (d,)
    shapes["ln_f.bias"] = (d,)
    if config.output_layer_kind == "full":
        shapes["out.w"] = (d, config.vocab_size)
        shapes["out.b"] = (config.vocab_size,)
    else:
        clusters = config.clusters
        n_tail = len(clusters) - 1
        head = clusters[0][1] - clusters[0][0] + n_tail
        shapes["out.head.w"] = (d, head)
        shapes["out.head.b"] = (head,)
        dt = d // config.adaptive_tail_shrink_factor
        for k, (a, b) in enumerate(clusters[1:]):
            shapes[f"out.tail{k}.proj"] = (d, dt)
            shapes[f"out.tail{k}.w"] = (dt, b - a)
            shapes[f"out.tail{k}.b"] = (b - a,)
    return shapes


def _is_bias(name: str) -> bool:
    return name.endswith((".bias", "_bias", ".b1", ".b2", ".b"))


def init_model(config: ModelConfig, seed: int = 0) -> ModelParams:
    """N(0, 0.02) weights, zero biases (including u and v), unit layer-norm gains."""
    config.validate()
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".gain"):
            tensors[name] = np.ones(shape)
        elif _is_bias(name):
            tensors[name] = np.zeros(shape)
        else:
            tensors[name] = rng.normal(0.0, 0.02, size=shape)
    return ModelParams(config, tensors)


@lru_cache(maxsize=64)
def position_table(mem_len: int, seg_len: int, d_model: int) -> np.ndarray:
    """Sinusoids for signed distances -(seg_len-1) .. mem_len+seg_len-1, in that order.

    Query i and key j (keys indexed over memory then segment) are
    ``mem_len + i - j`` apart, found at row ``mem_len + i - j + seg_len - 1``.
    """
    dist = np.arange(-(seg_len - 1), mem_len + seg_len, dtype=np.float64)
    inv_freq = 1.0 / (10000.0 ** (np.arange(0, d_model, 2, dtype=np.float64) / d_model))
    ang = dist[:, None] * inv_freq[None, :]
    table = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)[:, :d_model]
    table.setflags(write=False)
    return table


def attention_mask(mem_len: int, seg_len: int, mem_valid: int) -> np.ndarray:
    """True where query i must not see key j: unfilled memory or the future."""
    i = np.arange(seg_len)[:, None]
    j = np.arange(mem_len + seg_len)[None, :]
    return (j < mem_len - mem_valid) | (j > mem_len + i)


def rel_attention(q: Tensor, k: Tensor, v: Tensor, r: Tensor, u_bias: Tensor, v_bias: Tensor,
                  mask: np.ndarray) -> Tensor:
    """Relative-position multi-head attention.

    q: (B, H, n, dh); k, v: (B, H, K, dh) with the n queries aligned to the
    last n keys; r: (H, K + n - 1, dh) projected embeddings of the distances
    laid out as in :func:`position_table`. Returns (B, H, n, dh).
    """
    B, H, n, dh = q.shape
    K = k.shape[2]
    if v.shape != k.shape or mask.shape != (n, K) or r.shape[1] != K + n - 1:
        raise ModelStateError(f"attention shapes disagree: k{k.shape} v{v.shape} mask{mask.shape}")
    if np.all(mask, axis=-1).any():
        raise ModelStateError("attention mask leaves a query with no visible key")
    content = cm.matmul(cm.add_bcast(q, u_bias, axes=(0, 2)), cm.transpose(k, (0, 1, 3, 2)))
    qv = cm.add_bcast(q, v_bias, axes=(0, 2))
    qv = cm.reshape(cm.transpose(qv, (1, 0, 2, 3)), (H, B * n, dh))
    pos = cm.matmul(qv, cm.transpose(r, (0, 2, 1)))
    pos = cm.transpose(cm.reshape(pos, (H, B, n, r.shape[1])), (1, 0, 2, 3))
    pos = cm.rel_shift(pos, K)
    scores = cm.scale(cm.add(content, pos), 1.0 / math.sqrt(dh))
    weights = cm.softmax_t(cm.mask_fill(scores, mask))
    return cm.matmul(weights, v)


def _dropout(x: Tensor, rate: float, rng) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return cm.mul(x, x.graph.const(keep))


def _heads(x: Tensor, H: int, dh: int) -> Tensor:
    B, T, _ = x.shape
    return cm.transpose(cm.reshape(x, (B, T, H, dh)), (0, 2, 1, 3))


def output_log_probs(config: ModelConfig, p: Mapping[str, Tensor], h: Tensor) -> Tensor:
    """Full-vocabulary log-probabilities, shape (..., vocab_size), in token-id order."""
    if config.output_layer_kind == "full":
        return cm.log_softmax(cm.add_row(cm.linear(h, p["out.w"]), p["out.b"]))
    return adaptive_log_probs(config, p, h)


def adaptive_log_probs(config: ModelConfig, p: Mapping[str, Tensor], h: Tensor) -> Tensor:
    """Head cluster plus one gate logit per tail; tail prob = gate prob x within-tail prob."""
    clusters = config.clusters
    head_size = clusters[0][1]
    head = cm.log_softmax(cm.add_row(cm.linear(h, p["out.head.w"]), p["out.head.b"]))
    last = h.data.ndim - 1
    parts = [cm.slice_axis(head, last, 0, head_size)] if len(clusters) > 1 else [head]
    for k in range(len(clusters) - 1):
        gate = cm.reshape(cm.slice_axis(head, last, head_size + k, head_size + k + 1), head.shape[:-1])
        proj = cm.linear(h, p[f"out.tail{k}.proj"])
        tail = cm.log_softmax(cm.add_row(cm.linear(proj, p[f"out.tail{k}.w"]), p[f"out.tail{k}.b"]))
        parts.append(cm.add_bcast(tail, gate, axes=(last,)))
    by_rank = cm.concat(parts, axis=last) if len(parts) > 1 else parts[0]
    if config.adaptive_order is None:
        return by_rank
    rank_of = np.empty(config.vocab_size, dtype=np.int64)
    rank_of[np.asarray(config.adaptive_order)] = np.arange(config.vocab_size)
    return cm.take_cols(by_rank, rank_of)


def adaptive_softmax_logprob(hidden, target: int, params: ModelParams) -> float:
    """Log-probability of ``target`` under the adaptive output layer for one hidden vector."""
    cfg = params.config
    if not 0 <= target < cfg.vocab_size:
        raise DataError(f"target {target} outside [0, {cfg.vocab_size})")
    g = Graph(record=False)
    p = {k: g.param(k, v) for k, v in params.items() if k.startswith("out.")}
    lp = adaptive_log_probs(cfg, p, g.const(np.asarray(hidden, dtype=np.float64)[None, :]))
    return float(lp.data[0, target])


@dataclass
class SegmentResult:
    log_probs: Tensor          # (B, segment_len, V), padded positions included
    token_log_probs: np.ndarray  # (B, n_real) log-prob of each observed token
    loss: Tensor               # mean negative log-prob over real tokens
    memory: SegmentMemory
    graph: Graph
    n_real: int = 0

    @property
    def distributions(self) -> np.ndarray:
        return self.log_probs.data[:, : self.n_real]


def forward_segment(params: ModelParams, tokens, memory: SegmentMemory | None = None, *,
                    graph: Graph | None = None, training: bool = False, rng=None) -> SegmentResult:
    """Score a segment of observed tokens given the memory of what came before.

    ``tokens`` has shape (n,) or (B, n) with n <= segment_len. The result's
    ``log_probs[:, t]`` is the next-token distribution for position t, which
    depends only on the memory and on tokens before t.
    """
    cfg = params.config
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    B, n_real = tokens.shape
    n, M = cfg.segment_len, cfg.mem_len
    if not 1 <= n_real <= n:
        raise DataError(f"segment length {n_real} outside [1, {n}]")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise DataError(f"token id outside [0, {cfg.vocab_size})")
    if memory is None:
        memory = empty_memory(cfg, B)
    if (len(memory.states) != cfg.n_layers or memory.batch != B
            or any(s.shape != (B, M, cfg.d_model) for s in memory.states)
            or not 0 <= memory.length <= M):
        raise ModelStateError("memory does not match this model or batch")

    inputs = np.full((B, n), cfg.bos, dtype=np.int64)
    inputs[:, 0] = memory.last_token if M > 0 else cfg.bos
    inputs[:, 1:n_real] = tokens[:, : n_real - 1]
    targets = np.zeros((B, n), dtype=np.int64)
    targets[:, :n_real] = tokens

    g = graph if graph is not None else Graph()
    p = {name: g.param(name, arr) for name, arr in params.items()}
    drop = cfg.dropout_rate if training else 0.0
    H, dh = cfg.n_heads, cfg.d_head

    x = cm.embedding(p["embed"], inputs)
    x = _dropout(x, drop, rng)
    layer_inputs = []
    if cfg.n_layers:
        mask = attention_mask(M, n, memory.length)
        pos_emb = g.const(position_table(M, n, cfg.d_model))
    for l in range(cfg.n_layers):
        pre = f"layers.{l}."
        layer_inputs.append(x.data)
        cat = cm.concat([g.const(memory.states[l]), x], axis=1) if M > 0 else x
        hk = cm.layer_norm(cat, p[pre + "ln1.gain"], p[pre + "ln1.bias"])
        hq = cm.slice_axis(hk, 1, M, M + n) if M > 0 else hk
        q = _heads(cm.linear(hq, p[pre + "attn.q"]), H, dh)
        k = _heads(cm.linear(hk, p[pre + "attn.k"]), H, dh)
        v = _heads(cm.linear(hk, p[pre + "attn.v"]), H, dh)
        r = cm.linear(pos_emb, p[pre + "attn.r"])
        r = cm.transpose(cm.reshape(r, (r.shape[0], H, dh)), (1, 0, 2))
        att = rel_attention(q, k, v, r, p[pre + "attn.u_bias"], p[pre + "attn.v_bias"], mask)
        att = cm.reshape(cm.transpose(att, (0, 2, 1, 3)), (B, n, H * dh))
        x = cm.add(x, _dropout(cm.linear(att, p[pre + "attn.o"]), drop, rng))
        hf = cm.layer_norm(x, p[pre + "ln2.gain"], p[pre + "ln2.bias"])
        hf = cm.gelu(cm.add_row(cm.linear(hf, p[pre + "ff.w1"]), p[pre + "ff.b1"]))
        hf = cm.add_row(cm.linear(hf, p[pre + "ff.w2"]), p[pre + "ff.b2"])
        x = cm.add(x, _dropout(hf, drop, rng))

    h = cm.layer_norm(x, p["ln_f.gain"], p["ln_f.bias"])
    logp = output_log_probs(cfg, p, h)
    picked = cm.pick(logp, targets)
    weights = np.zeros((B, n))
    weights[:, :n_real] = 1.0
    loss = cm.scale(cm.sum_all(cm.mul(picked, g.const(weights))), -1.0 / (B * n_real))

    new_memory = _advance(memory, layer_inputs, tokens, n_real, M)
    return SegmentResult(logp, picked.data[:, :n_real].copy(), loss, new_memory, g, n_real)


def _advance(memory: SegmentMemory, layer_inputs, tokens, n_real: int, M: int) -> SegmentMemory:
    if M == 0:
        return SegmentMemory([s for s in memory.states], 0, memory.last_token.copy())
    states = [np.concatenate([old, new[:, :n_real]], axis=1)[:, -M:].copy()
              for old, new in zip(memory.states, layer_inputs)]
    return SegmentMemory(states, min(M, memory.length + n_real), tokens[:, n_real - 1].copy())


def with_segment(config: ModelConfig, segment_len: int, mem_len: int | None = None) -> ModelConfig:
    """Same architecture and weights layout with a different segment/memory geometry."""
    return replace(config, segment_len=segment_len,
                   mem_len=config.mem_len if mem_len is None else mem_len)
