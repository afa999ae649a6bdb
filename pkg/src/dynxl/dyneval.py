"""Dynamic evaluation: score a segment, then take one gradient step on it.

The loop is predict-then-adapt. Segment i is scored with the parameters left
by segments < i; only then is the gradient of its mean loss computed (once,
with backpropagation stopping at the memory) and applied. The memory handed
to segment i+1 holds the states computed while scoring segment i, under the
pre-update parameters.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .core_math import PROB_FLOOR, Graph
from .data import TokenStream, segment_iter
from .errors import AdaptationError, ConfigError, DataError, MissingStatsError
from .metrics import EvalReport, SegmentSummary
from .model import ModelParams, SegmentResult, empty_memory, forward_segment, with_segment

OPTIMIZERS = ("sgd", "rms_decay")
_LOSS_CEILING = -math.log(PROB_FLOOR)


@dataclass(frozen=True)
class DynevalConfig:
    optimizer_kind: str = "sgd"
    learning_rate: float = 1e-4
    decay_rate: float = 0.0
    epsilon: float = 1e-5
    grad_clip_norm: float | None = None
    segment_len: int | None = None

    def __post_init__(self):
        if self.optimizer_kind not in OPTIMIZERS:
            raise ConfigError("optimizer_kind", f"must be one of {OPTIMIZERS}")
        if not self.learning_rate >= 0.0:
            raise ConfigError("learning_rate", "must be >= 0")
        if not 0.0 <= self.decay_rate <= 1.0:
            raise ConfigError("decay_rate", "must lie in [0, 1]")
        if self.optimizer_kind == "rms_decay" and not self.epsilon >= 0.0:
            raise ConfigError("epsilon", "must be >= 0")
        if self.grad_clip_norm is not None and not self.grad_clip_norm > 0.0:
            raise ConfigError("grad_clip_norm", "must be > 0 when set")
        if self.segment_len is not None and self.segment_len < 1:
            raise ConfigError("segment_len", "must be >= 1")

    def fingerprint(self) -> str:
        if self.optimizer_kind == "sgd":
            key = f"sgd lr={self.learning_rate!r} clip={self.grad_clip_norm!r} n={self.segment_len!r}"
        else:
            key = (f"rms_decay lr={self.learning_rate!r} decay={self.decay_rate!r} "
                   f"eps={self.epsilon!r} clip={self.grad_clip_norm!r} n={self.segment_len!r}")
        return hashlib.sha256(key.encode()).hexdigest()[:16]

    def describe(self) -> str:
        if self.optimizer_kind == "sgd":
            return f"sgd(lr={self.learning_rate:g})"
        return f"rms_decay(lr={self.learning_rate:g}, decay={self.decay_rate:g}, eps={self.epsilon:g})"


@dataclass
class GradStats:
    rms: dict[str, np.ndarray]
    segments: int

    def __post_init__(self):
        if self.segments < 1:
            raise DataError("gradient statistics need at least one segment")

    @property
    def mean_rms(self) -> float:
        total = sum(float(v.sum()) for v in self.rms.values())
        return total / sum(v.size for v in self.rms.values())


def _frozen_copy(params: ModelParams) -> ModelParams:
    out = params.copy()
    for arr in out.tensors.values():
        arr.setflags(write=False)
    return out


@dataclass
class AdaptState:
    params: ModelParams
    trained: ModelParams
    stats: GradStats | None = None
    segment_index: int = 0
    updates: int = 0

    @classmethod
    def fresh(cls, trained: ModelParams, stats: GradStats | None = None) -> "AdaptState":
        frozen = _frozen_copy(trained)
        return cls(frozen.copy(), frozen, stats)

    def reset(self) -> None:
        self.params = self.trained.copy()
        self.segment_index = 0
        self.updates = 0


def _check_grads(state: AdaptState, grads: Mapping[str, np.ndarray]) -> None:
    for name, arr in state.params.items():
        g = grads[name]
        if g.shape != arr.shape:
            raise AdaptationError(f"gradient for {name} has shape {g.shape}, expected {arr.shape}", name)
        if not np.all(np.isfinite(g)):
            raise AdaptationError(f"non-finite gradient for parameter {name}", name, state.segment_index)


def clip_by_global_norm(grads: Mapping[str, np.ndarray], max_norm: float | None) -> dict[str, np.ndarray]:
    if max_norm is None:
        return dict(grads)
    norm = math.sqrt(math.fsum(float(np.sum(g * g)) for g in grads.values()))
    if norm <= max_norm:
        return dict(grads)
    factor = max_norm / norm
    return {k: g * factor for k, g in grads.items()}


def sgd_update(state: AdaptState, grads: Mapping[str, np.ndarray], lr: float) -> AdaptState:
    """theta <- theta - lr * g."""
    _check_grads(state, grads)
    for name, arr in state.params.items():
        arr -= lr * grads[name]
    state.updates += 1
    return state


def rms_decay_update(state: AdaptState, grads: Mapping[str, np.ndarray], stats: GradStats,
                     lr: float, decay: float, eps: float) -> AdaptState:
    """theta <- theta - lr * g / (rms + eps) + decay * (theta_trained - theta).

    Both terms use the pre-update theta.
    """
    if stats is None:
        raise MissingStatsError("rms_decay needs gradient statistics from the training data")
    _check_grads(state, grads)
    for name, arr in state.params.items():
        rms = stats.rms[name]
        if rms.shape != arr.shape:
            raise AdaptationError(f"statistics for {name} have shape {rms.shape}", name)
        arr[...] = arr - lr * grads[name] / (rms + eps) + decay * (state.trained[name] - arr)
    state.updates += 1
    return state


def apply_update(state: AdaptState, grads: Mapping[str, np.ndarray], config: DynevalConfig) -> AdaptState:
    grads = clip_by_global_norm(grads, config.grad_clip_norm)
    if config.optimizer_kind == "sgd":
        return sgd_update(state, grads, config.learning_rate)
    return rms_decay_update(state, grads, state.stats, config.learning_rate,
                            config.decay_rate, config.epsilon)


Forward = Callable[..., SegmentResult]


def _run(params_source, stream: TokenStream, segment_len: int, adapt: Callable | None,
         forward: Forward, label: str, fingerprint: str) -> EvalReport:
    if len(stream) == 0:
        raise DataError("cannot evaluate an empty stream")
    cfg = params_source().config
    if cfg.segment_len != segment_len:
        # Same weights, different segment geometry.
        cfg = with_segment(cfg, segment_len)
        inner = params_source
        params_source = lambda: ModelParams(cfg, inner().tensors)  # noqa: E731
    memory = empty_memory(cfg, 1)
    losses = np.empty(len(stream))
    segments: list[SegmentSummary] = []
    floored = 0
    start = 0
    for i, seg in enumerate(segment_iter(stream, segment_len)):
        graph = Graph(record=adapt is not None)
        res = forward(params_source(), seg, memory, graph=graph)
        seg_losses = -res.token_log_probs[0]
        if not np.all(np.isfinite(seg_losses)) or not math.isfinite(float(res.loss.data)):
            raise AdaptationError(f"non-finite loss in segment {i}", segment=i)
        hit = seg_losses > _LOSS_CEILING
        if hit.any():
            floored += int(hit.sum())
            seg_losses = np.minimum(seg_losses, _LOSS_CEILING)
        losses[start : start + len(seg)] = seg_losses
        segments.append(SegmentSummary(start, len(seg), math.fsum(seg_losses.tolist())))
        if adapt is not None:
            adapt(graph.backward(res.loss), i)
        memory = res.memory
        start += len(seg)
    return EvalReport(losses, segments, label, fingerprint, stream.vocab.fingerprint(),
                      stream.unknown_count, floored)


def static_eval(params: ModelParams, stream: TokenStream, segment_len: int | None = None,
                forward: Forward = forward_segment, label: str = "static") -> EvalReport:
    """Segment-by-segment evaluation with frozen parameters."""
    n = segment_len or params.config.segment_len
    return _run(lambda: params, stream, n, None, forward, label, static_fingerprint(n))


def static_fingerprint(segment_len: int) -> str:
    return hashlib.sha256(f"static n={segment_len}".encode()).hexdigest()[:16]


def dynamic_eval(state: AdaptState, stream: TokenStream, config: DynevalConfig,
                 forward: Forward = forward_segment, label: str | None = None) -> EvalReport:
    """Predict-then-adapt over the stream; the adapted state persists across segments."""
    if config.optimizer_kind == "rms_decay" and state.stats is None:
        raise MissingStatsError("rms_decay dynamic evaluation needs gradient statistics")
    n = config.segment_len or state.params.config.segment_len
    before = state.updates

    def adapt(grads, i):
        state.segment_index = i
        apply_update(state, grads, config)

    report = _run(lambda: state.params, stream, n, adapt, forward,
                  label or config.describe(), config.fingerprint())
    report.updates = state.updates - before
    return report


def collect_grad_stats(params: ModelParams, stream: TokenStream, segment_len: int | None = None,
                       max_segments: int | None = None, forward: Forward = forward_segment) -> GradStats:
    """Root-mean-square over training segments of each parameter's mean-loss gradient."""
    n = segment_len or params.config.segment_len
    if max_segments is not None and max_segments < 1:
        raise ConfigError("max_segments", "must be >= 1")
    full = len(stream) // n
    if full < 1:
        raise DataError(f"training stream of {len(stream)} tokens is shorter than one segment ({n})")
    count = full if max_segments is None else min(full, max_segments)
    if params.config.segment_len != n:
        params = ModelParams(with_segment(params.config, n), params.tensors)
    sq = {k: np.zeros_like(v) for k, v in params.items()}
    memory = empty_memory(params.config, 1)
    for i in range(count):
        graph = Graph()
        res = forward(params, stream.ids[i * n : (i + 1) * n], memory, graph=graph)
        for k, g in graph.backward(res.loss).items():
            sq[k] += g * g
        memory = res.memory
    return GradStats({k: np.sqrt(v / count) for k, v in sq.items()}, count)
