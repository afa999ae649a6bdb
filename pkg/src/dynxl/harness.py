"""Training of desk-scale base models, validation tuning, and comparison tables."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .core_math import Graph
from .data import TokenStream
from .dyneval import AdaptState, DynevalConfig, GradStats, clip_by_global_norm, dynamic_eval, static_eval
from .errors import ComparisonError, ConfigError, DataError, TrainingDivergedError
from .metrics import EvalReport
from .model import ModelConfig, ModelParams, empty_memory, forward_segment, init_model

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch_size: int = 8
    learning_rate: float = 1e-3
    warmup_steps: int = 100
    min_lr_ratio: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = 1.0
    seed: int = 0
    eval_interval: int = 100
    eval_tokens: int | None = 4096

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("steps", "must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate", "must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps", "must be >= 0")
        if self.eval_interval < 1:
            raise ConfigError("eval_interval", "must be >= 1")

    def lr_at(self, step: int) -> float:
        """Linear warmup, then cosine decay to ``min_lr_ratio`` of the peak."""
        if step < self.warmup_steps:
            return self.learning_rate * (step + 1) / self.warmup_steps
        span = max(1, self.steps - self.warmup_steps)
        progress = min(1.0, (step - self.warmup_steps) / span)
        floor = self.min_lr_ratio
        return self.learning_rate * (floor + (1 - floor) * 0.5 * (1 + math.cos(math.pi * progress)))


@dataclass
class CurvePoint:
    step: int
    train_loss: float
    lr: float
    valid_bpc: float | None = None


class Adam:
    def __init__(self, params: ModelParams, cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: ModelParams, grads: Mapping[str, np.ndarray], lr: float) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1 - c.beta1**self.t
        bc2 = 1 - c.beta2**self.t
        for k, p in params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)


def _shards(stream: TokenStream, batch: int, seg: int) -> np.ndarray:
    per = len(stream) // batch
    if per < seg:
        raise DataError(f"training stream of {len(stream)} tokens is too short for {batch} shards of one segment")
    return np.asarray(stream.ids[: per * batch]).reshape(batch, per)


def _valid_bpc(params: ModelParams, valid: TokenStream, cap: int | None) -> float:
    v = valid if cap is None or len(valid) <= cap else valid.slice(0, cap)
    return static_eval(params, v).bits_per_token


def train(config: ModelConfig, tcfg: TrainConfig, train_stream: TokenStream, valid_stream: TokenStream,
          callback: Callable[[int, ModelParams, CurvePoint], None] | None = None,
          init: ModelParams | None = None) -> tuple[ModelParams, list[CurvePoint]]:
    """Adam on B parallel contiguous shards, each with its own segment memory.

    Validation bits/token (static evaluation on at most ``eval_tokens``
    tokens) is measured at step 0, every ``eval_interval`` steps and at the
    end; the parameters with the lowest value are returned.
    """
    if len(train_stream) == 0 or len(valid_stream) == 0:
        raise DataError("training and validation streams must be nonempty")
    params = init.copy() if init is not None else init_model(config, tcfg.seed)
    rng = np.random.default_rng(tcfg.seed + 1)
    n = config.segment_len
    shards = _shards(train_stream, tcfg.batch_size, n)
    per = shards.shape[1]
    opt = Adam(params, tcfg)
    memory = empty_memory(config, tcfg.batch_size)
    cursor = 0

    best = _valid_bpc(params, valid_stream, tcfg.eval_tokens)
    best_params = params.copy()
    curve = [CurvePoint(0, float("nan"), 0.0, best)]
    if callback:
        callback(0, best_params, curve[-1])
    for step in range(1, tcfg.steps + 1):
        if cursor + n > per:
            cursor = 0
            memory = empty_memory(config, tcfg.batch_size)
        graph = Graph()
        res = forward_segment(params, shards[:, cursor : cursor + n], memory, graph=graph,
                              training=True, rng=rng)
        loss = float(res.loss.data)
        if not math.isfinite(loss):
            raise TrainingDivergedError(step, loss)
        grads = clip_by_global_norm(graph.backward(res.loss), tcfg.clip_norm)
        lr = tcfg.lr_at(step - 1)
        opt.step(params, grads, lr)
        memory = res.memory
        cursor += n
        point = CurvePoint(step, loss, lr)
        if step % tcfg.eval_interval == 0 or step == tcfg.steps:
            point.valid_bpc = _valid_bpc(params, valid_stream, tcfg.eval_tokens)
            log.info("step %d loss %.4f valid %.4f bits/token", step, loss, point.valid_bpc)
            if point.valid_bpc < best:
                best = point.valid_bpc
                best_params = params.copy()
                if callback:
                    callback(step, best_params, point)
        curve.append(point)
    return best_params, curve


# ---------------------------------------------------------------------------
# Dynamic-evaluation tuning


DEFAULT_RMS_LR = (1e-5, 3e-5, 1e-4, 3e-4, 1e-3)
DEFAULT_DECAY = (0.0, 1e-3, 1e-2, 3e-2)


def default_grid(kinds: Sequence[str] = ("sgd", "rms_decay"), learning_rates=DEFAULT_RMS_LR,
                 decays=DEFAULT_DECAY, epsilon: float = 1e-5) -> list[DynevalConfig]:
    grid = []
    for kind in kinds:
        for lr in learning_rates:
            if kind == "sgd":
                grid.append(DynevalConfig("sgd", lr))
            else:
                grid.extend(DynevalConfig("rms_decay", lr, d, epsilon) for d in decays)
    return grid


@dataclass
class TuneResult:
    best: DynevalConfig
    reports: list[tuple[DynevalConfig, EvalReport]]

    def score(self, cfg: DynevalConfig) -> float:
        for c, r in self.reports:
            if c == cfg:
                return r.bits_per_token
        raise KeyError(cfg)

    def best_of(self, kind: str) -> DynevalConfig:
        cands = [(r.bits_per_token, i, c) for i, (c, r) in enumerate(self.reports) if c.optimizer_kind == kind]
        if not cands:
            raise KeyError(kind)
        return min(cands)[2]

    def table(self) -> str:
        rows = [f"{'candidate':<44} {'bits/token':>12} {'perplexity':>12}"]
        for c, r in self.reports:
            mark = " *" if c == self.best else ""
            rows.append(f"{c.describe():<44} {r.bits_per_token:>12.6f} {r.perplexity:>12.4f}{mark}")
        return "\n".join(rows) + "\n"


def _evaluate_candidate(args) -> EvalReport:
    params, stats, stream, cfg = args
    return dynamic_eval(AdaptState.fresh(params, stats), stream, cfg)


def tune_dyneval(trained: ModelParams, stats: GradStats | None, valid_stream: TokenStream,
                 grid: Iterable[DynevalConfig], workers: int = 1) -> TuneResult:
    """Evaluate each candidate from a fresh copy of the trained weights; lowest bits/token wins.

    There is deliberately no test-stream argument. Ties go to the earlier
    candidate in the grid.
    """
    grid = list(grid)
    if not grid:
        raise ConfigError("grid", "needs at least one candidate")
    if valid_stream.split == "test":
        raise DataError("tuning must not read the test split")
    jobs = [(trained, stats if c.optimizer_kind == "rms_decay" else None, valid_stream, c) for c in grid]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            reports = list(pool.map(_evaluate_candidate, jobs))
    else:
        reports = [_evaluate_candidate(j) for j in jobs]
    best_i = min(range(len(grid)), key=lambda i: (reports[i].bits_per_token, i))
    return TuneResult(grid[best_i], list(zip(grid, reports)))


# ---------------------------------------------------------------------------
# Comparison tables


METRICS = {"bpc": ("bits/char", lambda r: r.bits_per_token), "ppl": ("perplexity", lambda r: r.perplexity)}


@dataclass
class ComparisonRow:
    name: str
    value: float
    delta: float | None = None
    improvement: float | None = None


@dataclass
class ComparisonTable:
    metric: str
    baseline: str | None
    rows: list[ComparisonRow] = field(default_factory=list)

    @property
    def has_improvement(self) -> bool:
        return self.baseline is not None and len(self.rows) > 1

    def row(self, name: str) -> ComparisonRow:
        return next(r for r in self.rows if r.name == name)

    def to_text(self) -> str:
        label = METRICS[self.metric][0]
        width = max(len("model"), *(len(r.name) for r in self.rows))
        head = f"{'model':<{width}}  {label:>12}"
        if self.has_improvement:
            head += f"  {'delta':>10}  {'improvement':>11}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            line = f"{r.name:<{width}}  {r.value:>12.4f}"
            if self.has_improvement:
                line += f"  {r.delta:>10.4f}  {100 * r.improvement:>10.2f}%"
            lines.append(line)
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        cols = ["model", self.metric] + (["delta", "relative_improvement"] if self.has_improvement else [])
        out = [",".join(cols)]
        for r in self.rows:
            vals = [r.name, repr(r.value)]
            if self.has_improvement:
                vals += [repr(r.delta), repr(r.improvement)]
            out.append(",".join(vals))
        return "\n".join(out) + "\n"


def compare_table(reports: Mapping[str, EvalReport], baseline: str | None = None,
                  metric: str = "bpc") -> ComparisonTable:
    """Rows per variant; improvement = (baseline - variant) / baseline."""
    if not reports:
        raise ComparisonError("need at least one report")
    if metric not in METRICS:
        raise ComparisonError(f"unknown metric {metric!r}")
    prints = {r.vocab_fingerprint for r in reports.values()}
    if len(prints) > 1:
        raise ComparisonError(f"reports come from different vocabularies: {sorted(prints)}")
    if baseline is None and len(reports) > 1:
        baseline = next(iter(reports))
    if baseline is not None and baseline not in reports:
        raise ComparisonError(f"baseline {baseline!r} not among the reports")
    get = METRICS[metric][1]
    table = ComparisonTable(metric, baseline if len(reports) > 1 else None)
    base = get(reports[baseline]) if baseline is not None else None
    for name, rep in reports.items():
        value = get(rep)
        row = ComparisonRow(name, value)
        if table.baseline is not None:
            row.delta = base - value
            row.improvement = (base - value) / base
        table.rows.append(row)
    return table
