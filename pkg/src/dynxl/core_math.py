"""Dense float64 tensors with a tape-based reverse-mode autodiff.

Every operation is a small class with a ``forward`` and a ``backward`` rule,
registered by name in :data:`OPS`. Nodes store the op *name*, and the rule is
looked up again when ``backward`` runs, so a rule can be swapped out (tests use
that to corrupt one on purpose and check that :func:`grad_check` notices).

Shapes are never broadcast implicitly. Ops that broadcast say so in their name
and take the broadcast axes as an argument.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .errors import GraphStateError, NumericDomainError, ShapeError

DTYPE = np.float64
PROB_FLOOR = 1e-12

OPS: dict[str, type["Op"]] = {}


def register(name: str):
    def deco(cls):
        cls.name = name
        OPS[name] = cls
        return cls

    return deco


class Op:
    name = "op"

    @staticmethod
    def forward(ctx: dict, *arrays, **attrs) -> np.ndarray:
        raise NotImplementedError

    @staticmethod
    def backward(ctx: dict, grad: np.ndarray) -> tuple:
        raise NotImplementedError


class Tensor:
    __slots__ = ("data", "grad", "graph", "index", "op", "inputs", "ctx", "requires_grad", "name")

    def __init__(self, data, graph, op=None, inputs=(), ctx=None, requires_grad=False, name=None):
        self.data = data
        self.grad = None
        self.graph = graph
        self.index = -1
        self.op = op
        self.inputs = inputs
        self.ctx = ctx
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        kind = self.op or ("param" if self.name else "leaf")
        return f"Tensor({kind}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class Graph:
    """Records operations in creation order, which is a topological order."""

    def __init__(self, record: bool = True):
        self.record = record
        self.nodes: list[Tensor] = []
        self.params: dict[str, Tensor] = {}
        self._done = False

    def _add(self, t: Tensor) -> Tensor:
        if self.record:
            t.index = len(self.nodes)
            self.nodes.append(t)
        return t

    def param(self, name: str, data) -> Tensor:
        if name in self.params:
            raise GraphStateError(f"parameter {name!r} registered twice")
        arr = np.asarray(data, dtype=DTYPE)
        t = self._add(Tensor(arr, self, requires_grad=self.record, name=name))
        self.params[name] = t
        return t

    def const(self, data) -> Tensor:
        return self._add(Tensor(np.asarray(data, dtype=DTYPE), self))

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        return backward(self, loss)


def apply(name: str, *inputs: Tensor, **attrs) -> Tensor:
    graph = inputs[0].graph
    for t in inputs[1:]:
        if t.graph is not graph:
            raise GraphStateError(f"{name}: inputs belong to different graphs")
    ctx: dict = {}
    out = OPS[name].forward(ctx, *[t.data for t in inputs], **attrs)
    needs = graph.record and any(t.requires_grad for t in inputs)
    if not needs:
        return graph._add(Tensor(out, graph))
    return graph._add(Tensor(out, graph, op=name, inputs=inputs, ctx=ctx, requires_grad=True))


def backward(graph: Graph, loss: Tensor) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` for every parameter leaf of ``graph``.

    Gradients flowing into a node from several consumers are summed in
    decreasing node-index order, so repeated runs are bit-identical.
    Parameters the loss does not depend on get zero arrays.
    """
    if not graph.record:
        raise GraphStateError("graph was built without recording; nothing to differentiate")
    if not graph.nodes or loss.graph is not graph or loss.index < 0:
        raise GraphStateError("backward requested before a forward pass produced this loss")
    if graph._done:
        raise GraphStateError("backward already ran on this graph")
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    graph._done = True
    if loss.requires_grad:
        loss.grad = np.ones_like(loss.data)
        for node in reversed(graph.nodes[: loss.index + 1]):
            if node.op is None or node.grad is None:
                continue
            in_grads = OPS[node.op].backward(node.ctx, node.grad)
            for inp, g in zip(node.inputs, in_grads):
                if g is None or not inp.requires_grad:
                    continue
                if g.shape != inp.data.shape:
                    raise ShapeError(f"{node.op}: backward produced {g.shape}, input has {inp.data.shape}")
                inp.grad = g if inp.grad is None else inp.grad + g
            node.ctx = None
    return {
        name: (t.grad if t.grad is not None else np.zeros_like(t.data))
        for name, t in graph.params.items()
    }


def _same_shape(op: str, a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _sum_to_rows(g: np.ndarray, ndim: int) -> np.ndarray:
    return g.reshape(-1, *g.shape[g.ndim - ndim:]).sum(axis=0) if g.ndim > ndim else g


@register("add")
class Add(Op):
    @staticmethod
    def forward(ctx, a, b):
        _same_shape("add", a, b)
        return a + b

    @staticmethod
    def backward(ctx, g):
        return g, g


@register("sub")
class Sub(Op):
    @staticmethod
    def forward(ctx, a, b):
        _same_shape("sub", a, b)
        return a - b

    @staticmethod
    def backward(ctx, g):
        return g, -g


@register("mul")
class Mul(Op):
    @staticmethod
    def forward(ctx, a, b):
        _same_shape("mul", a, b)
        ctx["a"], ctx["b"] = a, b
        return a * b

    @staticmethod
    def backward(ctx, g):
        return g * ctx["b"], g * ctx["a"]


@register("scale")
class Scale(Op):
    @staticmethod
    def forward(ctx, x, c):
        ctx["c"] = c
        return x * c

    @staticmethod
    def backward(ctx, g):
        return (g * ctx["c"],)


@register("add_bcast")
class AddBroadcast(Op):
    """x + b with b repeated along ``axes`` of x; b.shape is x.shape minus those axes."""

    @staticmethod
    def forward(ctx, x, b, axes):
        axes = tuple(sorted(a % x.ndim for a in axes))
        expect = tuple(s for i, s in enumerate(x.shape) if i not in axes)
        if b.shape != expect:
            raise ShapeError(f"add_bcast: bias shape {b.shape}, expected {expect}")
        ctx["axes"] = axes
        return x + np.expand_dims(b, axes)

    @staticmethod
    def backward(ctx, g):
        return g, g.sum(axis=ctx["axes"])


@register("matmul")
class MatMul(Op):
    """Batched a @ b with identical leading dimensions."""

    @staticmethod
    def forward(ctx, a, b):
        if a.ndim != b.ndim or a.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
        ctx["a"], ctx["b"] = a, b
        return a @ b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx["a"], ctx["b"]
        return g @ np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2) @ g


@register("linear")
class Linear(Op):
    """x[..., k] @ w[k, n], the same weight applied at every leading index."""

    @staticmethod
    def forward(ctx, x, w):
        if w.ndim != 2 or x.shape[-1] != w.shape[0]:
            raise ShapeError(f"linear: {x.shape} @ {w.shape}")
        ctx["x"], ctx["w"] = x, w
        return (x.reshape(-1, w.shape[0]) @ w).reshape(*x.shape[:-1], w.shape[1])

    @staticmethod
    def backward(ctx, g):
        x, w = ctx["x"], ctx["w"]
        g2 = g.reshape(-1, w.shape[1])
        return (g2 @ w.T).reshape(x.shape), x.reshape(-1, w.shape[0]).T @ g2


@register("reshape")
class Reshape(Op):
    @staticmethod
    def forward(ctx, x, shape):
        ctx["shape"] = x.shape
        return x.reshape(shape)

    @staticmethod
    def backward(ctx, g):
        return (g.reshape(ctx["shape"]),)


@register("transpose")
class Transpose(Op):
    @staticmethod
    def forward(ctx, x, axes):
        ctx["axes"] = axes
        return np.ascontiguousarray(np.transpose(x, axes))

    @staticmethod
    def backward(ctx, g):
        return (np.ascontiguousarray(np.transpose(g, np.argsort(ctx["axes"]))),)


@register("concat")
class Concat(Op):
    @staticmethod
    def forward(ctx, *xs, axis):
        ctx["axis"] = axis
        ctx["sizes"] = [x.shape[axis] for x in xs]
        return np.concatenate(xs, axis=axis)

    @staticmethod
    def backward(ctx, g):
        cuts = np.cumsum(ctx["sizes"])[:-1]
        return tuple(np.split(g, cuts, axis=ctx["axis"]))


@register("slice_axis")
class SliceAxis(Op):
    @staticmethod
    def forward(ctx, x, axis, start, stop):
        ctx["shape"], ctx["axis"], ctx["start"], ctx["stop"] = x.shape, axis, start, stop
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(start, stop)
        return x[tuple(idx)]

    @staticmethod
    def backward(ctx, g):
        out = np.zeros(ctx["shape"], dtype=g.dtype)
        idx = [slice(None)] * out.ndim
        idx[ctx["axis"]] = slice(ctx["start"], ctx["stop"])
        out[tuple(idx)] = g
        return (out,)


@register("layer_norm")
class LayerNorm(Op):
    @staticmethod
    def forward(ctx, x, gain, bias, eps=1e-5):
        d = x.shape[-1]
        if gain.shape != (d,) or bias.shape != (d,):
            raise ShapeError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} for width {d}")
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
        xhat = xc * inv
        ctx["xhat"], ctx["inv"], ctx["gain"] = xhat, inv, gain
        return xhat * gain + bias

    @staticmethod
    def backward(ctx, g):
        xhat, inv, gain = ctx["xhat"], ctx["inv"], ctx["gain"]
        dxhat = g * gain
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, _sum_to_rows(g * xhat, 1), _sum_to_rows(g, 1)


@register("embedding")
class Embedding(Op):
    @staticmethod
    def forward(ctx, table, ids):
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
            raise ShapeError(f"embedding: ids outside [0, {table.shape[0]})")
        ctx["ids"], ctx["rows"] = ids, table.shape
        return table[ids]

    @staticmethod
    def backward(ctx, g):
        out = np.zeros(ctx["rows"], dtype=g.dtype)
        np.add.at(out, ctx["ids"].reshape(-1), g.reshape(-1, ctx["rows"][1]))
        return (out,)


_GELU_K = math.sqrt(2.0 / math.pi)


@register("gelu")
class Gelu(Op):
    """Tanh approximation; smooth everywhere, which keeps finite differences honest."""

    @staticmethod
    def forward(ctx, x):
        x2 = x * x
        t = x2 * 0.044715
        t += 1.0
        t *= x
        t *= _GELU_K
        np.tanh(t, out=t)
        ctx["x"], ctx["x2"], ctx["t"] = x, x2, t
        out = t + 1.0
        out *= x
        out *= 0.5
        return out

    @staticmethod
    def backward(ctx, g):
        x, x2, t = ctx["x"], ctx["x2"], ctx["t"]
        # d/dx = 0.5 (1 + t) + 0.5 x (1 - t^2) k (1 + 3c x^2)
        dt = x2 * (3 * 0.044715 * _GELU_K)
        dt += _GELU_K
        dt *= 1.0 - t * t
        dt *= x
        dt += t
        dt += 1.0
        dt *= 0.5
        dt *= g
        return (dt,)


def _softmax_last(x: np.ndarray) -> np.ndarray:
    e = x - x.max(axis=-1, keepdims=True)
    np.exp(e, out=e)
    e /= e.sum(axis=-1, keepdims=True)
    return e


@register("softmax")
class Softmax(Op):
    @staticmethod
    def forward(ctx, x):
        s = _softmax_last(x)
        ctx["s"] = s
        return s

    @staticmethod
    def backward(ctx, g):
        s = ctx["s"]
        out = g - (g * s).sum(axis=-1, keepdims=True)
        out *= s
        return (out,)


@register("log_softmax")
class LogSoftmax(Op):
    @staticmethod
    def forward(ctx, x):
        shifted = x - x.max(axis=-1, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        ctx["out"] = out
        return out

    @staticmethod
    def backward(ctx, g):
        return (g - np.exp(ctx["out"]) * g.sum(axis=-1, keepdims=True),)


@register("mask_fill")
class MaskFill(Op):
    """Set masked entries to -inf; ``mask`` matches the trailing dims of x."""

    @staticmethod
    def forward(ctx, x, mask):
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim > x.ndim or x.shape[x.ndim - mask.ndim:] != mask.shape:
            raise ShapeError(f"mask_fill: mask {mask.shape} does not match trailing dims of {x.shape}")
        ctx["mask"] = mask
        return np.where(mask, -np.inf, x)

    @staticmethod
    def backward(ctx, g):
        return (np.where(ctx["mask"], 0.0, g),)


def _skew_view(x: np.ndarray, width: int) -> np.ndarray:
    """View v[..., i, m] = x[..., i, i + m] for m < width (x must be C-contiguous)."""
    *lead, n, P = x.shape
    if P < n - 1 + width:
        raise ShapeError(f"rel_shift: need {n - 1 + width} distance columns, have {P}")
    st = x.strides
    return np.lib.stride_tricks.as_strided(x, (*lead, n, width), (*st[:-2], st[-2] + st[-1], st[-1]))


@register("rel_shift")
class RelShift(Op):
    """out[..., i, j] = x[..., i, i + width - 1 - j].

    Row i of x holds scores against distances in increasing order; the output
    lines them up by key so that key j sees distance offset ``width - 1 - j``
    relative to query i.
    """

    @staticmethod
    def forward(ctx, x, width):
        x = np.ascontiguousarray(x)
        ctx["shape"], ctx["width"] = x.shape, width
        return _skew_view(x, width)[..., ::-1].copy()

    @staticmethod
    def backward(ctx, g):
        out = np.zeros(ctx["shape"], dtype=g.dtype)
        _skew_view(out, ctx["width"])[..., ::-1] = g
        return (out,)


@register("take_cols")
class TakeCols(Op):
    """x[..., idx] for a 1-D index vector."""

    @staticmethod
    def forward(ctx, x, idx):
        idx = np.asarray(idx)
        ctx["idx"], ctx["shape"] = idx, x.shape
        return x[..., idx]

    @staticmethod
    def backward(ctx, g):
        out = np.zeros(ctx["shape"], dtype=g.dtype)
        np.add.at(out, (Ellipsis, ctx["idx"]), g)
        return (out,)


@register("pick")
class Pick(Op):
    """out[...] = x[..., target[...]]."""

    @staticmethod
    def forward(ctx, x, targets):
        targets = np.asarray(targets)
        if targets.shape != x.shape[:-1]:
            raise ShapeError(f"pick: targets {targets.shape} for input {x.shape}")
        ctx["t"], ctx["shape"] = targets, x.shape
        return np.take_along_axis(x, targets[..., None], axis=-1)[..., 0]

    @staticmethod
    def backward(ctx, g):
        out = np.zeros(ctx["shape"], dtype=g.dtype)
        np.put_along_axis(out, ctx["t"][..., None], g[..., None], axis=-1)
        return (out,)


@register("sum_all")
class SumAll(Op):
    @staticmethod
    def forward(ctx, x):
        ctx["shape"] = x.shape
        return np.asarray(x.sum())

    @staticmethod
    def backward(ctx, g):
        return (np.full(ctx["shape"], g, dtype=np.result_type(g)),)


def add(a, b):
    return apply("add", a, b)


def sub(a, b):
    return apply("sub", a, b)


def mul(a, b):
    return apply("mul", a, b)


def scale(x, c: float):
    return apply("scale", x, c=float(c))


def add_bcast(x, b, axes):
    return apply("add_bcast", x, b, axes=tuple(axes))


def add_row(x, b):
    """x[..., d] + b[d]."""
    return apply("add_bcast", x, b, axes=tuple(range(x.data.ndim - 1)))


def matmul(a, b):
    return apply("matmul", a, b)


def linear(x, w):
    return apply("linear", x, w)


def reshape(x, shape):
    return apply("reshape", x, shape=tuple(shape))


def transpose(x, axes):
    return apply("transpose", x, axes=tuple(axes))


def concat(xs, axis: int):
    return apply("concat", *xs, axis=axis)


def slice_axis(x, axis: int, start: int, stop: int):
    return apply("slice_axis", x, axis=axis, start=start, stop=stop)


def layer_norm(x, gain, bias, eps: float = 1e-5):
    return apply("layer_norm", x, gain, bias, eps=eps)


def embedding(table, ids):
    return apply("embedding", table, ids=ids)


def gelu(x):
    return apply("gelu", x)


def softmax_t(x):
    return apply("softmax", x)


def log_softmax(x):
    return apply("log_softmax", x)


def mask_fill(x, mask):
    return apply("mask_fill", x, mask=mask)


def rel_shift(x, width: int):
    return apply("rel_shift", x, width=width)


def take_cols(x, idx):
    return apply("take_cols", x, idx=idx)


def pick(x, targets):
    return apply("pick", x, targets=targets)


def sum_all(x):
    return apply("sum_all", x)


# ---------------------------------------------------------------------------
# Plain-array helpers


def softmax(logits) -> np.ndarray:
    """Max-shifted softmax of a real vector."""
    x = np.asarray(logits, dtype=DTYPE)
    if not np.all(np.isfinite(x)):
        raise NumericDomainError("softmax: logits must be finite")
    e = np.exp(x - x.max())
    return e / e.sum()


def cross_entropy(probabilities, target: int, floor: float = PROB_FLOOR) -> float:
    """-log p[target] in nats, with p floored at ``floor``. Divide by ln 2 for bits."""
    p = np.asarray(probabilities, dtype=DTYPE)
    if not 0 <= target < p.shape[-1]:
        raise ShapeError(f"cross_entropy: target {target} outside [0, {p.shape[-1]})")
    return -math.log(max(float(p[target]), floor))


def is_floored(probability: float, floor: float = PROB_FLOOR) -> bool:
    return probability < floor


# ---------------------------------------------------------------------------
# Finite-difference checking


@dataclass
class GradCheckResult:
    passed: bool
    max_rel_error: float
    worst_param: str | None
    worst_index: tuple | None
    worst_analytic: float
    worst_numeric: float
    checked: int

    def __str__(self):
        status = "pass" if self.passed else "FAIL"
        return (
            f"grad_check {status}: max rel err {self.max_rel_error:.3e} over {self.checked} entries; "
            f"worst {self.worst_param}{list(self.worst_index or ())} "
            f"analytic={self.worst_analytic:.6e} numeric={self.worst_numeric:.6e}"
        )


def relative_error(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def grad_check(
    fn: Callable[[Graph, Mapping[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    fd_step: float = 1e-5,
    tolerance: float = 1e-4,
    max_per_param: int | None = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckResult:
    """Compare reverse-mode gradients of ``fn`` with central differences.

    ``fn(graph, leaves)`` builds a scalar loss from parameter leaves. With
    ``max_per_param`` set, that many randomly chosen entries of each parameter
    are checked instead of all of them.
    """
    base = {k: np.array(v, dtype=DTYPE) for k, v in params.items()}
    g = Graph()
    leaves = {k: g.param(k, v) for k, v in base.items()}
    analytic = backward(g, fn(g, leaves))

    def value(arrays) -> float:
        gg = Graph(record=False)
        return float(fn(gg, {k: gg.param(k, v) for k, v in arrays.items()}).data)

    rng = np.random.default_rng(seed)
    worst = (0.0, None, None, 0.0, 0.0)
    checked = 0
    for name, arr in base.items():
        flat = np.arange(arr.size)
        if max_per_param is not None and arr.size > max_per_param:
            flat = rng.choice(arr.size, size=max_per_param, replace=False)
        for k in flat:
            idx = np.unravel_index(int(k), arr.shape)
            orig = arr[idx]
            arr[idx] = orig + fd_step
            up = value(base)
            arr[idx] = orig - fd_step
            down = value(base)
            arr[idx] = orig
            numeric = (up - down) / (2 * fd_step)
            a = float(analytic[name][idx])
            err = relative_error(a, numeric, floor)
            checked += 1
            if err > worst[0] or worst[1] is None:
                worst = (err, name, tuple(int(i) for i in idx), a, numeric)
    return GradCheckResult(worst[0] < tolerance, worst[0], worst[1], worst[2], worst[3], worst[4], checked)
