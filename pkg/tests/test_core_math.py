import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dynxl import core_math as cm
from dynxl.core_math import Graph, backward, cross_entropy, grad_check, softmax
from dynxl.errors import GraphStateError, NumericDomainError, ShapeError

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def test_softmax_uniform():
    np.testing.assert_array_equal(softmax([0.0, 0.0, 0.0]), np.full(3, 1 / 3))


def test_softmax_reference_values():
    # mpmath at 30 digits
    np.testing.assert_allclose(softmax([1, 2, 3]), [0.0900305731704, 0.244728471055, 0.665240955775], rtol=1e-11)


@given(arrays(np.float64, st.integers(1, 12), elements=finite), st.floats(-1e3, 1e3))
def test_softmax_shift_invariant_and_normalised(x, c):
    p = softmax(x)
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) <= 1e-12
    # shifting by the max first makes the shift exact
    np.testing.assert_array_equal(softmax(x - x.max()), p)
    np.testing.assert_allclose(softmax(x + c), p, rtol=1e-9, atol=1e-15)


def test_softmax_pair_shift():
    np.testing.assert_allclose(softmax([7.5, 7.5 + 0.3]), softmax([0.0, 0.3]), rtol=1e-15)


@pytest.mark.parametrize("bad", [[0.0, np.nan], [np.inf, 1.0], [-np.inf, 0.0]])
def test_softmax_rejects_non_finite(bad):
    with pytest.raises(NumericDomainError):
        softmax(bad)


def test_cross_entropy_examples():
    assert cross_entropy([0.5, 0.5], 1) == pytest.approx(math.log(2))
    assert cross_entropy([0.5, 0.5], 0) / math.log(2) == pytest.approx(1.0)
    assert cross_entropy([0.0, 1.0], 1) == 0.0
    assert cross_entropy([0.25, 0.75], 0) == pytest.approx(1.38629436112, abs=1e-10)
    assert cross_entropy([0.25, 0.75], 0) / math.log(2) == pytest.approx(2.0)


def test_cross_entropy_floor():
    assert cross_entropy([0.0, 1.0], 0) == pytest.approx(-math.log(cm.PROB_FLOOR))
    assert cm.is_floored(0.0) and not cm.is_floored(0.5)
    with pytest.raises(ShapeError):
        cross_entropy([0.5, 0.5], 2)


# ---------------------------------------------------------------------------
# backward


def test_identity_gradient():
    g = Graph()
    th = g.param("theta", np.array(3.0))
    grads = backward(g, cm.sum_all(th))
    assert grads["theta"] == 1.0


def test_linear_combination_gradient():
    g = Graph()
    a, b = 2.5, -0.75
    t1 = g.param("t1", np.array([1.0]))
    t2 = g.param("t2", np.array([4.0]))
    loss = cm.add(cm.scale(cm.sum_all(t1), a), cm.scale(cm.sum_all(t2), b))
    grads = g.backward(loss)
    assert grads["t1"][0] == a and grads["t2"][0] == b


def test_fan_out_accumulates():
    g = Graph()
    x = g.param("x", np.array([2.0, -1.0]))
    loss = cm.sum_all(cm.mul(x, x))
    np.testing.assert_array_equal(g.backward(loss)["x"], [4.0, -2.0])


def test_unused_parameter_gets_zero_gradient():
    g = Graph()
    x = g.param("x", np.ones(3))
    g.param("unused", np.ones((2, 2)))
    grads = g.backward(cm.sum_all(x))
    np.testing.assert_array_equal(grads["unused"], np.zeros((2, 2)))


def test_backward_state_errors():
    g = Graph()
    other = Graph()
    loss = cm.sum_all(other.param("p", np.ones(2)))
    with pytest.raises(GraphStateError):
        backward(g, loss)  # nothing recorded on g yet
    g.param("q", np.ones(2))
    with pytest.raises(GraphStateError):
        backward(g, loss)  # loss belongs to another graph
    backward(other, loss)
    with pytest.raises(GraphStateError):
        backward(other, loss)
    ng = Graph(record=False)
    with pytest.raises(GraphStateError):
        backward(ng, cm.sum_all(ng.param("p", np.ones(2))))


def test_non_scalar_loss_rejected():
    g = Graph()
    x = g.param("x", np.ones(3))
    with pytest.raises(ShapeError):
        g.backward(cm.scale(x, 2.0))


def test_no_implicit_broadcast():
    g = Graph()
    with pytest.raises(ShapeError):
        cm.add(g.param("a", np.ones((2, 3))), g.param("b", np.ones(3)))
    with pytest.raises(ShapeError):
        cm.matmul(g.param("c", np.ones((2, 2, 3))), g.param("d", np.ones((3, 4))))


def _two_layer(x, targets):
    def fn(g, p):
        h = cm.gelu(cm.add_row(cm.linear(g.const(x), p["w1"]), p["b1"]))
        logits = cm.add_row(cm.linear(h, p["w2"]), p["b2"])
        return cm.scale(cm.sum_all(cm.pick(cm.log_softmax(logits), targets)), -1.0 / len(targets))

    return fn


def test_two_layer_net_matches_finite_differences():
    rng = np.random.default_rng(0)
    d = 8
    x = rng.normal(size=(5, d))
    targets = rng.integers(0, 4, size=5)
    params = {"w1": rng.normal(size=(d, d)), "b1": rng.normal(size=d),
              "w2": rng.normal(size=(d, 4)), "b2": rng.normal(size=4)}
    res = grad_check(_two_layer(x, targets), params, fd_step=1e-5, tolerance=1e-4)
    assert res.passed, str(res)
    assert res.checked == sum(v.size for v in params.values())


def test_backward_linearity():
    rng = np.random.default_rng(1)
    w = rng.normal(size=(4, 3))
    x1, x2 = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))

    def loss_of(xs):
        g = Graph()
        p = g.param("w", w)
        parts = [cm.sum_all(cm.gelu(cm.linear(g.const(x), p))) for x in xs]
        total = parts[0]
        for part in parts[1:]:
            total = cm.add(total, part)
        return g.backward(total)["w"]

    both = loss_of([x1, x2])
    separate = loss_of([x1]) + loss_of([x2])
    assert np.max(np.abs(both - separate)) <= 1e-12 * np.max(np.abs(separate))


def test_deterministic():
    rng = np.random.default_rng(2)
    params = {"w1": rng.normal(size=(8, 8)), "b1": rng.normal(size=8),
              "w2": rng.normal(size=(8, 4)), "b2": rng.normal(size=4)}
    x, t = rng.normal(size=(5, 8)), rng.integers(0, 4, size=5)
    outs = []
    for _ in range(2):
        g = Graph()
        loss = _two_layer(x, t)(g, {k: g.param(k, v) for k, v in params.items()})
        outs.append((loss.data.copy(), g.backward(loss)))
    assert outs[0][0] == outs[1][0]
    for k in params:
        np.testing.assert_array_equal(outs[0][1][k], outs[1][1][k])


# ---------------------------------------------------------------------------
# grad_check itself


def test_grad_check_quadratic():
    theta = np.array([0.3, -1.2, 2.0])
    res = grad_check(lambda g, p: cm.scale(cm.sum_all(cm.mul(p["t"], p["t"])), 0.5), {"t": theta})
    assert res.passed and res.max_rel_error < 1e-8


def test_grad_check_softmax_cross_entropy_layer():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 6))
    t = rng.integers(0, 5, size=4)

    def fn(g, p):
        probs = cm.softmax_t(cm.add_row(cm.linear(g.const(x), p["w"]), p["b"]))
        return cm.scale(cm.sum_all(cm.pick(probs, t)), -1.0)

    res = grad_check(fn, {"w": rng.normal(size=(6, 5)), "b": rng.normal(size=5)}, tolerance=1e-4)
    assert res.passed, str(res)


def test_grad_check_catches_corrupted_rule(monkeypatch):
    rng = np.random.default_rng(4)

    def broken(ctx, g):
        return g * ctx["b"] * 1.01, g * ctx["a"]

    monkeypatch.setattr(cm.OPS["mul"], "backward", staticmethod(broken))
    res = grad_check(lambda g, p: cm.sum_all(cm.mul(p["a"], p["b"])),
                     {"a": rng.normal(size=5), "b": rng.normal(size=5)})
    assert not res.passed
    assert res.worst_param == "a"


# ---------------------------------------------------------------------------
# every differentiable op against central differences, 20 random instances


def _weighted(out, rng):
    """Scalar probe: sum(out * fixed random weights), skipping -inf entries."""
    w = rng.normal(size=out.shape)
    return w


def _case(name, rng):
    """(fn, params) exercising one op."""
    if name == "add":
        shape = (3, 4)
        return (lambda g, p, w: cm.add(p["a"], p["b"])), {"a": rng.normal(size=shape), "b": rng.normal(size=shape)}
    if name == "sub":
        shape = (2, 5)
        return (lambda g, p, w: cm.sub(p["a"], p["b"])), {"a": rng.normal(size=shape), "b": rng.normal(size=shape)}
    if name == "mul":
        shape = (4, 3)
        return (lambda g, p, w: cm.mul(p["a"], p["b"])), {"a": rng.normal(size=shape), "b": rng.normal(size=shape)}
    if name == "scale":
        return (lambda g, p, w: cm.scale(p["a"], -1.7)), {"a": rng.normal(size=(3, 3))}
    if name == "add_bcast":
        return (lambda g, p, w: cm.add_bcast(p["x"], p["b"], axes=(0, 2))), {
            "x": rng.normal(size=(2, 3, 4, 2)), "b": rng.normal(size=(3, 2))}
    if name == "matmul":
        return (lambda g, p, w: cm.matmul(p["a"], p["b"])), {
            "a": rng.normal(size=(2, 3, 4)), "b": rng.normal(size=(2, 4, 5))}
    if name == "linear":
        return (lambda g, p, w: cm.linear(p["x"], p["w"])), {
            "x": rng.normal(size=(2, 3, 4)), "w": rng.normal(size=(4, 5))}
    if name == "reshape_transpose":
        return (lambda g, p, w: cm.transpose(cm.reshape(p["x"], (3, 2, 4)), (2, 0, 1))), {
            "x": rng.normal(size=(6, 4))}
    if name == "concat_slice":
        return (lambda g, p, w: cm.slice_axis(cm.concat([p["a"], p["b"]], axis=1), 1, 1, 5)), {
            "a": rng.normal(size=(2, 3, 2)), "b": rng.normal(size=(2, 4, 2))}
    if name == "layer_norm":
        return (lambda g, p, w: cm.layer_norm(p["x"], p["g"], p["b"])), {
            "x": rng.normal(size=(3, 2, 6)), "g": rng.normal(size=6), "b": rng.normal(size=6)}
    if name == "embedding":
        ids = rng.integers(0, 4, size=(2, 5))  # repeats exercise scatter-add
        return (lambda g, p, w: cm.embedding(p["t"], ids)), {"t": rng.normal(size=(4, 3))}
    if name == "gelu":
        return (lambda g, p, w: cm.gelu(p["x"])), {"x": rng.normal(size=(4, 5)) * 2}
    if name == "softmax":
        return (lambda g, p, w: cm.softmax_t(p["x"])), {"x": rng.normal(size=(3, 5))}
    if name == "log_softmax":
        return (lambda g, p, w: cm.log_softmax(p["x"])), {"x": rng.normal(size=(3, 5))}
    if name == "causal_mask":
        mask = np.triu(np.ones((4, 4), bool), 1)
        return (lambda g, p, w: cm.softmax_t(cm.mask_fill(p["x"], mask))), {"x": rng.normal(size=(2, 4, 4))}
    if name == "rel_shift":
        return (lambda g, p, w: cm.rel_shift(p["x"], 5)), {"x": rng.normal(size=(2, 3, 7))}
    if name == "take_cols":
        perm = rng.permutation(6)
        return (lambda g, p, w: cm.take_cols(p["x"], perm)), {"x": rng.normal(size=(3, 6))}
    if name == "pick":
        t = rng.integers(0, 5, size=(2, 3))
        return (lambda g, p, w: cm.pick(p["x"], t)), {"x": rng.normal(size=(2, 3, 5))}
    raise KeyError(name)


OP_CASES = ["add", "sub", "mul", "scale", "add_bcast", "matmul", "linear", "reshape_transpose",
            "concat_slice", "layer_norm", "embedding", "gelu", "softmax", "log_softmax",
            "causal_mask", "rel_shift", "take_cols", "pick"]


@pytest.mark.parametrize("name", OP_CASES)
def test_op_gradients(name):
    worst = 0.0
    for trial in range(20):
        rng = np.random.default_rng(1000 * OP_CASES.index(name) + trial)
        body, params = _case(name, rng)
        probe = None

        def fn(g, p):
            nonlocal probe
            out = body(g, p, None)
            if probe is None:
                probe = rng.normal(size=out.shape)
            w = np.where(np.isfinite(out.data), probe, 0.0)
            return cm.sum_all(cm.mul(out, g.const(w)))

        res = grad_check(fn, params, fd_step=1e-5, tolerance=1e-4)
        worst = max(worst, res.max_rel_error)
        assert res.passed, f"{name} trial {trial}: {res}"
    assert worst < 1e-4


def test_rel_shift_layout():
    x = np.arange(2 * 7, dtype=float).reshape(2, 7)
    g = Graph()
    out = cm.rel_shift(g.const(x), 5).data
    for i in range(2):
        for j in range(5):
            assert out[i, j] == x[i, i + 4 - j]


def test_mask_fill_gives_exact_zero_weight():
    g = Graph()
    mask = np.triu(np.ones((3, 3), bool), 1)
    w = cm.softmax_t(cm.mask_fill(g.const(np.random.default_rng(0).normal(size=(3, 3))), mask)).data
    assert np.all(w[mask] == 0.0)
    np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-15)
