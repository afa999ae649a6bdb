import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynxl.core_math import Graph
from dynxl.errors import ConfigError, DataError, ModelStateError
from dynxl.model import (ModelConfig, ModelParams, SegmentMemory, adaptive_softmax_logprob, attention_mask,
                         empty_memory, forward_segment, init_model, param_shapes, position_table,
                         rel_attention, with_segment)
from oracles import adaptive_enumeration, model_grad_check, naive_rel_attention

SMALL = dict(d_model=16, n_heads=2, d_head=8, d_ff=32)


def small(vocab=11, seg=4, mem=4, layers=2, **kw):
    return ModelConfig(vocab_size=vocab, n_layers=layers, segment_len=seg, mem_len=mem, **{**SMALL, **kw})


def noisy(cfg, seed=0, scale=0.3):
    """Random parameters large enough that every path matters."""
    p = init_model(cfg, seed)
    rng = np.random.default_rng(seed + 100)
    for arr in p.tensors.values():
        arr += rng.normal(0, scale, size=arr.shape)
    return p


def run(params, tokens, memory=None):
    return forward_segment(params, tokens, memory, graph=Graph(record=False))


# ---------------------------------------------------------------------------
# config and init


def test_init_deterministic():
    cfg = small()
    a, b = init_model(cfg, 5), init_model(cfg, 5)
    assert a.names() == b.names()
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])
    assert any(not np.array_equal(a[k], init_model(cfg, 6)[k]) for k in a)


def test_head_product_must_match():
    with pytest.raises(ConfigError) as e:
        ModelConfig(vocab_size=10, d_model=16, n_heads=2, d_head=7)
    assert e.value.field == "d_model"


@pytest.mark.parametrize("field,value", [("segment_len", 0), ("mem_len", -1), ("vocab_size", 0),
                                         ("dropout_rate", 1.0), ("output_layer_kind", "tree")])
def test_config_errors_name_field(field, value):
    kw = dict(vocab_size=10, **SMALL)
    kw[field] = value
    with pytest.raises(ConfigError) as e:
        ModelConfig(**kw)
    assert e.value.field == field


def test_cutoffs_validated():
    with pytest.raises(ConfigError):
        small(output_layer_kind="adaptive", adaptive_cutoffs=(6, 4))
    with pytest.raises(ConfigError):
        small(output_layer_kind="adaptive", adaptive_cutoffs=(3, 12))
    with pytest.raises(ConfigError):
        small(vocab=20, output_layer_kind="adaptive", adaptive_cutoffs=(4, 8, 12))


def test_init_conventions():
    p = init_model(small(), 0)
    for name, arr in p.items():
        if name.endswith(".gain"):
            assert np.all(arr == 1.0)
        elif name.endswith((".bias", "_bias", ".b1", ".b2", ".b")):
            assert np.all(arr == 0.0), name
        else:
            assert 0.01 < arr.std() < 0.03, name
    assert list(p) == list(param_shapes(p.config))


# ---------------------------------------------------------------------------
# attention


def test_rel_attention_matches_loop_oracle():
    rng = np.random.default_rng(0)
    M, n, dh = 0, 3, 2
    q, k, v = rng.normal(size=(n, dh)), rng.normal(size=(M + n, dh)), rng.normal(size=(M + n, dh))
    r = rng.normal(size=(M + 2 * n - 1, dh))
    u, vb = rng.normal(size=dh), rng.normal(size=dh)
    g = Graph(record=False)
    out = rel_attention(g.const(q[None, None]), g.const(k[None, None]), g.const(v[None, None]),
                        g.const(r[None]), g.const(u[None]), g.const(vb[None]), attention_mask(M, n, 0))
    np.testing.assert_allclose(out.data[0, 0], naive_rel_attention(q, k, v, r, u, vb, M), rtol=1e-12)


def test_rel_attention_with_memory_matches_loop_oracle():
    rng = np.random.default_rng(1)
    M, n, dh = 2, 3, 2
    q, k, v = rng.normal(size=(n, dh)), rng.normal(size=(M + n, dh)), rng.normal(size=(M + n, dh))
    r = rng.normal(size=(M + 2 * n - 1, dh))
    u, vb = rng.normal(size=dh), rng.normal(size=dh)
    g = Graph(record=False)
    out = rel_attention(g.const(q[None, None]), g.const(k[None, None]), g.const(v[None, None]),
                        g.const(r[None]), g.const(u[None]), g.const(vb[None]), attention_mask(M, n, M))
    np.testing.assert_allclose(out.data[0, 0], naive_rel_attention(q, k, v, r, u, vb, M), rtol=1e-12)


def test_single_key_gets_full_weight():
    rng = np.random.default_rng(2)
    g = Graph(record=False)
    v = rng.normal(size=(1, 1, 1, 4))
    out = rel_attention(g.const(rng.normal(size=(1, 1, 1, 4)) * 50), g.const(rng.normal(size=(1, 1, 1, 4))),
                        g.const(v), g.const(rng.normal(size=(1, 1, 4))), g.const(np.zeros((1, 4))),
                        g.const(np.zeros((1, 4))), attention_mask(0, 1, 0))
    np.testing.assert_array_equal(out.data, v)


def test_identical_keys_split_evenly():
    g = Graph(record=False)
    key = np.array([0.3, -0.7])
    k = np.stack([key, key])[None, None]
    v = np.array([[1.0, 0.0], [0.0, 1.0]])[None, None]
    q = np.array([[0.1, 0.2], [0.4, -0.5]])[None, None]
    out = rel_attention(g.const(q), g.const(k), g.const(v), g.const(np.zeros((1, 3, 2))),
                        g.const(np.zeros((1, 2))), g.const(np.zeros((1, 2))), attention_mask(0, 2, 0))
    # query 1 sees both keys with equal scores
    np.testing.assert_allclose(out.data[0, 0, 1], [0.5, 0.5], rtol=1e-15)


def test_mask_shape_errors():
    g = Graph(record=False)
    z = g.const(np.zeros((1, 1, 2, 2)))
    with pytest.raises(ModelStateError):
        rel_attention(z, z, z, g.const(np.zeros((1, 3, 2))), g.const(np.zeros((1, 2))),
                      g.const(np.zeros((1, 2))), np.zeros((3, 3), bool))


def test_position_table_layout():
    t = position_table(2, 3, 4)
    assert t.shape == (2 + 2 * 3 - 1, 4)
    # distance 0 sits at row seg_len - 1
    np.testing.assert_array_equal(t[2], [0.0, 0.0, 1.0, 1.0])


# ---------------------------------------------------------------------------
# forward pass


def test_distributions_normalised():
    p = noisy(small())
    res = run(p, [1, 2, 3, 4])
    np.testing.assert_allclose(np.exp(res.distributions).sum(-1), 1.0, atol=1e-10)


def test_first_position_uses_start_of_stream_only():
    p = noisy(small())
    a = run(p, [3]).distributions
    b = run(p, [7]).distributions
    np.testing.assert_array_equal(a, b)


def test_bad_tokens_and_memory():
    p = noisy(small())
    with pytest.raises(DataError):
        run(p, [1, 11])
    with pytest.raises(DataError):
        run(p, [1, 2, 3, 4, 5])
    with pytest.raises(ModelStateError):
        run(p, [1], empty_memory(small(layers=1), 1))
    with pytest.raises(ModelStateError):
        run(p, [1], empty_memory(small(mem=3), 1))


def test_memory_is_bounded_and_right_aligned():
    cfg = small(seg=3, mem=4)
    p = noisy(cfg)
    mem = None
    lengths = []
    for seg in ([1, 2, 3], [4, 5], [6, 7, 8]):
        mem = run(p, seg, mem).memory
        lengths.append(mem.length)
        assert all(s.shape == (1, 4, 16) for s in mem.states)
    assert lengths == [3, 4, 4]
    assert mem.last_token[0] == 8


def test_no_memory_means_independent_segments():
    p = noisy(small(mem=0))
    mem = run(p, [5, 6, 7, 8]).memory
    np.testing.assert_array_equal(run(p, [1, 2, 3], mem).distributions, run(p, [1, 2, 3]).distributions)


def test_recurrence_reach():
    for mem, expect_change in ((4, True), (0, False)):
        p = noisy(small(mem=mem))
        first_a, first_b = [1, 2, 3, 4], [1, 9, 3, 4]
        out_a = run(p, [5, 6, 7, 8], run(p, first_a).memory).distributions
        out_b = run(p, [5, 6, 7, 8], run(p, first_b).memory).distributions
        assert (not np.array_equal(out_a, out_b)) == expect_change


def test_segmented_matches_monolithic():
    cfg = small(seg=4, mem=4)
    p = noisy(cfg)
    seq = [3, 1, 4, 1, 5, 9, 2, 6]
    r1 = run(p, seq[:4])
    r2 = run(p, seq[4:], r1.memory)
    seg_total = r1.token_log_probs.sum() + r2.token_log_probs.sum()
    mono = ModelParams(with_segment(cfg, 8, 0), p.tensors)
    full = run(mono, seq).token_log_probs.sum()
    assert abs(seg_total - full) / 8 < 1e-6


@settings(max_examples=20, deadline=None)
@given(st.lists(st.integers(0, 10), min_size=2, max_size=4), st.data())
def test_causality_within_segment(tokens, data):
    p = noisy(small())
    t = data.draw(st.integers(0, len(tokens) - 1))
    other = list(tokens)
    other[t] = (other[t] + 1 + data.draw(st.integers(0, 9))) % 11
    a, b = run(p, tokens).distributions, run(p, other).distributions
    np.testing.assert_array_equal(a[:, : t + 1], b[:, : t + 1])


def test_memory_carries_no_gradient():
    p = noisy(small())
    mem = run(p, [1, 2, 3, 4]).memory
    detached = SegmentMemory([s.copy() for s in mem.states], mem.length, mem.last_token.copy())
    ga = forward_segment(p, [5, 6, 7], mem)
    gb = forward_segment(p, [5, 6, 7], detached)
    grads_a, grads_b = ga.graph.backward(ga.loss), gb.graph.backward(gb.loss)
    for k in grads_a:
        np.testing.assert_array_equal(grads_a[k], grads_b[k])


def test_end_to_end_gradient_check():
    cfg = small(vocab=30)
    p = noisy(cfg, seed=3)
    mem = run(p, [4, 8, 15, 16]).memory
    err, worst, n = model_grad_check(p, [23, 4, 2], mem, per_param=6)
    assert err < 1e-4, worst
    assert n > 100


def test_dropout_only_in_training():
    cfg = small(dropout_rate=0.3)
    p = noisy(cfg)
    a = forward_segment(p, [1, 2, 3], training=True, rng=np.random.default_rng(0)).distributions
    b = run(p, [1, 2, 3]).distributions
    c = run(p, [1, 2, 3]).distributions
    assert not np.array_equal(a, b)
    np.testing.assert_array_equal(b, c)


def test_batch_rows_independent():
    p = noisy(small())
    both = run(p, np.array([[1, 2, 3], [4, 5, 6]])).distributions
    np.testing.assert_array_equal(both[1], run(p, [4, 5, 6]).distributions[0])


# ---------------------------------------------------------------------------
# adaptive softmax


def test_adaptive_without_tail_equals_full_softmax():
    full = noisy(small(vocab=10))
    ada_cfg = small(vocab=10, output_layer_kind="adaptive", adaptive_cutoffs=(10,))
    tensors = {k: v for k, v in full.items() if not k.startswith("out.")}
    tensors["out.head.w"] = full["out.w"]
    tensors["out.head.b"] = full["out.b"]
    ada = ModelParams(ada_cfg, {k: tensors[k] for k in param_shapes(ada_cfg)})
    np.testing.assert_array_equal(run(full, [1, 2, 3]).distributions, run(ada, [1, 2, 3]).distributions)


@pytest.mark.parametrize("cutoffs", [(8,), (4, 8)])
def test_adaptive_matches_enumeration(cutoffs):
    order = tuple(int(i) for i in np.random.default_rng(0).permutation(12))
    cfg = small(vocab=12, output_layer_kind="adaptive", adaptive_cutoffs=cutoffs, adaptive_order=order)
    p = noisy(cfg, seed=4)
    h = np.random.default_rng(5).normal(size=16)
    expect = adaptive_enumeration(h, p)
    got = np.array([adaptive_softmax_logprob(h, t, p) for t in range(12)])
    np.testing.assert_allclose(got, expect, rtol=1e-12, atol=1e-13)
    assert abs(np.exp(got).sum() - 1.0) < 1e-10


def test_adaptive_model_normalised_and_differentiable():
    cfg = small(vocab=20, output_layer_kind="adaptive", adaptive_cutoffs=(6,))
    p = noisy(cfg, seed=6)
    res = run(p, [1, 19, 7, 12])
    np.testing.assert_allclose(np.exp(res.distributions).sum(-1), 1.0, atol=1e-8)
    err, worst, _ = model_grad_check(p, [1, 19, 7, 12], per_param=5)
    assert err < 1e-4, worst


def test_adaptive_logprob_rejects_bad_target():
    cfg = small(vocab=12, output_layer_kind="adaptive", adaptive_cutoffs=(8,))
    with pytest.raises(DataError):
        adaptive_softmax_logprob(np.zeros(16), 12, init_model(cfg))


def test_tail_projection_width():
    cfg = small(vocab=12, output_layer_kind="adaptive", adaptive_cutoffs=(8,), adaptive_tail_shrink_factor=4)
    shapes = param_shapes(cfg)
    assert shapes["out.tail0.proj"] == (16, 4)
    assert shapes["out.head.w"] == (16, 9)
