import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rebalance.budget import count_params, per_layer_params
from rebalance.model import (Batch, MaskedBatch, StateError, build, encode, forward_mlm, from_arrays,
                             hidden_states, mlm_loss, param_shapes, to_finetune, truncate_layers)
from rebalance.tensor import grad_check

from conftest import tiny_config


def reference_logits(c, p, ids, mask):
    """Token-by-token loop implementation of one sequence, written independently."""
    def ln(x, g, b):
        mu = sum(x) / len(x)
        var = sum((xi - mu) ** 2 for xi in x) / len(x)
        return [(xi - mu) / math.sqrt(var + c.layernorm_eps) * gi + bi for xi, gi, bi in zip(x, g, b)]

    def lin(x, w, b=None):
        out = [sum(x[i] * w[i][j] for i in range(len(x))) for j in range(len(w[0]))]
        return out if b is None else [o + bj for o, bj in zip(out, b)]

    def gelu(z):
        return 0.5 * z * (1 + math.tanh(math.sqrt(2 / math.pi) * (z + 0.044715 * z ** 3)))

    P = {k: v.tolist() for k, v in p.items()}
    xs = []
    for pos, tok in enumerate(ids):
        e = P["input_embedding"][tok]
        if "input_proj" in P:
            e = lin(e, P["input_proj"])
        e = [a + b + t for a, b, t in zip(e, P["position_embedding"][pos], P["type_embedding"][0])]
        xs.append(ln(e, P["embedding_ln.gamma"], P["embedding_ln.beta"]))
    d = c.head_dim
    for layer in range(c.layers):
        L = lambda n: P[f"layer.{layer}.{n}"]
        q = [lin(x, L("attn.q.weight"), L("attn.q.bias")) for x in xs]
        k = [lin(x, L("attn.k.weight"), L("attn.k.bias")) for x in xs]
        v = [lin(x, L("attn.v.weight"), L("attn.v.bias")) for x in xs]
        new = []
        for i in range(len(xs)):
            ctx = []
            for h in range(c.heads):
                sl = slice(h * d, (h + 1) * d)
                s = [sum(a * b for a, b in zip(q[i][sl], k[j][sl])) / math.sqrt(d) + (0 if mask[j] else -1e9)
                     for j in range(len(xs))]
                mx = max(s)
                w = [math.exp(z - mx) for z in s]
                w = [z / sum(w) for z in w]
                ctx += [sum(w[j] * v[j][sl][t] for j in range(len(xs))) for t in range(d)]
            a = lin(ctx, L("attn.o.weight"), L("attn.o.bias"))
            x = ln([p_ + q_ for p_, q_ in zip(xs[i], a)], L("attn_ln.gamma"), L("attn_ln.beta"))
            f = [gelu(z) for z in lin(x, L("ffn.in.weight"), L("ffn.in.bias"))]
            f = lin(f, L("ffn.out.weight"), L("ffn.out.bias"))
            new.append(ln([p_ + q_ for p_, q_ in zip(x, f)], L("ffn_ln.gamma"), L("ffn_ln.beta")))
        xs = new
    out_w = P["output_embedding"] if "output_embedding" in P else np.array(P["input_embedding"]).T.tolist()
    logits = []
    for x in xs:
        if "output_proj" in P:
            x = lin(x, P["output_proj"])
        x = ln([gelu(z) for z in x], P["mlm_ln.gamma"], P["mlm_ln.beta"])
        logits.append(lin(x, out_w, P["output_bias"]))
    return np.array(logits)


def random_model(c, seed=0, scale=0.5):
    rng = np.random.default_rng(seed)
    return from_arrays(c, {n: rng.normal(size=s) * scale for n, s in param_shapes(c)})


@pytest.mark.parametrize("kw", [
    dict(vocab_size=7, input_dim=3, output_dim=5, hidden=4, layers=2, heads=2, ffn_dim=6, max_positions=6),
    dict(vocab_size=7, input_dim=4, output_dim=4, hidden=4, layers=1, heads=1, ffn_dim=8, max_positions=6,
         coupled=True),
])
def test_forward_matches_loop_reference(kw):
    c = tiny_config(**kw)
    m = random_model(c)
    ids = np.array([[2, 5, 6, 3, 0]])
    mask = ids != 0
    mb = MaskedBatch(ids, np.zeros_like(ids), mask, positions=np.arange(5), targets=np.zeros(5, dtype=np.int64))
    got = forward_mlm(m, mb).data
    want = reference_logits(c, m.arrays(), ids[0].tolist(), mask[0].tolist())
    np.testing.assert_allclose(got, want, rtol=1e-9, atol=1e-9)


def test_build_matches_budget(tiny):
    m = build(tiny)
    b = count_params(tiny)
    assert m.num_params() == b.pretrain_count
    assert to_finetune(m).num_params() == b.finetune_count


def test_projection_omitted_when_width_equals_hidden():
    names = [n for n, _ in param_shapes(tiny_config(input_dim=8, output_dim=8))]
    assert "input_proj" not in names and "output_proj" not in names


def test_coupled_output_is_transposed_input():
    m = build(tiny_config(input_dim=6, output_dim=6, coupled=True))
    assert "output_embedding" not in m.params
    assert np.shares_memory(m.output_embedding(), m.params["input_embedding"].data)


def test_init_statistics():
    m = build(tiny_config(vocab_size=2000, input_dim=64), seed=3)
    w = m.params["input_embedding"].data
    assert abs(w.std() - 0.02) < 0.003 and np.abs(w).max() <= 0.04 + 1e-7
    assert np.all(m.params["layer.0.attn.q.bias"].data == 0)
    assert np.all(m.params["embedding_ln.gamma"].data == 1)


def test_padding_does_not_leak(tiny):
    m = random_model(tiny, seed=1)
    ids = np.array([[2, 6, 7, 3]])
    padded = np.array([[2, 6, 7, 3, 0, 0]])
    a = encode(m, Batch.from_ids(ids))
    b = encode(m, Batch.from_ids(padded, attention_mask=padded != 0))
    for la, lb in zip(a.states, b.states):
        np.testing.assert_allclose(la, lb[:, :4], atol=1e-10)


def test_encode_returns_every_layer(tiny):
    acts = encode(build(tiny_config(layers=3)), Batch.from_ids(np.array([[2, 5, 3]])))
    assert len(acts) == 4 and acts[0].shape == (1, 3, 8)


def test_out_of_range_token_is_rejected(tiny):
    with pytest.raises(IndexError, match="outside vocabulary"):
        hidden_states(build(tiny), Batch.from_ids(np.array([[2, 99, 3]])))


def test_finetune_model_has_no_mlm_head(tiny):
    ft = to_finetune(build(tiny))
    assert not ft.has_output_side and ft.stage == "finetune"
    with pytest.raises(StateError):
        ft.output_embedding()
    mb = MaskedBatch(np.array([[2, 5, 3]]), np.zeros((1, 3), dtype=np.int64), np.ones((1, 3), bool),
                     positions=np.array([1]), targets=np.array([5]))
    with pytest.raises(StateError):
        mlm_loss(ft, mb)


@pytest.mark.parametrize("keep", [1, 2, 3])
def test_truncation_removes_whole_layers(keep):
    c = tiny_config(layers=3)
    m = build(c)
    t = truncate_layers(m, keep)
    assert m.num_params() - t.num_params() == (3 - keep) * per_layer_params(c)
    assert t.config.layers == keep
    np.testing.assert_array_equal(t.params["layer.0.attn.q.weight"].data, m.params["layer.0.attn.q.weight"].data)


def test_truncation_bounds(tiny):
    with pytest.raises(ValueError):
        truncate_layers(build(tiny), 0)


def test_mlm_loss_gradient_float64():
    c = tiny_config()
    m = build(c, seed=2, dtype=np.float64)
    ids = np.array([[2, 5, 9, 3], [2, 11, 3, 0]])
    mb = MaskedBatch(ids, np.zeros_like(ids), ids != 0, positions=np.array([1, 2, 5]), targets=np.array([6, 7, 8]))
    names = list(m.params)

    def loss(*ts):
        for n, t in zip(names, ts):
            m.params[n] = t
        return mlm_loss(m, mb)

    assert grad_check(loss, [m.params[n] for n in names]) < 1e-6


@given(st.integers(1, 3), st.sampled_from([4, 8]), st.sampled_from([3, 8, 12]), st.booleans())
def test_live_counts_match_formula(layers, hidden, e_out, coupled):
    c = tiny_config(layers=layers, hidden=hidden, heads=2, ffn_dim=2 * hidden, output_dim=e_out,
                    input_dim=e_out if coupled else 5, coupled=coupled)
    b = count_params(c)
    m = build(c)
    assert m.num_params() == b.pretrain_count
    assert to_finetune(m).num_params() == b.finetune_count
