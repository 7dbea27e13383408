import math

import numpy as np
import pytest

from tscompose.tensor import Tensor
from tscompose import backbones as B

from oracles import (
    finite_diff_grad,
    rel_grad_error,
    naive_circular_correlation,
    naive_softmax_attention,
)


def _heads(rng, b, h, n, dh):
    return (Tensor(rng.standard_normal((b, h, n, dh))),
            Tensor(rng.standard_normal((b, h, n, dh))),
            Tensor(rng.standard_normal((b, h, n, dh))))


# ---------------------------------------------------------------- self attention

def test_self_attention_matches_loop_reference():
    rng = np.random.default_rng(0)
    q, k, v = _heads(rng, 2, 3, 5, 4)
    out = B.attention(q, k, v, "SelfAttn")
    for b in range(2):
        for h in range(3):
            ref = naive_softmax_attention(q.data[b, h], k.data[b, h], v.data[b, h])
            merged = out.values.data[b].reshape(5, 3, 4)[:, h, :]
            assert np.allclose(merged, ref, atol=1e-6)


def test_self_attention_zero_queries_average_values():
    rng = np.random.default_rng(1)
    v = Tensor(rng.standard_normal((1, 2, 6, 4)))
    zeros = Tensor(np.zeros((1, 2, 6, 4)))
    out = B.attention(zeros, zeros, v, "SelfAttn")
    assert np.allclose(out.weights.data, 1.0 / 6, atol=1e-12)
    expect = v.data.mean(axis=2, keepdims=True)
    got = out.values.data.reshape(1, 6, 2, 4).swapaxes(1, 2)
    assert np.allclose(got, np.broadcast_to(expect, got.shape), atol=1e-12)


def test_dense_weight_rows_sum_to_one():
    rng = np.random.default_rng(2)
    q, k, v = _heads(rng, 2, 4, 7, 8)
    out = B.attention(q, k, v, "SelfAttn")
    assert np.allclose(out.weights.data.sum(axis=-1), 1.0, atol=1e-6)

    tau = Tensor(np.abs(rng.standard_normal((2, 1))) + 0.1)
    delta = Tensor(rng.standard_normal((2, 7)))
    out_d = B.attention(q, k, v, "DestationaryAttn", {"tau": tau, "delta": delta})
    assert np.allclose(out_d.weights.data.sum(axis=-1), 1.0, atol=1e-6)


def test_single_token_attention_is_identity_weight():
    rng = np.random.default_rng(3)
    q, k, v = _heads(rng, 2, 2, 1, 4)
    out = B.attention(q, k, v, "SelfAttn")
    assert np.allclose(out.weights.data, 1.0, atol=1e-12)


# ---------------------------------------------------------------- sparse attention

def test_sparse_budget_rule():
    assert B.sparse_query_budget(8) == math.ceil(5 * math.log(8))
    assert B.sparse_query_budget(1) == 1
    assert B.sparse_query_budget(32) == 18


def test_sparse_degrades_to_dense_bitwise_for_small_n():
    rng = np.random.default_rng(4)
    q, k, v = _heads(rng, 2, 2, 8, 4)   # u = 11 >= 8
    dense = B.attention(q, k, v, "SelfAttn")
    sparse = B.attention(q, k, v, "SparseAttn")
    assert np.array_equal(dense.values.data, sparse.values.data)


def test_sparse_selected_rows_match_dense_and_rest_average():
    rng = np.random.default_rng(5)
    b, h, n, dh = 1, 2, 32, 4
    q, k, v = _heads(rng, b, h, n, dh)
    dense = B.attention(q, k, v, "SelfAttn")
    sparse = B.attention(q, k, v, "SparseAttn")
    assert sparse.selected.shape == (b, h, 18)

    dense_vals = dense.values.data.reshape(n, h, dh)
    sparse_vals = sparse.values.data.reshape(n, h, dh)
    mean_v = v.data.mean(axis=2)  # [b,h,dh]
    for head in range(h):
        chosen = set(sparse.selected[0, head].tolist())
        for i in range(n):
            if i in chosen:
                assert np.allclose(sparse_vals[i, head], dense_vals[i, head], atol=1e-9)
            else:
                assert np.allclose(sparse_vals[i, head], mean_v[0, head], atol=1e-12)
    assert np.allclose(sparse.weights.data.sum(axis=-1), 1.0, atol=1e-6)


# ---------------------------------------------------------------- autocorrelation

def test_fft_correlation_matches_brute_force():
    rng = np.random.default_rng(6)
    q = rng.standard_normal(32)
    k = rng.standard_normal(32)
    got = B.fft_correlation(Tensor(q.reshape(1, 1, 32, 1)),
                            Tensor(k.reshape(1, 1, 32, 1)), axis=2)
    ref = naive_circular_correlation(q, k)
    assert np.allclose(got.data.reshape(32), ref, atol=1e-5)


def test_lag_zero_self_correlation_is_energy():
    rng = np.random.default_rng(7)
    x = rng.standard_normal(16)
    corr = B.fft_correlation(Tensor(x.reshape(1, 1, 16, 1)),
                             Tensor(x.reshape(1, 1, 16, 1)), axis=2).data.reshape(16)
    assert corr[0] == pytest.approx(np.sum(x * x), rel=1e-10)
    assert corr[0] / np.sum(x * x) == pytest.approx(1.0, abs=1e-12)
    assert corr[0] >= corr.max() - 1e-9


def test_autocorrelation_matches_loop_aggregation():
    rng = np.random.default_rng(8)
    b, h, n, dh = 2, 2, 20, 3
    q, k, v = _heads(rng, b, h, n, dh)
    out = B.attention(q, k, v, "AutoCorr")
    top = B.autocorr_delay_count(n)
    assert top == 3

    for bi in range(b):
        for hi in range(h):
            corr = np.array([naive_circular_correlation(q.data[bi, hi, :, d],
                                                        k.data[bi, hi, :, d])
                             for d in range(dh)]).mean(axis=0)
            delays = np.argsort(-corr, kind="stable")[:top]
            w = np.exp(corr[delays] - corr[delays].max())
            w = w / w.sum()
            expect = np.zeros((n, dh))
            for wj, tau in zip(w, delays):
                expect += wj * np.roll(v.data[bi, hi], -tau, axis=0)
            got = out.values.data[bi].reshape(n, h, dh)[:, hi, :]
            assert np.allclose(got, expect, atol=1e-8)
            assert np.array_equal(np.sort(out.selected[bi, hi]), np.sort(delays))


# ---------------------------------------------------------------- frequency attention

def test_frequency_attention_identity_with_full_modes():
    rng = np.random.default_rng(9)
    b, h, n, dh = 2, 2, 12, 4
    _, _, v = _heads(rng, b, h, n, dh)
    kernel_re = Tensor(np.ones((h, n // 2 + 1, dh)))
    kernel_im = Tensor(np.zeros((h, n // 2 + 1, dh)))
    out = B.attention(None, None, v, "FrequencyAttn",
                      {"kernel_re": kernel_re, "kernel_im": kernel_im})
    got = out.values.data.reshape(b, n, h, dh).swapaxes(1, 2)
    assert np.allclose(got, v.data, atol=1e-9)


def test_frequency_attention_truncates_high_modes():
    rng = np.random.default_rng(10)
    b, h, n, dh, m = 1, 1, 16, 2, 3
    v = Tensor(rng.standard_normal((b, h, n, dh)))
    kernel_re = Tensor(np.ones((h, m, dh)))
    kernel_im = Tensor(np.zeros((h, m, dh)))
    out = B.attention(None, None, v, "FrequencyAttn",
                      {"kernel_re": kernel_re, "kernel_im": kernel_im})
    spec = np.fft.rfft(v.data, axis=2)
    spec[:, :, m:, :] = 0.0
    expect = np.fft.irfft(spec, n, axis=2)
    got = out.values.data.reshape(b, n, h, dh).swapaxes(1, 2)
    assert np.allclose(got, expect, atol=1e-9)


# ---------------------------------------------------------------- destationary attention

def test_destationary_neutral_factors_reduce_to_self_attention():
    rng = np.random.default_rng(11)
    q, k, v = _heads(rng, 2, 2, 6, 4)
    base = B.attention(q, k, v, "SelfAttn")
    neutral = B.attention(q, k, v, "DestationaryAttn",
                          {"tau": Tensor(np.ones((2, 1))),
                           "delta": Tensor(np.zeros((2, 6)))})
    assert np.allclose(base.values.data, neutral.values.data, atol=1e-12)


def test_destationary_module_requires_stats():
    rng = np.random.default_rng(12)
    attn = B.MultiHeadAttention(8, "DestationaryAttn", rng, n_tokens=5, stat_dim=6)
    x = Tensor(rng.standard_normal((2, 5, 8)))
    with pytest.raises(ValueError):
        attn(x)
    stats = Tensor(rng.standard_normal((2, 6)))
    out = attn(x, stats)
    assert out.shape == (2, 5, 8)


# ---------------------------------------------------------------- multi-head wrapper

def test_head_permutation_equivalence():
    rng = np.random.default_rng(13)
    d, h, dh = 8, 4, 2
    attn = B.MultiHeadAttention(d, "SelfAttn", rng)
    x = Tensor(rng.standard_normal((2, 5, d)))
    base = attn(x).data.copy()

    perm = np.array([2, 0, 3, 1])
    col_perm = np.concatenate([np.arange(p * dh, (p + 1) * dh) for p in perm])
    for lin in (attn.q_proj, attn.k_proj, attn.v_proj):
        lin.w.data = lin.w.data[:, col_perm]
        lin.b.data = lin.b.data[col_perm]
    attn.out_proj.w.data = attn.out_proj.w.data[col_perm, :]
    permuted = attn(x).data
    assert np.allclose(base, permuted, atol=1e-9)


def test_dispatcher_rejects_unknown_variant():
    rng = np.random.default_rng(14)
    q, k, v = _heads(rng, 1, 1, 3, 2)
    with pytest.raises(ValueError):
        B.attention(q, k, v, "BogusAttn")
    with pytest.raises(ValueError):
        B.MultiHeadAttention(7, "SelfAttn", rng)  # 7 not divisible by 4 heads


# ---------------------------------------------------------------- MLP backbone

def _zero_params(module):
    for _, p in module.params():
        p.data = np.zeros_like(p.data)


def test_mlp_zero_weights_give_double_layernorm():
    rng = np.random.default_rng(15)
    mlp = B.MLPBackbone(d_model=6, d_ff=12, n_layers=1, n_tokens=4, rng=rng)
    for name, p in mlp.params():
        if "ln" not in name:
            p.data = np.zeros_like(p.data)
    x = rng.standard_normal((2, 4, 6))

    def ln(y):
        mu = y.mean(axis=-1, keepdims=True)
        var = ((y - mu) ** 2).mean(axis=-1, keepdims=True)
        return (y - mu) / np.sqrt(var + 1e-5)

    out = mlp(Tensor(x))
    assert np.allclose(out.data, ln(ln(x)), atol=1e-12)


def test_mlp_shape_and_gradient():
    rng = np.random.default_rng(16)
    mlp = B.MLPBackbone(d_model=8, d_ff=16, n_layers=2, n_tokens=5, rng=rng)
    x0 = rng.standard_normal((2, 5, 8))

    def run(arr):
        t = Tensor(arr, requires_grad=True)
        return t, (mlp(t) ** 2).sum()

    t, loss = run(x0)
    assert mlp(Tensor(x0)).shape == (2, 5, 8)
    loss.backward()
    numeric = finite_diff_grad(lambda a: float(run(a)[1].data), x0)
    assert rel_grad_error(t.grad, numeric) < 1e-4


# ---------------------------------------------------------------- GRU backbone

def test_gru_zero_everything_stays_zero():
    rng = np.random.default_rng(17)
    gru = B.GRUBackbone(d_model=4, n_layers=2, rng=rng)
    _zero_params(gru)
    out = gru(Tensor(np.zeros((3, 6, 4))))
    assert np.array_equal(out.data, np.zeros((3, 6, 4)))


def test_gru_hidden_bounded_by_tanh_range():
    rng = np.random.default_rng(18)
    gru = B.GRUBackbone(d_model=8, n_layers=3, rng=rng)
    x = Tensor(5.0 * rng.standard_normal((4, 24, 8)))
    out = gru(x)
    assert np.all(np.abs(out.data) < 1.0)


def test_gru_single_step_matches_hand_arithmetic():
    rng = np.random.default_rng(19)
    layer = B._GRULayer(2, 2, rng, name="g")
    wx = rng.standard_normal((2, 6))
    wh = rng.standard_normal((2, 4))
    wn = rng.standard_normal((2, 2))
    bx = rng.standard_normal(6)
    layer.wx.w.data = wx.copy()
    layer.wx.b.data = bx.copy()
    layer.wh.w.data = wh.copy()
    layer.wn.w.data = wn.copy()

    x_t = rng.standard_normal((1, 2))
    h0 = rng.standard_normal((1, 2))
    got = layer.step(Tensor(x_t), Tensor(h0)).data

    def sigmoid(a):
        return 1.0 / (1.0 + np.exp(-a))

    gx = x_t @ wx + bx
    gh = h0 @ wh
    z = sigmoid(gx[:, 0:2] + gh[:, 0:2])
    r = sigmoid(gx[:, 2:4] + gh[:, 2:4])
    cand = np.tanh(gx[:, 4:6] + (r * h0) @ wn)
    expect = (1.0 - z) * h0 + z * cand
    assert np.allclose(got, expect, atol=1e-12)


def test_gru_shape_and_gradient():
    rng = np.random.default_rng(20)
    gru = B.GRUBackbone(d_model=4, n_layers=2, rng=rng)
    x0 = rng.standard_normal((2, 3, 4))

    def run(arr):
        t = Tensor(arr, requires_grad=True)
        return t, (gru(t) ** 2).sum()

    t, loss = run(x0)
    loss.backward()
    numeric = finite_diff_grad(lambda a: float(run(a)[1].data), x0)
    assert rel_grad_error(t.grad, numeric) < 1e-4


# ---------------------------------------------------------------- transformer backbone

@pytest.mark.parametrize("series", ["SelfAttn", "SparseAttn", "AutoCorr",
                                    "FrequencyAttn", "DestationaryAttn", "Null"])
def test_transformer_shape_preserved_all_series_variants(series):
    rng = np.random.default_rng(21)
    tf = B.TransformerBackbone(d_model=8, d_ff=16, n_layers=2,
                               series_attention=series, feature_attention="Null",
                               n_tokens=6, rng=rng, stat_dim=4)
    x = Tensor(rng.standard_normal((3, 6, 8)))
    stats = Tensor(rng.standard_normal((3, 4))) if series == "DestationaryAttn" else None
    assert tf(x, stats=stats).shape == (3, 6, 8)


def test_transformer_feature_attention_mixes_channels():
    rng = np.random.default_rng(22)
    b, c, n, d = 2, 3, 4, 8
    tf = B.TransformerBackbone(d_model=d, d_ff=16, n_layers=1,
                               series_attention="SelfAttn", feature_attention="SelfAttn",
                               n_tokens=n, rng=rng, channels=c)
    x = Tensor(rng.standard_normal((b * c, n, d)))
    out = tf(x, groups=(b, c))
    assert out.shape == (b * c, n, d)
    with pytest.raises(ValueError):
        tf(x)  # groups omitted
    with pytest.raises(ValueError):
        tf(Tensor(rng.standard_normal((5, n, d))), groups=(b, c))


def test_transformer_gradient_small_config():
    rng = np.random.default_rng(23)
    tf = B.TransformerBackbone(d_model=8, d_ff=12, n_layers=1,
                               series_attention="SelfAttn", feature_attention="Null",
                               n_tokens=4, rng=rng)
    x0 = rng.standard_normal((2, 4, 8))

    def run(arr):
        t = Tensor(arr, requires_grad=True)
        return t, (tf(t) ** 2).sum()

    t, loss = run(x0)
    loss.backward()
    numeric = finite_diff_grad(lambda a: float(run(a)[1].data), x0)
    assert rel_grad_error(t.grad, numeric) < 1e-4


def test_transformer_parameter_gradients_flow():
    rng = np.random.default_rng(24)
    tf = B.TransformerBackbone(d_model=8, d_ff=12, n_layers=1,
                               series_attention="FrequencyAttn", feature_attention="Null",
                               n_tokens=8, rng=rng)
    x = Tensor(rng.standard_normal((2, 8, 8)))
    loss = (tf(x) ** 2).sum()
    loss.backward()
    grads = {name: p.grad for name, p in tf.params()}
    kernel_grads = [g for name, g in grads.items() if "kernel" in name]
    assert kernel_grads and all(g is not None and np.any(g != 0) for g in kernel_grads)


# ---------------------------------------------------------------- factory

def test_factory_enforces_attention_exclusions():
    rng = np.random.default_rng(25)
    with pytest.raises(ValueError):
        B.build_backbone("MLP", d_model=8, d_ff=16, n_layers=2,
                         series_attention="SelfAttn", feature_attention="Null",
                         n_tokens=4, rng=rng)
    with pytest.raises(ValueError):
        B.build_backbone("RNN", d_model=8, d_ff=16, n_layers=2,
                         series_attention="Null", feature_attention="SelfAttn",
                         n_tokens=4, rng=rng)
    for bad in ("LLM", "TSFM", "CNN"):
        with pytest.raises(ValueError):
            B.build_backbone(bad, d_model=8, d_ff=16, n_layers=2,
                             series_attention="Null", feature_attention="Null",
                             n_tokens=4, rng=rng)

    mlp = B.build_backbone("MLP", d_model=8, d_ff=16, n_layers=2,
                           series_attention="Null", feature_attention="Null",
                           n_tokens=4, rng=rng)
    assert isinstance(mlp, B.MLPBackbone)
    rnn = B.build_backbone("RNN", d_model=8, d_ff=16, n_layers=2,
                           series_attention="Null", feature_attention="Null",
                           n_tokens=4, rng=rng)
    assert isinstance(rnn, B.GRUBackbone)
    tf = B.build_backbone("Transformer", d_model=8, d_ff=16, n_layers=2,
                          series_attention="AutoCorr", feature_attention="SelfAttn",
                          n_tokens=4, rng=rng, channels=3)
    assert isinstance(tf, B.TransformerBackbone)
