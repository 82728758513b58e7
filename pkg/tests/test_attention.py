import numpy as np
import pytest

from conftest import make_params
from psb.attention import (AttentionConfig, MultiHeadAttention, RelPosBias, StarvedSlotError,
                           causal_mask, dot_attention, expand_time_mask, grouped_attention,
                           inverted_attention, inverted_weights, offset_index, rel_bias_lookup)
from psb.numerics import Param, Tensor, grad_check


def loop_inverted(q, k, v, mask=None, bias=None):
    """Scalar-loop reference: softmax over (head, query) per key, then per-row renorm."""
    h, nq, d = q.shape
    nk = k.shape[1]
    logits = np.einsum("hqd,hkd->hqk", q, k) / np.sqrt(d)
    if bias is not None:
        logits = logits + bias
    w = np.zeros_like(logits)
    for j in range(nk):
        cells = [(a, i) for a in range(h) for i in range(nq) if mask is None or mask[a, i, j]]
        if not cells:
            continue
        m = max(logits[a, i, j] for a, i in cells)
        z = sum(np.exp(logits[a, i, j] - m) for a, i in cells)
        for a, i in cells:
            w[a, i, j] = np.exp(logits[a, i, j] - m) / z
    w = w / w.sum(axis=-1, keepdims=True)
    return np.einsum("hqk,hkd->hqd", w, v)


def loop_dot(q, k, v, mask=None):
    h, nq, d = q.shape
    out = np.zeros((h, nq, v.shape[-1]))
    for a in range(h):
        for i in range(nq):
            s = k[a] @ q[a, i] / np.sqrt(d)
            vis = np.ones(len(s), bool) if mask is None else mask[a, i]
            e = np.where(vis, np.exp(s - s[vis].max()), 0.0)
            out[a, i] = (e / e.sum()) @ v[a]
    return out


def test_causal_mask_is_lower_triangular():
    m = causal_mask(4)
    assert m.dtype == bool
    assert all(m[i, j] == (j <= i) for i in range(4) for j in range(4))


def test_expand_time_mask_blocks():
    alpha = causal_mask(2)
    big = expand_time_mask(alpha, 2, 3)
    assert big.shape == (4, 6)
    assert big[:2, :3].all() and not big[:2, 3:].any() and big[2:].all()


def test_offset_index_clamps():
    idx = offset_index(np.arange(5), np.arange(5), t_max=3)
    assert idx[0, 0] == 2
    assert idx[4, 0] == 4     # offset 4 clamped to +2
    assert idx[0, 4] == 0     # offset -4 clamped to -2


def test_rel_bias_depends_only_on_offset(rng):
    b = RelPosBias(heads=2, t_max=4)
    b.table.data = rng.standard_normal(b.table.shape)
    tab = b.lookup(4, 4).data
    assert tab.shape == (2, 4, 4)
    for d in range(-3, 4):
        diag = np.diagonal(tab, offset=-d, axis1=1, axis2=2)
        np.testing.assert_array_equal(diag, np.broadcast_to(diag[:, :1], diag.shape))
    shifted = rel_bias_lookup(b, 2, 2, q_start=1, k_start=1).data
    np.testing.assert_array_equal(shifted, tab[:, 1:3, 1:3])


def test_attention_config_validates_heads():
    with pytest.raises(ValueError):
        AttentionConfig(dim=10, heads=3)


def test_dot_attention_matches_loop(rng):
    q, k, v = (rng.standard_normal(s) for s in [(2, 3, 4), (2, 5, 4), (2, 5, 3)])
    mask = rng.random((2, 3, 5)) < 0.7
    mask[..., 0] = True
    out = dot_attention(Tensor(q), Tensor(k), Tensor(v), mask=mask).data
    np.testing.assert_allclose(out, loop_dot(q, k, v, mask), atol=1e-12)


def test_dot_attention_fully_masked_row_raises(rng):
    q, k, v = (Tensor(rng.standard_normal((1, 2, 4))) for _ in range(3))
    mask = np.array([[[True, True], [False, False]]])
    with pytest.raises(ValueError):
        dot_attention(q, k, v, mask=mask)


def test_inverted_attention_matches_loop(rng):
    q, k, v = (rng.standard_normal(s) for s in [(3, 4, 2), (3, 6, 2), (3, 6, 5)])
    bias = rng.standard_normal((3, 4, 6))
    mask = rng.random((3, 4, 6)) < 0.8
    mask[:, :, 0] = True
    out = inverted_attention(Tensor(q), Tensor(k), Tensor(v), mask=mask, bias=Tensor(bias)).data
    np.testing.assert_allclose(out, loop_inverted(q, k, v, mask, bias), atol=1e-12)


def test_inverted_columns_and_rows_normalize(rng):
    q, k = Tensor(rng.standard_normal((2, 3, 4))), Tensor(rng.standard_normal((2, 7, 4)))
    col, row = inverted_weights(q, k)
    np.testing.assert_allclose(col.data.sum(axis=(0, 1)), 1.0, atol=1e-12)
    np.testing.assert_allclose(row.data.sum(axis=-1), 1.0, atol=1e-12)


@pytest.mark.parametrize("inverted", [True, False])
def test_grouped_attention_matches_per_group_calls(rng, inverted):
    B, h, G, n, K, d = 2, 3, 4, 2, 10, 5
    q = rng.standard_normal((B, h, G * n, d))
    k, v = rng.standard_normal((B, h, K, d)), rng.standard_normal((B, h, K, d))
    bias = rng.standard_normal((G, h, 1, K))
    mask = rng.random((G, 1, 1, K)) < 0.7
    mask[..., 0] = True
    out = grouped_attention(Tensor(q), Tensor(k), Tensor(v), G, mask=mask, bias=Tensor(bias),
                            inverted=inverted).data
    kernel = inverted_attention if inverted else dot_attention
    for g in range(G):
        rows = slice(g * n, (g + 1) * n)
        ref = kernel(Tensor(q[:, :, rows]), Tensor(k), Tensor(v), mask=mask[g],
                     bias=Tensor(bias[g])).data
        np.testing.assert_allclose(out[:, :, rows], ref, atol=1e-12)


def test_grouped_attention_gradients(rng):
    q, k, v = (Param(rng.standard_normal(s), name=n)
               for s, n in [((1, 2, 6, 3), "q"), ((1, 2, 5, 3), "k"), ((1, 2, 5, 3), "v")])
    w = rng.standard_normal((1, 2, 6, 3))
    mask = np.tril(np.ones((3, 5), dtype=bool), k=1)[:, None, None, :]
    report = grad_check(lambda: (grouped_attention(q, k, v, 3, mask=mask) * w).sum(), [q, k, v])
    assert report.passed, report.per_param


def test_single_query_inverted_is_uniform_average(rng):
    q, k, v = (rng.standard_normal(s) for s in [(1, 1, 4), (1, 5, 4), (1, 5, 3)])
    out = inverted_attention(Tensor(q), Tensor(k), Tensor(v)).data
    np.testing.assert_allclose(out[0, 0], v[0].mean(axis=0), atol=1e-12)


def test_fully_masked_key_column_gets_zero_weight(rng):
    q, k = Tensor(rng.standard_normal((1, 2, 3))), Tensor(rng.standard_normal((1, 3, 3)))
    mask = np.array([[[True, True, False], [True, True, False]]])
    col, row = inverted_weights(q, k, mask=mask)
    np.testing.assert_array_equal(col.data[..., 2], 0.0)
    np.testing.assert_allclose(row.data.sum(-1), 1.0, atol=1e-12)


def test_starved_slot_raises():
    q = Tensor(np.array([[[50.0], [-50.0]]]))
    k = Tensor(np.array([[[50.0]]]))
    with pytest.raises(StarvedSlotError):
        inverted_weights(q, k)
    # a slot with every key hidden is starved as well
    mask = np.array([[[True], [False]]])
    with pytest.raises(StarvedSlotError):
        inverted_weights(Tensor(np.ones((1, 2, 1))), Tensor(np.ones((1, 1, 1))), mask=mask)


def test_mha_zero_out_returns_bias(rng):
    mha = MultiHeadAttention(rng, 8, 2, zero_out=True)
    mha.b_o.data = rng.standard_normal(8)
    x = Tensor(rng.standard_normal((3, 5, 8)))
    np.testing.assert_array_equal(mha(x).data, np.broadcast_to(mha.b_o.data, (3, 5, 8)))


def test_mha_split_merge_roundtrip(rng):
    mha = MultiHeadAttention(rng, 12, 3)
    x = Tensor(rng.standard_normal((2, 5, 12)))
    s = mha.split(x)
    assert s.shape == (2, 3, 5, 4)
    np.testing.assert_array_equal(mha.merge(s).data, x.data)


def test_mha_heads_match_loop(rng):
    mha = MultiHeadAttention(rng, 6, 2)
    xq, xkv = rng.standard_normal((3, 6)), rng.standard_normal((4, 6))
    got = mha(Tensor(xq), Tensor(xkv), inverted=True).data
    split = lambda x: x.reshape(x.shape[0], 2, 3).transpose(1, 0, 2)  # noqa: E731
    q, k, v = split(xq @ mha.w_q.data), split(xkv @ mha.w_k.data), split(xkv @ mha.w_v.data)
    heads = loop_inverted(q, k, v).transpose(1, 0, 2).reshape(3, 6)
    np.testing.assert_allclose(got, heads @ mha.w_o.data + mha.b_o.data, atol=1e-12)


def test_mha_dim_heads_validation(rng):
    with pytest.raises(ValueError):
        MultiHeadAttention(rng, 10, 4)


@pytest.mark.parametrize("inverted", [False, True])
def test_mha_gradients_with_mask_and_bias(inverted):
    rng = np.random.default_rng(3)
    mha = MultiHeadAttention(rng, 4, 2)
    bias = RelPosBias(2, 3)
    bias.table.data = rng.standard_normal(bias.table.shape)
    mha.assign_names("mha.")
    bias.assign_names("bias.")
    x = make_params(rng, (3, 4))[0]
    mask = causal_mask(3)[None]
    w = rng.standard_normal((3, 4))
    params = mha.params() + bias.params() + [x]
    report = grad_check(lambda: (mha(x, mask=mask, bias=bias.lookup(3, 3), inverted=inverted) * w).sum(),
                        params, tol=1e-6)
    assert report.passed, report.per_param
