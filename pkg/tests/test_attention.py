import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from capsattn import tensor as T
from capsattn.attention import (
    AttentionMask,
    MultiHeadAttention,
    MultiHeadConfig,
    multi_head_attention,
    project_heads,
    scaled_dot_attention,
)
from capsattn.errors import ConfigError, ShapeError
from capsattn.tensor import Tensor


def test_single_key(f64):
    v = Tensor([[2.5, -1.0]])
    out, w = scaled_dot_attention(Tensor([[0.3, 0.1]]), Tensor([[1.0, 4.0]]), v)
    assert w.data.tolist() == [[1.0]]
    np.testing.assert_array_equal(out.data, v.data)


def test_two_key_closed_form(f64):
    out, w = scaled_dot_attention(Tensor([[1.0]]), Tensor([[1.0], [3.0]]), Tensor([[10.0], [20.0]]))
    e1, e3 = np.exp(1.0), np.exp(3.0)
    np.testing.assert_allclose(w.data, [[e1 / (e1 + e3), e3 / (e1 + e3)]], rtol=1e-12)
    np.testing.assert_allclose(w.data, [[0.11920, 0.88080]], atol=1e-5)
    np.testing.assert_allclose(out.data, [[18.8080]], atol=1e-4)


def test_equal_logits_average(f64):
    out, w = scaled_dot_attention(Tensor([[1.0, 0.0]]), Tensor([[0.0, 1.0], [0.0, 2.0]]), Tensor([[1.0], [3.0]]))
    np.testing.assert_allclose(w.data, [[0.5, 0.5]])
    np.testing.assert_allclose(out.data, [[2.0]])


def test_random_matches_oracle_with_mask(f64, rng):
    q, k, v = rng.standard_normal((5, 4)), rng.standard_normal((6, 4)), rng.standard_normal((6, 3))
    keep = rng.random((5, 6)) > 0.4
    keep[:, 0] = True
    out, w = scaled_dot_attention(Tensor(q), Tensor(k), Tensor(v), AttentionMask("padding", keep))
    ref_out, ref_w = oracles.attention(q, k, v, keep)
    np.testing.assert_allclose(w.data, ref_w, atol=1e-12)
    np.testing.assert_allclose(out.data, ref_out, atol=1e-12)
    assert (w.data[~keep] == 0).all()


def test_fully_masked_row_rejected():
    keep = np.ones((3, 4), dtype=bool)
    keep[1] = False
    with pytest.raises(ShapeError):
        AttentionMask("padding", keep)


def test_all_padding_source_rejected():
    with pytest.raises(ShapeError):
        AttentionMask.padding(np.array([[True, True], [False, False]]), 3)


def test_mask_shape_mismatch(f64):
    with pytest.raises(ShapeError):
        scaled_dot_attention(Tensor(np.ones((2, 4))), Tensor(np.ones((3, 4))), Tensor(np.ones((3, 2))),
                             AttentionMask.none(2, 5))


def test_causal_mask_pattern():
    assert AttentionMask.causal(3).keep.tolist() == [[True, False, False], [True, True, False], [True, True, True]]


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 10_000))
def test_rows_sum_to_one_and_masked_zero(q, s, seed):
    rng = np.random.default_rng(seed)
    keep = rng.random((q, s)) > 0.5
    keep[np.arange(q), rng.integers(0, s, size=q)] = True
    _, w = scaled_dot_attention(Tensor(rng.standard_normal((q, 4))), Tensor(rng.standard_normal((s, 4))),
                                Tensor(rng.standard_normal((s, 2))), AttentionMask("padding", keep))
    np.testing.assert_allclose(w.data.sum(-1), 1.0, atol=1e-6)
    assert (w.data[~keep] == 0).all()


def test_key_permutation_equivariance(f64, rng):
    q, k, v = rng.standard_normal((3, 4)), rng.standard_normal((5, 4)), rng.standard_normal((5, 2))
    keep = rng.random((3, 5)) > 0.3
    keep[:, 2] = True
    perm = rng.permutation(5)
    out, w = scaled_dot_attention(Tensor(q), Tensor(k), Tensor(v), AttentionMask("padding", keep))
    out_p, w_p = scaled_dot_attention(Tensor(q), Tensor(k[perm]), Tensor(v[perm]), AttentionMask("padding", keep[:, perm]))
    np.testing.assert_allclose(w_p.data, w.data[:, perm], atol=1e-14)
    np.testing.assert_allclose(out_p.data, out.data, atol=1e-12)


class TestProjectHeads:
    def test_identity_single_head(self, f64, rng):
        x = Tensor(rng.standard_normal((3, 4)))
        (qi, ki, vi), = project_heads(x, x, x, [np.eye(4)], [np.eye(4)], [np.eye(4)])
        np.testing.assert_array_equal(qi.data, x.data)

    def test_zero_query_projection(self, f64, rng):
        x = Tensor(rng.standard_normal((3, 4)))
        w = rng.standard_normal((4, 2))
        heads = project_heads(x, x, x, [np.zeros((4, 2)), w], [w, w], [w, w])
        assert not heads[0][0].data.any()

    def test_random_against_loop(self, f64, rng):
        x = rng.standard_normal((3, 8))
        ws = [rng.standard_normal((8, 2)) for _ in range(12)]
        heads = project_heads(Tensor(x), Tensor(x), Tensor(x), ws[0:4], ws[4:8], ws[8:12])
        for i, (qi, ki, vi) in enumerate(heads):
            for got, w in ((qi, ws[i]), (ki, ws[4 + i]), (vi, ws[8 + i])):
                ref = [[sum(x[a, p] * w[p, b] for p in range(8)) for b in range(2)] for a in range(3)]
                np.testing.assert_allclose(got.data, ref, atol=1e-12)

    def test_shape_mismatch(self, rng):
        x = Tensor(rng.standard_normal((3, 4)))
        with pytest.raises(ShapeError):
            project_heads(x, x, x, [np.ones((5, 2))], [np.ones((4, 2))], [np.ones((4, 2))])


class TestMultiHead:
    def test_config_invariant(self):
        assert MultiHeadConfig(64, 4).d_k == 16
        with pytest.raises(ConfigError):
            MultiHeadConfig(10, 4)

    def test_single_head_is_plain_attention(self, f64, rng):
        x = rng.standard_normal((1, 5, 4))
        w = [rng.standard_normal((4, 4)) for _ in range(3)]
        mh = multi_head_attention(Tensor(x), Tensor(x), Tensor(x), [w[0]], [w[1]], [w[2]])
        out, _ = scaled_dot_attention(Tensor(x @ w[0]), Tensor(x @ w[1]), Tensor(x @ w[2]))
        np.testing.assert_allclose(mh.u.data, out.data, atol=1e-12)

    def test_zero_value_head(self, f64, rng):
        x = Tensor(rng.standard_normal((2, 3, 4)))
        w = [rng.standard_normal((4, 2)) for _ in range(2)]
        mh = multi_head_attention(x, x, x, w, w, [w[0], np.zeros((4, 2))])
        assert not mh.u.data[..., 2:].any()
        assert mh.u.data[..., :2].any()

    def test_four_heads_against_sequential_oracle(self, f64, rng):
        B, n, d, h = 2, 5, 8, 4
        x = rng.standard_normal((B, n, d))
        mem = rng.standard_normal((B, 6, d))
        wq, wk, wv = (rng.standard_normal((h, d, d // h)) for _ in range(3))
        keep = np.ones((B, 6), dtype=bool)
        keep[1, 4:] = False
        mh = multi_head_attention(Tensor(x), Tensor(mem), Tensor(mem), Tensor(wq), Tensor(wk), Tensor(wv),
                                  AttentionMask.padding(keep, n))
        assert mh.u.shape == (B, n, d)
        for b in range(B):
            kb = np.tile(keep[b], (n, 1))
            heads = [oracles.attention(x[b] @ wq[i], mem[b] @ wk[i], mem[b] @ wv[i], kb)[0] for i in range(h)]
            np.testing.assert_allclose(mh.u.data[b], np.concatenate(heads, -1), atol=1e-12)
            for i in range(h):
                np.testing.assert_array_equal(mh.heads[i].data[b], mh.capsules().data[b, :, i])

    def test_module_output_width(self, rng):
        layer = MultiHeadAttention(MultiHeadConfig(16, 4), rng)
        x = Tensor(rng.standard_normal((2, 3, 16)).astype(np.float32))
        assert layer(x, x, x).shape == (2, 3, 16)
        names = [n for n, _ in layer.named_parameters()]
        assert names == ["w_q", "w_k", "w_v", "w_o", "b_o"]


def test_attention_gradients(rng):
    from capsattn.gradcheck import check

    with T.precision(np.float64):
        x = Tensor(rng.standard_normal((2, 4, 8)))
        wq, wk, wv = (Tensor(rng.standard_normal((2, 8, 4))) for _ in range(3))
        r = rng.standard_normal((2, 4, 8))
        mask = AttentionMask.causal(4)

        def loss():
            return (multi_head_attention(x, x, x, wq, wk, wv, mask).u * r).sum()

        res = check(loss, [("x", x), ("w_q", wq), ("w_k", wk), ("w_v", wv)])
    assert max(b.max_rel for b in res) < 1e-5
