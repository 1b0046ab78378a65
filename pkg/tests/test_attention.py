"""Windowed graph-attention SS operation and SS output layer."""
import numpy as np
import pytest

from oracles import naive_attention, numeric_grad, rel_err
from sdconv.attention import (
    AttentionParams,
    attention_backward,
    attention_window,
    count_attention_params,
    dilated_output_params,
    ss_attention_layer,
    ss_output_backward,
    ss_output_layer,
)
from sdconv.tensor import ConvWeights, DilatedConvSpec, ShapeError


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


def _params(rng, d=3, d_k=4, d_o=2, heads=2, window=3, bound=0.8):
    return AttentionParams.init(d, d_k, d_o, heads, window, rng, bound=bound)


class TestHandOracle:
    """d=2, d_k=d_o=1 on a 1x2 image: each node sees itself and the other node.

    Node A = (1, 0), node B = (0, 2); W_q = (1, 1), W_k = (2, -1), W_v = (1, 3).
    At A: q = 1, keys (A, B) = (2, -2), logits (2, -2), values (1, 6),
    alpha_A = 1 / (1 + e^-4) = 0.98201379..., output = 1 + 5 (1 - alpha_A).
    At B: q = 2, logits (4, -4), alpha_A = 1 / (1 + e^-8), output = 1 + 5 (1 - alpha_A).
    """

    params = AttentionParams(np.array([[[1.0, 1.0]]]), np.array([[[2.0, -1.0]]]),
                             np.array([[[1.0, 3.0]]]), window=3)
    x = np.array([[[[1.0, 0.0]], [[0.0, 2.0]]]])  # (1, 2, 1, 2)

    def test_layer_output(self):
        out = ss_attention_layer(self.x, self.params)
        assert out.shape == (1, 1, 1, 2)
        assert out[0, 0, 0, 0] == pytest.approx(1.0899310498104577, rel=1e-13)
        assert out[0, 0, 0, 1] == pytest.approx(1.0016767506523319, rel=1e-13)

    def test_single_window(self):
        neighbors = np.array([[1.0, 0.0], [0.0, 2.0]])
        out, alpha = attention_window(neighbors[0], neighbors, [True, True], self.params)
        assert alpha[0] == pytest.approx(0.9820137900379085, rel=1e-13)
        assert out[0] == pytest.approx(1.0899310498104577, rel=1e-13)


class TestAttentionWindow:
    def test_zero_query_gives_uniform_weights(self, rng):
        p = _params(rng, d=3, d_k=2, d_o=2, heads=1)
        p = AttentionParams(np.zeros_like(p.w_q), p.w_k, p.w_v, p.window)
        nb = rng.standard_normal((9, 3))
        valid = np.array([1, 1, 0, 1, 1, 0, 0, 0, 1], dtype=bool)
        out, alpha = attention_window(nb[4], nb, valid, p)
        np.testing.assert_allclose(alpha[valid], 1 / 5, rtol=1e-14)
        assert not alpha[~valid].any()
        np.testing.assert_allclose(out, (nb[valid] @ p.w_v[0].T).mean(axis=0), rtol=1e-13)

    def test_single_node_window(self, rng):
        p = _params(rng, window=1, heads=1)
        mu = rng.standard_normal(3)
        out, alpha = attention_window(mu, mu[None], [True], p)
        assert alpha.tolist() == [1.0]
        np.testing.assert_allclose(out, p.w_v[0] @ mu, rtol=1e-14)

    def test_no_valid_neighbor_rejected(self, rng):
        with pytest.raises(ValueError):
            attention_window(np.zeros(3), np.zeros((9, 3)), np.zeros(9, bool), _params(rng))


class TestLayer:
    @pytest.mark.parametrize("window,h,w", [(1, 3, 4), (3, 4, 5), (5, 3, 3), (7, 2, 6)])
    def test_matches_per_location_oracle(self, rng, window, h, w):
        p = _params(rng, window=window)
        x = rng.standard_normal((2, 3, h, w))
        expected, _ = naive_attention(x, p.w_q, p.w_k, p.w_v, window)
        assert rel_err(ss_attention_layer(x, p), expected) < 1e-12

    def test_valid_counts_on_three_by_three(self, rng):
        p = _params(rng, heads=1)
        _, alpha = ss_attention_layer(rng.standard_normal((1, 3, 3, 3)), p, return_alpha=True)
        counts = np.count_nonzero(alpha[0, 0], axis=(0, 1))
        np.testing.assert_array_equal(counts, [[4, 6, 4], [6, 9, 6], [4, 6, 4]])

    @pytest.mark.parametrize("window", [3, 5, 9])
    def test_normalized_and_zero_on_padding(self, rng, window):
        p = _params(rng, window=window)
        h, w = 6, 7
        _, alpha = ss_attention_layer(rng.standard_normal((2, 3, h, w)), p, return_alpha=True)
        np.testing.assert_allclose(alpha.sum(axis=(2, 3)), 1.0, rtol=0, atol=1e-12)
        half = window // 2
        for a in range(window):
            for b in range(window):
                ys = np.arange(h) + a - half
                xs = np.arange(w) + b - half
                outside = ~(((ys >= 0) & (ys < h))[:, None] & ((xs >= 0) & (xs < w))[None, :])
                assert not alpha[:, :, a, b][..., outside].any()

    def test_global_window_sees_same_set(self, rng):
        p = _params(rng, window=11, heads=1)
        _, alpha = ss_attention_layer(rng.standard_normal((1, 3, 4, 5)), p, return_alpha=True)
        support = alpha[0, 0] > 0
        # every location's support, shifted back to image coordinates, is the whole image
        for i in range(4):
            for j in range(5):
                assert support[5 - i : 9 - i, 5 - j : 10 - j, i, j].all()
                assert support[..., i, j].sum() == 20

    def test_constant_input_gives_constant_output(self, rng):
        p = _params(rng, window=5)
        x = np.ones((1, 3, 6, 6)) * rng.standard_normal((1, 3, 1, 1))
        out = ss_attention_layer(x, p)
        np.testing.assert_allclose(out, out[:, :, :1, :1] * np.ones_like(out), rtol=1e-13)

    def test_head_permutation(self, rng):
        p = _params(rng, heads=3, d_o=2)
        x = rng.standard_normal((1, 3, 4, 4))
        perm = [2, 0, 1]
        q = AttentionParams(p.w_q[perm], p.w_k[perm], p.w_v[perm], p.window)
        out, out_perm = ss_attention_layer(x, p), ss_attention_layer(x, q)
        for new, old in enumerate(perm):
            np.testing.assert_array_equal(out_perm[:, 2 * new : 2 * new + 2], out[:, 2 * old : 2 * old + 2])

    def test_query_scaling_keeps_argmax(self, rng):
        p = _params(rng, heads=1)
        x = rng.standard_normal((1, 3, 5, 5))
        _, a1 = ss_attention_layer(x, p, return_alpha=True)
        q = AttentionParams(3.0 * p.w_q, p.w_k, p.w_v, p.window)
        _, a3 = ss_attention_layer(x, q, return_alpha=True)
        flat = lambda a: a[0, 0].reshape(9, 25).argmax(axis=0)
        np.testing.assert_array_equal(flat(a1), flat(a3))

    def test_rejects_channel_mismatch(self, rng):
        with pytest.raises(ShapeError):
            ss_attention_layer(np.zeros((1, 4, 3, 3)), _params(rng, d=3))

    def test_rejects_even_window(self, rng):
        with pytest.raises(ValueError):
            _params(rng, window=4)


class TestParameterCounts:
    def test_independent_of_window(self, rng):
        a = AttentionParams.init(16, 8, 8, 2, 5, rng)
        b = AttentionParams.init(16, 8, 8, 2, 31, rng)
        assert a.num_params() == b.num_params() == count_attention_params(16, 8, 8, heads=2)

    def test_large_head(self):
        assert count_attention_params(2048, 512, 512) == 3_145_728

    def test_dilated_comparators(self):
        largefov = dilated_output_params(2048, 512)
        aspp = dilated_output_params(2048, 512, branches=4)
        assert largefov == 9_437_696
        assert aspp == 37_750_784
        assert count_attention_params(2048, 512, 512) < largefov < aspp


class TestBackward:
    def test_zero_upstream(self, rng):
        p = _params(rng)
        x = rng.standard_normal((1, 3, 4, 4))
        gx, g = attention_backward(x, p, np.zeros((1, 4, 4, 4)))
        assert not gx.any() and not g.w_q.any() and not g.w_k.any() and not g.w_v.any()

    @pytest.mark.parametrize("window", [3, 5])
    def test_matches_central_differences(self, rng, window):
        p = _params(rng, window=window)
        x = rng.standard_normal((1, 3, 3, 4))
        cot = rng.standard_normal((1, 4, 3, 4))
        gx, g = attention_backward(x, p, cot)

        def f(x_=x, **kw):
            fields = dict(w_q=p.w_q, w_k=p.w_k, w_v=p.w_v)
            fields.update(kw)
            return np.sum(cot * ss_attention_layer(x_, AttentionParams(**fields, window=p.window)))

        assert rel_err(gx, numeric_grad(lambda v: f(x_=v), x)) < 1e-4
        for name in ("w_q", "w_k", "w_v"):
            num = numeric_grad(lambda v, n=name: f(**{n: v}), getattr(p, name))
            assert rel_err(getattr(g, name), num) < 1e-4

    def test_padding_contributes_no_gradient(self, rng):
        # On a 3x3 image, windows 5 and 7 differ only by padding positions;
        # outputs and all gradients must agree exactly in value.
        x = rng.standard_normal((1, 3, 3, 3))
        cot = rng.standard_normal((1, 4, 3, 3))
        p5 = _params(rng, window=5)
        p7 = AttentionParams(p5.w_q, p5.w_k, p5.w_v, window=7)
        p3 = AttentionParams(p5.w_q, p5.w_k, p5.w_v, window=3)
        np.testing.assert_allclose(ss_attention_layer(x, p5), ss_attention_layer(x, p7), rtol=1e-14)
        g5, g7 = attention_backward(x, p5, cot), attention_backward(x, p7, cot)
        np.testing.assert_allclose(g5[0], g7[0], rtol=1e-13, atol=1e-15)
        # a 3x3 window misses real corner nodes from the opposite corner, so it differs
        assert not np.allclose(ss_attention_layer(x, p3), ss_attention_layer(x, p5))


class TestOutputLayer:
    def test_shape_and_gradient(self, rng):
        p = _params(rng)
        spec = DilatedConvSpec(1, 1, p.out_channels, 5, bias=True)
        proj = ConvWeights.uniform(spec, rng)
        x = rng.standard_normal((1, 3, 4, 3))
        logits = ss_output_layer(x, p, proj, 5)
        assert logits.shape == (1, 5, 4, 3)
        cot = rng.standard_normal(logits.shape)
        gx, gp, gproj = ss_output_backward(x, p, proj, 5, cot)
        assert rel_err(gx, numeric_grad(lambda v: np.sum(cot * ss_output_layer(v, p, proj, 5)), x)) < 1e-4
        nproj = numeric_grad(lambda v: np.sum(cot * ss_output_layer(x, p, ConvWeights(v, proj.bias), 5)),
                             proj.filters)
        assert rel_err(gproj.filters, nproj) < 1e-6

    def test_rejects_projection_mismatch(self, rng):
        p = _params(rng)
        bad = ConvWeights(np.zeros((5, 3, 1, 1)))
        with pytest.raises(ShapeError):
            ss_output_layer(np.zeros((1, 3, 3, 3)), p, bad, 5)
