import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from salcnn import layers as L
from salcnn import numerics as nx
from salcnn.numerics import DimensionError


def _sig(v):
    return 1.0 / (1.0 + math.exp(-v))


def _cbam(rng, c=5, scale=1.0):
    p = L.init_cbam(rng, c)
    for _, a in p.arrays():
        a[...] = rng.standard_normal(a.shape) * scale
    return p


def _zero_cbam(c=5):
    p = L.init_cbam(np.random.default_rng(0), c)
    for _, a in p.arrays():
        a[...] = 0.0
    return p


class TestConvBlock:
    def test_zero_params(self, rng):
        p = L.ConvBlockParams(np.zeros((5, 1, 3, 3)), np.zeros(5))
        assert not L.conv_block_forward(rng.random((1, 11, 128)), p).any()

    def test_identity_kernel_passes_nonnegative_input(self, rng):
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1.0
        x = rng.random((1, 6, 7))
        np.testing.assert_array_equal(L.conv_block_forward(x, L.ConvBlockParams(k, np.zeros(1))), x)

    def test_channel_mismatch(self, rng):
        p = L.init_conv_block(rng, 2, 3)
        with pytest.raises(DimensionError):
            L.conv_block_forward(np.zeros((1, 4, 4)), p)

    def test_backward_finite_differences(self, rng):
        p = L.init_conv_block(rng, 2, 3)
        p.bias[:] = rng.standard_normal(3) * 0.1
        x = rng.standard_normal((2, 2, 5, 6))
        g = rng.standard_normal((2, 3, 5, 6))

        def f(arrs):
            q = L.ConvBlockParams(arrs[1], arrs[2])
            out, cache = L.conv_block_fwd(arrs[0], q)
            gx, gp = L.conv_block_backward(g, cache, q)
            return float((g * out).sum()), [gx, gp["kernels"], gp["bias"]]

        assert nx.grad_check(f, [x, p.kernels, p.bias], tol=1e-6).passed

    def test_init_bounds_and_determinism(self):
        a = L.init_conv_block(np.random.default_rng(3), 5, 5)
        b = L.init_conv_block(np.random.default_rng(3), 5, 5)
        np.testing.assert_array_equal(a.kernels, b.kernels)
        assert np.abs(a.kernels).max() <= 1 / math.sqrt(45)
        assert not a.bias.any()


class TestCbam:
    def test_hidden_width(self):
        assert L.cbam_hidden_width(5, 2) == 2
        assert L.cbam_hidden_width(1, 2) == 1

    def test_constant_map_branch_collapse(self, rng):
        p = _cbam(rng)
        f = np.full((5, 4, 6), 0.7)
        v = np.full(5, 0.7)
        mlp = np.maximum(v @ p.mlp_w1.T + p.mlp_b1, 0) @ p.mlp_w2.T + p.mlp_b2
        mc = L.cbam_channel_attention(f, p)
        np.testing.assert_allclose(mc[:, 0, 0], 1 / (1 + np.exp(-2 * mlp)), atol=1e-15)

    def test_zero_params_give_half(self, rng):
        p = _zero_cbam()
        f = rng.standard_normal((5, 11, 128))
        assert np.all(L.cbam_channel_attention(f, p) == 0.5)
        assert np.all(L.cbam_spatial_attention(f, p) == 0.5)
        np.testing.assert_array_equal(L.cbam_apply(f, p), 0.25 * f)

    def test_channel_attention_scalar_transcription(self, rng):
        p = _cbam(rng)
        f = rng.standard_normal((5, 3, 4))
        c, h, w = f.shape
        avg = [sum(f[k, i, j] for i in range(h) for j in range(w)) / (h * w) for k in range(c)]
        mx = [max(f[k, i, j] for i in range(h) for j in range(w)) for k in range(c)]

        def mlp(v):
            hid = [max(sum(p.mlp_w1[r, k] * v[k] for k in range(c)) + p.mlp_b1[r], 0.0) for r in range(2)]
            return [sum(p.mlp_w2[k, r] * hid[r] for r in range(2)) + p.mlp_b2[k] for k in range(c)]

        ma, mm = mlp(avg), mlp(mx)
        expected = [_sig(ma[k] + mm[k]) for k in range(c)]
        np.testing.assert_allclose(L.cbam_channel_attention(f, p)[:, 0, 0], expected, atol=1e-14)

    def test_spatial_attention_scalar_transcription(self, rng):
        p = _cbam(rng)
        f = rng.standard_normal((5, 4, 5))
        c, h, w = f.shape
        desc = np.zeros((2, h + 2, w + 2))
        for i in range(h):
            for j in range(w):
                col = [f[k, i, j] for k in range(c)]
                desc[0, i + 1, j + 1] = sum(col) / c
                desc[1, i + 1, j + 1] = max(col)
        ms = L.cbam_spatial_attention(f, p)
        for i in range(h):
            for j in range(w):
                acc = sum(
                    desc[ch, i + a, j + b] * p.spatial_kernel[0, ch, a, b]
                    for ch in range(2)
                    for a in range(3)
                    for b in range(3)
                )
                assert ms[0, i, j] == pytest.approx(_sig(acc), abs=1e-14)

    def test_zero_spatial_kernel(self, rng):
        p = _cbam(rng)
        p.spatial_kernel[...] = 0
        assert np.all(L.cbam_spatial_attention(rng.standard_normal((5, 3, 3)), p) == 0.5)

    def test_single_channel_avg_equals_max(self, rng):
        p = _cbam(rng, c=1)
        f = rng.standard_normal((1, 4, 4))
        k_sum = p.spatial_kernel.sum(axis=1, keepdims=True)
        expected = 1 / (1 + np.exp(-nx.conv2d(f, k_sum, np.zeros(1), padding=1)))
        np.testing.assert_allclose(L.cbam_spatial_attention(f, p), expected, atol=1e-14)

    def test_zero_input(self, rng):
        assert not L.cbam_apply(np.zeros((5, 3, 3)), _cbam(rng)).any()

    def test_compositional(self, rng):
        p = _cbam(rng)
        f = rng.standard_normal((5, 11, 128))
        mc = L.cbam_channel_attention(f, p)
        f1 = mc * f
        ms = L.cbam_spatial_attention(f1, p)
        np.testing.assert_allclose(L.cbam_apply(f, p), ms * f1, rtol=0, atol=1e-12)

    def test_batched_equals_single(self, rng):
        p = _cbam(rng)
        f = rng.standard_normal((3, 5, 6, 7))
        out = L.cbam_apply(f, p)
        for n in range(3):
            np.testing.assert_allclose(out[n], L.cbam_apply(f[n], p), atol=1e-14)

    def test_channel_mismatch(self, rng):
        with pytest.raises(DimensionError, match="axis C"):
            L.cbam_apply(np.zeros((4, 3, 3)), _cbam(rng))

    def test_backward_finite_differences(self, rng):
        p = _cbam(rng, scale=0.5)
        f = rng.standard_normal((2, 5, 4, 6))
        g = rng.standard_normal(f.shape)
        names = [n for n, _ in p.arrays()]

        def fn(arrs):
            q = L.CbamParams(*arrs[1:])
            out, cache = L.cbam_fwd(arrs[0], q)
            df, grads = L.cbam_backward(g, cache, q)
            return float((g * out).sum()), [df] + [grads[n] for n in names]

        report = nx.grad_check(fn, [f] + [a for _, a in p.arrays()], tol=1e-6)
        assert report.passed, report


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.1, 20))
def test_cbam_attenuates(seed, scale):
    rng = np.random.default_rng(seed)
    p = _cbam(rng)
    f = rng.standard_normal((5, 4, 6)) * scale
    assert np.all(np.abs(L.cbam_apply(f, p)) <= np.abs(f))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.1, 2))
def test_attention_maps_strictly_inside_unit_interval(seed, scale):
    # float64 sigmoid rounds to 1.0 past ~37, so keep pre-activations moderate
    rng = np.random.default_rng(seed)
    p = _cbam(rng, scale=0.5)
    f = rng.standard_normal((5, 4, 6)) * scale
    mc = L.cbam_channel_attention(f, p)
    ms = L.cbam_spatial_attention(mc * f, p)
    assert np.all((mc > 0) & (mc < 1)) and np.all((ms > 0) & (ms < 1))


def _lstm_scalar(x, h, c, w_f, w_i, w_c, w_o, b_f, b_i, b_c, b_o):
    """Per-unit loops over the gate equations; independent of the stacked layout."""
    z = list(h) + list(x)
    hid = len(h)

    def aff(w, b, r):
        return sum(w[r][k] * z[k] for k in range(len(z))) + b[r]

    h_new, c_new = [], []
    for r in range(hid):
        f = _sig(aff(w_f, b_f, r))
        i = _sig(aff(w_i, b_i, r))
        ct = math.tanh(aff(w_c, b_c, r))
        o = _sig(aff(w_o, b_o, r))
        cr = f * c[r] + i * ct
        c_new.append(cr)
        h_new.append(o * math.tanh(cr))
    return np.array(h_new), np.array(c_new)


class TestLstm:
    def test_zero_params_zero_state(self):
        p = L.LstmParams(np.zeros((12, 5)), np.zeros(12))
        (s, (_, _, f, i, ct, o, _)) = L.lstm_cell_fwd(np.ones(2), L.LstmState.zeros(3), p)
        assert np.all(f == 0.5) and np.all(i == 0.5) and np.all(o == 0.5)
        assert not ct.any() and not s.c.any() and not s.h.any()

    def test_zero_params_unit_cell(self):
        p = L.LstmParams(np.zeros((4, 2)), np.zeros(4))
        s = L.lstm_cell(np.zeros(1), L.LstmState(np.zeros(1), np.ones(1)), p)
        assert s.c[0] == 0.5
        assert s.h[0] == pytest.approx(0.5 * math.tanh(0.5), abs=1e-15)
        assert s.h[0] == pytest.approx(0.2311, abs=1e-4)

    def test_matches_scalar_transcription(self, rng):
        hid, d = 3, 4
        gates = [rng.standard_normal((hid, hid + d)) for _ in range(4)]
        biases = [rng.standard_normal(hid) for _ in range(4)]
        p = L.LstmParams.from_gates(*gates, *biases)
        x, h, c = rng.standard_normal(d), rng.standard_normal(hid) * 0.5, rng.standard_normal(hid)
        s = L.lstm_cell(x, L.LstmState(h, c), p)
        h_ref, c_ref = _lstm_scalar(x, h, c, *gates, *biases)
        np.testing.assert_allclose(s.h, h_ref, atol=1e-14)
        np.testing.assert_allclose(s.c, c_ref, atol=1e-14)

    def test_gate_views(self, rng):
        gates = [rng.standard_normal((2, 5)) for _ in range(4)]
        biases = [rng.standard_normal(2) for _ in range(4)]
        p = L.LstmParams.from_gates(*gates, *biases)
        np.testing.assert_array_equal(p.w_c, gates[2])
        np.testing.assert_array_equal(p.b_o, biases[3])
        assert p.hidden == 2 and p.input_size == 3

    def test_hidden_bounded(self, rng):
        p = L.init_lstm(rng, 6, 4)
        p.weights[...] = rng.standard_normal(p.weights.shape) * 5
        s = L.LstmState.zeros(4)
        for _ in range(10):
            s = L.lstm_cell(rng.standard_normal(6) * 10, s, p)
            assert np.all(np.abs(s.h) < 1)

    def test_dimension_errors_name_gate(self, rng):
        p = L.init_lstm(rng, 4, 3)
        with pytest.raises(DimensionError, match="gate"):
            L.lstm_cell(np.zeros(5), L.LstmState.zeros(3), p)
        with pytest.raises(DimensionError, match="gate"):
            L.lstm_cell(np.zeros(4), L.LstmState.zeros(2), p)
        with pytest.raises(DimensionError):
            L.LstmParams.from_gates(np.zeros((2, 3)), np.zeros((2, 3)), np.zeros((2, 4)), np.zeros((2, 3)),
                                    *[np.zeros(2)] * 4)

    def test_init_forget_bias(self, rng):
        p = L.init_lstm(rng, 10, 4)
        np.testing.assert_array_equal(p.b_f, np.ones(4))
        assert not p.bias[4:].any()
        assert np.abs(p.weights).max() <= 1 / math.sqrt(14)

    def test_sequence_single_step(self, rng):
        layers = [L.init_lstm(rng, 4, 3), L.init_lstm(rng, 3, 3)]
        x = rng.standard_normal((1, 4))
        s1 = L.lstm_cell(x[0], L.LstmState.zeros(3), layers[0])
        s2 = L.lstm_cell(s1.h, L.LstmState.zeros(3), layers[1])
        np.testing.assert_allclose(L.lstm_sequence(x, layers)[0], s2.h, atol=1e-15)

    def test_zero_inputs_zero_params(self):
        layers = [L.LstmParams(np.zeros((8, 5)), np.zeros(8))]
        assert not L.lstm_sequence(np.zeros((4, 3)), layers).any()

    def test_two_layers_are_composition(self, rng):
        a, b = L.init_lstm(rng, 6, 4), L.init_lstm(rng, 4, 5)
        xs = rng.standard_normal((7, 6))
        np.testing.assert_allclose(
            L.lstm_sequence(xs, [a, b]), L.lstm_sequence(L.lstm_sequence(xs, [a]), [b]), rtol=0, atol=1e-12
        )

    def test_batched_equals_single(self, rng):
        layers = [L.init_lstm(rng, 6, 4), L.init_lstm(rng, 4, 4)]
        xs = rng.standard_normal((3, 5, 6))
        out = L.lstm_sequence(xs, layers)
        for n in range(3):
            np.testing.assert_allclose(out[n], L.lstm_sequence(xs[n], layers), atol=1e-14)

    def test_empty_sequence(self, rng):
        with pytest.raises(ValueError):
            L.lstm_sequence(np.zeros((0, 3)), [L.init_lstm(rng, 3, 2)])

    @pytest.mark.parametrize("batch", [None, 2])
    def test_bptt_finite_differences(self, rng, batch):
        layers = [L.init_lstm(rng, 4, 3), L.init_lstm(rng, 3, 3)]
        for p in layers:
            p.weights[...] = rng.standard_normal(p.weights.shape) * 0.5
        shape = (3, 4) if batch is None else (batch, 3, 4)
        xs = rng.standard_normal(shape)
        g = rng.standard_normal(shape[:-1] + (3,))

        def f(arrs):
            ls = [L.LstmParams(arrs[1], arrs[2]), L.LstmParams(arrs[3], arrs[4])]
            hs, caches = L.lstm_sequence_fwd(arrs[0], ls)
            gx, grads = L.lstm_sequence_backward(g, caches, ls)
            flat = [gx] + [grads[k][n] for k in range(2) for n in ("weights", "bias")]
            return float((g * hs).sum()), flat

        arrs = [xs] + [a for p in layers for _, a in p.arrays()]
        report = nx.grad_check(f, arrs, tol=1e-5)
        assert report.passed, report


class TestDense:
    def test_zero_weights(self):
        p = L.DenseParams(np.zeros((1, 4)), np.array([2.5]))
        assert L.dense(np.ones(4), p)[0] == 2.5

    def test_passthrough(self):
        w = np.zeros((1, 4))
        w[0, 2] = 1.0
        assert L.dense(np.array([1.0, 2.0, 3.0, 4.0]), L.DenseParams(w, np.zeros(1)))[0] == 3.0

    def test_shape_error(self):
        with pytest.raises(DimensionError):
            L.dense(np.zeros(3), L.DenseParams(np.zeros((1, 4)), np.zeros(1)))

    def test_backward_finite_differences(self, rng):
        x = rng.standard_normal((3, 5))
        p = L.init_dense(rng, 5)
        g = rng.standard_normal((3, 1))

        def f(arrs):
            q = L.DenseParams(arrs[1], arrs[2])
            gx, gp = L.dense_backward(g, arrs[0], q)
            return float((g * L.dense(arrs[0], q)).sum()), [gx, gp["w"], gp["b"]]

        assert nx.grad_check(f, [x, p.w, p.b], tol=1e-6).passed


class TestDropout:
    def test_rate_zero_and_inference(self, rng):
        x = rng.standard_normal(10)
        assert L.dropout(x, 0.0, True, 1) is x
        assert L.dropout(x, 0.5, False, 1) is x

    def test_expectation(self):
        out = L.dropout(np.ones(10**6), 0.1, True, 7)
        assert abs(out.mean() - 1.0) < 0.01
        vals = np.unique(out)
        assert len(vals) == 2 and vals[0] == 0.0 and vals[1] == pytest.approx(1 / 0.9)

    def test_seeded(self):
        x = np.ones(100)
        np.testing.assert_array_equal(L.dropout(x, 0.3, True, 5), L.dropout(x, 0.3, True, 5))

    def test_rate_out_of_range(self):
        with pytest.raises(ValueError):
            L.dropout(np.ones(3), 1.0, True, 0)
        with pytest.raises(ValueError):
            L.dropout_mask((3,), -0.1, np.random.default_rng(0))
