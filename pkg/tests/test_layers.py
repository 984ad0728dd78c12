import numpy as np
import pytest

from mambasynth import tensor as T
from mambasynth.checkpoint import CheckpointError, load_checkpoint, save_checkpoint, save_module, load_module
from mambasynth.layers import (
    BatchNorm2D,
    Conv2D,
    Linear,
    Parameter,
    conv2d,
    conv2d_transpose,
)
from mambasynth.tensor import ConfigError, ShapeError, Tape, Tensor, backward, finite_diff_check


def naive_conv2d(x, w, b, stride, pad):
    """Six-loop cross-correlation oracle, zero padding."""
    bsz, c_in, h, wid = x.shape
    c_out, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wid + 2 * pad - kw) // stride + 1
    y = np.zeros((bsz, c_out, oh, ow), dtype=x.dtype)
    for n in range(bsz):
        for co in range(c_out):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ci in range(c_in):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[n, ci, i * stride + u, j * stride + v] * w[co, ci, u, v]
                    y[n, co, i, j] = acc + (b[co] if b is not None else 0.0)
    return y


def t64(x):
    return Tensor(x, dtype=np.float64)


class TestConvForward:
    def test_identity_one_by_one_kernel(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(1, 3, 6, 6))
        w = np.zeros((3, 3, 1, 1))
        for c in range(3):
            w[c, c, 0, 0] = 1.0
        y = conv2d(t64(x), t64(w), None, stride=1, padding=0)
        np.testing.assert_array_equal(y.data, x)

    def test_all_ones_kernel_counts_neighbourhood(self):
        x = np.ones((1, 1, 5, 5))
        w = np.ones((1, 1, 3, 3))
        y = conv2d(t64(x), t64(w), None, stride=1, padding=1)
        assert y.data[0, 0, 2, 2] == 9.0
        assert y.data[0, 0, 0, 0] == 4.0
        expect = naive_conv2d(x, w, None, 1, 1)
        np.testing.assert_allclose(y.data, expect)

    def test_shape_arithmetic_stride_2(self):
        x = t64(np.zeros((1, 3, 256, 256)))
        w = t64(np.random.default_rng(1).normal(size=(8, 3, 4, 4)))
        y = conv2d(x, w, None, stride=2, padding=1)
        assert y.shape == (1, 8, 128, 128)

    @pytest.mark.parametrize("seed", range(6))
    def test_matches_naive_oracle(self, seed):
        rng = np.random.default_rng(seed)
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, 2))
        k = int(rng.integers(1, 4))
        x = rng.normal(size=(2, 3, 7, 6))
        w = rng.normal(size=(4, 3, k, k))
        b = rng.normal(size=4)
        y = conv2d(t64(x), t64(w), t64(b), stride=stride, padding=pad)
        np.testing.assert_allclose(y.data, naive_conv2d(x, w, b, stride, pad), atol=1e-12)

    def test_depthwise_matches_naive_per_channel(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(2, 3, 6, 6))
        w = rng.normal(size=(3, 1, 3, 3))
        y = conv2d(t64(x), t64(w), None, stride=1, padding=1, groups=3)
        for c in range(3):
            expect = naive_conv2d(x[:, c : c + 1], w[c : c + 1], None, 1, 1)
            np.testing.assert_allclose(y.data[:, c : c + 1], expect, atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            conv2d(t64(np.zeros((1, 2, 5, 5))), t64(np.zeros((4, 3, 3, 3))), None)

    def test_empty_output_rejected(self):
        with pytest.raises(ConfigError):
            conv2d(t64(np.zeros((1, 1, 2, 2))), t64(np.zeros((1, 1, 5, 5))), None)


class TestConvTranspose:
    @pytest.mark.parametrize("stride,pad,k,depth", [(1, 0, 3, False), (2, 1, 4, False), (1, 1, 3, False)])
    def test_adjoint_identity(self, stride, pad, k, depth):
        rng = np.random.default_rng(stride * 10 + pad)
        x = rng.normal(size=(2, 3, 8, 8))
        w = rng.normal(size=(5, 3, k, k))
        y_shape = conv2d(t64(x), t64(w), None, stride, pad).shape
        y = rng.normal(size=y_shape)
        lhs = np.sum(conv2d(t64(x), t64(w), None, stride, pad).data * y)
        rhs = np.sum(x * conv2d_transpose(t64(y), t64(w), None, stride, pad).data)
        assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))

    def test_depthwise_adjoint_via_input_gradient(self):
        rng = np.random.default_rng(3)
        x0 = rng.normal(size=(1, 4, 6, 6))
        w = t64(rng.normal(size=(4, 1, 3, 3)))
        y0 = rng.normal(size=(1, 4, 6, 6))
        xt = Tensor(x0, dtype=np.float64, requires_grad=True)
        with Tape() as tape:
            out = conv2d(xt, w, None, 1, 1, groups=4)
            loss = T.reduce_sum(T.mul(out, t64(y0)))
        gx = backward(tape, loss)[xt.grad_id].data
        lhs = np.sum(conv2d(t64(x0), w, None, 1, 1, groups=4).data * y0)
        rhs = np.sum(x0 * gx)
        assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))

    def test_stride2_upsamples(self):
        x = t64(np.zeros((1, 8, 64, 64)))
        w = t64(np.random.default_rng(0).normal(size=(8, 4, 4, 4)))
        y = conv2d_transpose(x, w, None, stride=2, padding=1)
        assert y.shape == (1, 4, 128, 128)

    def test_zero_input_zero_output(self):
        x = t64(np.zeros((1, 2, 4, 4)))
        w = t64(np.random.default_rng(0).normal(size=(2, 3, 3, 3)))
        b = t64(np.zeros(3))
        y = conv2d_transpose(x, w, b, stride=2, padding=1)
        np.testing.assert_array_equal(y.data, np.zeros_like(y.data))


class TestConvGradients:
    @pytest.mark.parametrize("stride,pad,groups", [(1, 1, 1), (2, 1, 1), (1, 0, 1), (1, 1, "dw")])
    def test_finite_difference_all_slots(self, stride, pad, groups):
        rng = np.random.default_rng(42)
        c_in, c_out = (3, 3) if groups == "dw" else (2, 3)
        g = c_in if groups == "dw" else 1
        x0 = rng.normal(size=(2, c_in, 5, 5))
        w0 = rng.normal(size=(c_out, 1 if g > 1 else c_in, 3, 3))
        b0 = rng.normal(size=c_out)
        r = rng.normal(size=conv2d(t64(x0), t64(w0), t64(b0), stride, pad, g).shape)

        def fx(t):
            return T.reduce_sum(T.mul(conv2d(t, t64(w0), t64(b0), stride, pad, g), t64(r)))

        def fw(t):
            return T.reduce_sum(T.mul(conv2d(t64(x0), t, t64(b0), stride, pad, g), t64(r)))

        def fb(t):
            return T.reduce_sum(T.mul(conv2d(t64(x0), t64(w0), t, stride, pad, g), t64(r)))

        assert finite_diff_check(fx, t64(x0)) <= 1e-4
        assert finite_diff_check(fw, t64(w0)) <= 1e-4
        assert finite_diff_check(fb, t64(b0)) <= 1e-4

    def test_transpose_finite_difference(self):
        rng = np.random.default_rng(5)
        x0 = rng.normal(size=(1, 3, 4, 4))
        w0 = rng.normal(size=(3, 2, 4, 4))
        b0 = rng.normal(size=2)
        r = rng.normal(size=conv2d_transpose(t64(x0), t64(w0), t64(b0), 2, 1).shape)

        def fx(t):
            return T.reduce_sum(T.mul(conv2d_transpose(t, t64(w0), t64(b0), 2, 1), t64(r)))

        def fw(t):
            return T.reduce_sum(T.mul(conv2d_transpose(t64(x0), t, t64(b0), 2, 1), t64(r)))

        assert finite_diff_check(fx, t64(x0)) <= 1e-4
        assert finite_diff_check(fw, t64(w0)) <= 1e-4


class TestBatchNorm:
    def test_training_normalizes(self):
        rng = np.random.default_rng(0)
        bn = BatchNorm2D(3, dtype=np.float64)
        x = t64(rng.normal(2.0, 3.0, size=(4, 3, 8, 8)))
        y = bn(x).data
        mean = y.mean(axis=(0, 2, 3))
        var = y.var(axis=(0, 2, 3))
        np.testing.assert_allclose(mean, np.zeros(3), atol=1e-6)
        np.testing.assert_allclose(var, np.ones(3), atol=1e-4)

    def test_constant_channel_gives_beta(self):
        bn = BatchNorm2D(2, dtype=np.float64)
        bn.beta.assign(np.array([5.0, -1.0]))
        x = t64(np.full((2, 2, 4, 4), 7.0))
        y = bn(x).data
        np.testing.assert_allclose(y[:, 0], 5.0, atol=1e-3)
        np.testing.assert_allclose(y[:, 1], -1.0, atol=1e-3)

    def test_eval_scalar_formula(self):
        bn = BatchNorm2D(1, dtype=np.float64).eval()
        bn.gamma.assign(np.array([2.0]))
        bn.beta.assign(np.array([3.0]))
        x = t64(np.ones((1, 1, 1, 1)))
        # (1 - 0)/sqrt(1 + eps) * 2 + 3
        expect = 2.0 / np.sqrt(1 + 1e-5) + 3.0
        np.testing.assert_allclose(bn(x).data.reshape(()), expect, rtol=1e-12)
        assert abs(bn(x).data.reshape(()) - 5.0) < 1e-4

    def test_eval_depends_only_on_running_stats(self):
        rng = np.random.default_rng(1)
        bn = BatchNorm2D(2, dtype=np.float64)
        bn(t64(rng.normal(size=(4, 2, 6, 6))))  # seed running stats
        bn.eval()
        a = rng.normal(size=(1, 2, 6, 6))
        single = bn(t64(a)).data
        batch = bn(t64(np.concatenate([a, rng.normal(size=(3, 2, 6, 6))]))).data[:1]
        np.testing.assert_array_equal(single, batch)

    def test_eval_mode_is_affine_superposition(self):
        rng = np.random.default_rng(2)
        bn = BatchNorm2D(2, dtype=np.float64)
        bn(t64(rng.normal(size=(4, 2, 5, 5))))
        bn.eval()
        a = rng.normal(size=(1, 2, 5, 5))
        b = rng.normal(size=(1, 2, 5, 5))
        zero = np.zeros_like(a)
        f = lambda arr: bn(t64(arr)).data
        lhs = f(a) + f(b) - f(zero)
        rhs = f(a + b)
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)

    def test_degenerate_batch_rejected(self):
        bn = BatchNorm2D(1, dtype=np.float64)
        with pytest.raises(ConfigError):
            bn(t64(np.ones((1, 1, 1, 1))))

    def test_running_var_stays_positive(self):
        bn = BatchNorm2D(1, dtype=np.float64)
        for i in range(20):
            bn(t64(np.random.default_rng(i).normal(size=(2, 1, 4, 4))))
        assert np.all(bn._buffers["running_var"] > 0)

    def test_gradients(self):
        rng = np.random.default_rng(7)
        x0 = rng.normal(size=(2, 2, 3, 3))
        r = rng.normal(size=(2, 2, 3, 3))

        def f(t):
            bn = BatchNorm2D(2, dtype=np.float64)
            bn.gamma.assign(np.array([1.5, 0.5]))
            bn.beta.assign(np.array([0.1, -0.2]))
            return T.reduce_sum(T.mul(bn(t), t64(r)))

        assert finite_diff_check(f, t64(x0)) <= 1e-4


class TestInit:
    def test_same_seed_bitwise_identical(self):
        a = Conv2D(3, 8, 3, rng=np.random.default_rng(123))
        b = Conv2D(3, 8, 3, rng=np.random.default_rng(123))
        np.testing.assert_array_equal(a.weight.data, b.weight.data)

    def test_different_seed_differs(self):
        a = Conv2D(3, 8, 3, rng=np.random.default_rng(1))
        b = Conv2D(3, 8, 3, rng=np.random.default_rng(2))
        assert not np.array_equal(a.weight.data, b.weight.data)

    def test_sample_mean_within_3_sigma(self):
        lin = Linear(100, 100, rng=np.random.default_rng(77))
        n = lin.weight.value.size
        assert n == 10_000
        sigma_mean = 0.02 / np.sqrt(n)
        assert abs(lin.weight.data.mean()) <= 3 * sigma_mean

    def test_norm_init(self):
        bn = BatchNorm2D(4)
        np.testing.assert_array_equal(bn.gamma.data, np.ones(4))
        np.testing.assert_array_equal(bn.beta.data, np.zeros(4))


class TestLinear:
    def test_matches_matmul(self):
        rng = np.random.default_rng(0)
        lin = Linear(4, 3, rng=rng, dtype=np.float64)
        x = rng.normal(size=(5, 4))
        y = lin(t64(x))
        np.testing.assert_allclose(y.data, x @ lin.weight.data + lin.bias.data, rtol=1e-12)

    def test_leading_axes_flattened(self):
        rng = np.random.default_rng(1)
        lin = Linear(4, 3, rng=rng, dtype=np.float64)
        x = rng.normal(size=(2, 5, 4))
        y = lin(t64(x))
        assert y.shape == (2, 5, 3)


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tmp_path):
        rng = np.random.default_rng(0)
        arrays = {
            "a.weight": rng.normal(size=(3, 4)).astype(np.float32),
            "b.bias": rng.normal(size=(7,)).astype(np.float64),
        }
        p = tmp_path / "model.ckpt"
        save_checkpoint(p, arrays, meta={"seed": 1})
        loaded, meta = load_checkpoint(p)
        assert meta == {"seed": 1}
        for k in arrays:
            np.testing.assert_array_equal(loaded[k], arrays[k])
            assert loaded[k].dtype == arrays[k].dtype

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "junk.ckpt"
        p.write_bytes(b"NOTMAGIC" + b"\x00" * 32)
        with pytest.raises(CheckpointError):
            load_checkpoint(p)

    def test_module_roundtrip(self, tmp_path):
        rng = np.random.default_rng(5)
        src = BatchNorm2D(3, dtype=np.float64)
        src(t64(rng.normal(size=(2, 3, 4, 4))))
        p = tmp_path / "bn.ckpt"
        save_module(p, src)
        dst = BatchNorm2D(3, dtype=np.float64)
        load_module(p, dst)
        np.testing.assert_array_equal(dst.gamma.data, src.gamma.data)
        np.testing.assert_array_equal(dst._buffers["running_mean"], src._buffers["running_mean"])
        np.testing.assert_array_equal(dst._buffers["running_var"], src._buffers["running_var"])


class TestReflectPadding:
    def test_layer_with_reflect_pad_runs_and_differentiates(self):
        rng = np.random.default_rng(0)
        conv = Conv2D(2, 3, 7, padding=3, pad_mode="reflect", rng=rng, dtype=np.float64)
        x0 = rng.normal(size=(1, 2, 9, 9))
        y = conv(t64(x0))
        assert y.shape == (1, 3, 9, 9)
        r = rng.normal(size=y.shape)

        def f(t):
            return T.reduce_sum(T.mul(conv(t), t64(r)))

        assert finite_diff_check(f, t64(x0)) <= 1e-4
