import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from episeg.numcore import (
    EPS_STD, Params, Rng, Tensor, channel_stats, check_gradients, destandardize, gradients, load_tensor,
    save_tensor, softmax, standardize,
)
from episeg.numcore import autograd as ag
from episeg.numcore import kernels, tensorio


def channel0(values, shape=(2, 2, 3)):
    f = np.zeros(shape)
    f[..., 0] = np.asarray(values, dtype=float).reshape(shape[:2])
    return f


class TestChannelStats:
    def test_zero_map(self):
        s = channel_stats(np.zeros((2, 2, 3)))
        np.testing.assert_array_equal(s.mean.data, 0.0)
        np.testing.assert_allclose(s.std.data, math.sqrt(EPS_STD))

    def test_hand_computed(self):
        s = channel_stats(channel0([1, 1, 3, 3]), eps=0.0)
        assert s.mean.data[0] == pytest.approx(2.0)
        assert s.std.data[0] == pytest.approx(1.0)

    def test_constant_per_channel(self):
        f = np.broadcast_to(np.array([0.5, -2.0, 7.0]), (3, 4, 3))
        s = channel_stats(f)
        np.testing.assert_allclose(s.mean.data, [0.5, -2.0, 7.0])
        np.testing.assert_allclose(s.std.data, math.sqrt(EPS_STD), rtol=1e-6)

    def test_batched_matches_single(self):
        f = np.random.default_rng(0).normal(size=(3, 4, 5, 2))
        sb = channel_stats(f)
        for i in range(3):
            si = channel_stats(f[i])
            np.testing.assert_allclose(sb.mean.data[i], si.mean.data)
            np.testing.assert_allclose(sb.std.data[i], si.std.data)

    def test_population_variance(self):
        f = np.random.default_rng(1).normal(size=(4, 6, 3))
        s = channel_stats(f, eps=0.0)
        np.testing.assert_allclose(s.std.data, f.reshape(-1, 3).std(axis=0, ddof=0))

    def test_degenerate(self):
        with pytest.raises(ValueError, match="degenerate feature map"):
            channel_stats(np.zeros((0, 2, 3)))


class TestStandardize:
    def test_constant_goes_to_zero(self):
        f = np.full((3, 3, 2), 4.0)
        z = standardize(f, channel_stats(f))
        np.testing.assert_allclose(z.data, 0.0, atol=1e-12)

    def test_hand_computed(self):
        f = channel0([1, 1, 3, 3], shape=(2, 2, 1))
        z = standardize(f, channel_stats(f, eps=0.0))
        np.testing.assert_allclose(z.data[..., 0].ravel(), [-1, -1, 1, 1])

    def test_round_trip(self):
        f = np.random.default_rng(2).normal(size=(5, 4, 3)) * 3 + 1
        s = channel_stats(f)
        np.testing.assert_allclose(destandardize(standardize(f, s), s).data, f, atol=1e-6)

    def test_zero_std_rejected(self):
        f = np.ones((2, 2, 1))
        with pytest.raises(ValueError):
            standardize(f, channel_stats(f, eps=0.0))

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, (4, 5, 3), elements=st.floats(-50, 50)))
    def test_unit_moments(self, f):
        s = channel_stats(f, eps=0.0)
        if np.any(s.std.data < 1e-3):
            return
        z = standardize(f, s).data
        np.testing.assert_allclose(z.mean(axis=(0, 1)), 0.0, atol=1e-6)
        np.testing.assert_allclose(z.std(axis=(0, 1)), 1.0, atol=1e-6)


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(softmax([0.0, 0.0]), [0.5, 0.5])

    def test_no_overflow(self):
        out = softmax([1000.0, 0.0])
        assert np.all(np.isfinite(out))
        assert out[0] == pytest.approx(1.0)
        assert out[1] == pytest.approx(0.0, abs=1e-300)

    def test_closed_form(self):
        np.testing.assert_allclose(softmax(np.log([1.0, 2.0, 3.0])), [1 / 6, 2 / 6, 3 / 6], atol=1e-9)

    def test_tape_softmax_matches(self):
        v = np.random.default_rng(3).normal(size=(4, 7)) * 5
        np.testing.assert_allclose(ag.softmax(Tensor(v), axis=1).data, softmax(v, axis=1))

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-1e4, 1e4)))
    def test_probability_vector(self, v):
        p = softmax(v)
        assert np.all(p >= 0)
        assert abs(p.sum() - 1.0) <= 1e-9


class TestRng:
    def test_same_seed_same_sequence(self):
        a, b = Rng(42), Rng(42)
        seq_a = [a.normal() for _ in range(5)] + [a.beta(0.1) for _ in range(5)]
        seq_b = [b.normal() for _ in range(5)] + [b.beta(0.1) for _ in range(5)]
        assert seq_a == seq_b

    def test_first_sample_fixed_seed(self):
        assert Rng(42).normal() == Rng(42).normal()

    def test_normal_moments(self):
        x = Rng(7).normal(100_000)
        assert abs(x.mean()) < 0.02
        assert abs(x.std() - 1.0) < 0.02

    def test_beta_mean_and_range(self):
        rng = Rng(11)
        x = np.array([rng.beta(0.1) for _ in range(100_000)])
        assert np.all((x >= 0) & (x <= 1))
        assert abs(x.mean() - 0.5) < 0.01

    def test_beta_symmetry(self):
        rng = Rng(5)
        x = np.array([rng.beta(0.1) for _ in range(20_000)])
        # x and 1 - x share a distribution: compare empirical CDFs
        ts = np.linspace(0.05, 0.95, 19)
        cdf = (x[:, None] < ts).mean(axis=0)
        mirrored = ((1 - x)[:, None] < ts).mean(axis=0)
        np.testing.assert_allclose(cdf, mirrored, atol=0.02)

    def test_beta_variance_matches_closed_form(self):
        rng = Rng(9)
        g = 0.1
        x = np.array([rng.beta(g) for _ in range(50_000)])
        expected = 1.0 / (4 * (2 * g + 1))
        assert abs(x.var() - expected) < 0.01

    def test_gamma_mean(self):
        rng = Rng(3)
        for shape in (0.3, 2.5):
            x = np.array([rng.gamma(shape) for _ in range(20_000)])
            assert abs(x.mean() - shape) < 0.05 * max(shape, 1)

    @pytest.mark.parametrize("bad", [0.0, -1.0])
    def test_bad_gamma(self, bad):
        with pytest.raises(ValueError):
            Rng(0).beta(bad)

    def test_call_counter(self):
        rng = Rng(0)
        rng.normal(3)
        rng.uniform()
        assert rng.calls == 2


class TestGradients:
    def test_sum_of_squares(self):
        p = Params({"w": [1.0, 2.0]})
        gradients(lambda q: ag.sum_(q["w"] ** 2), p)
        np.testing.assert_allclose(p.grad("w"), [2.0, 4.0])

    def test_zero_grad(self):
        p = Params({"w": [1.0, 2.0]})
        gradients(lambda q: ag.sum_(q["w"] ** 2), p)
        p.zero_grad()
        np.testing.assert_array_equal(p.grad("w"), 0.0)
        assert p.grad("w").shape == p["w"].shape

    def test_non_scalar_loss(self):
        p = Params({"w": [1.0, 2.0]})
        with pytest.raises(ValueError, match="scalar"):
            gradients(lambda q: q["w"] * 2.0, p)

    def test_softmax_cross_entropy(self):
        p = Params({"z": np.random.default_rng(0).normal(size=3)})
        target = 1

        def loss(q):
            return -ag.take(ag.log_softmax(q["z"], axis=0), [target], axis=0).sum()

        assert max(check_gradients(loss, p).values()) <= 1e-3

    def test_standardize_weighted_sum_chain(self):
        rng = np.random.default_rng(1)
        p = Params({"f": rng.normal(size=(3, 4, 2)), "w": rng.normal(size=(3, 4, 2))})

        def loss(q):
            z = standardize(q["f"], channel_stats(q["f"]))
            return ag.sum_(z * q["w"])

        assert max(check_gradients(loss, p).values()) <= 1e-3

    OPS = {
        "matmul": lambda a, b: ag.sum_(ag.matmul(a, ag.transpose(b, (1, 0))) ** 2),
        "exp_log": lambda a, b: ag.sum_(ag.log(ag.exp(a) + 1.0) * b),
        "div_sqrt": lambda a, b: ag.sum_(a / ag.sqrt(b * b + 1.0)),
        "relu_softmax": lambda a, b: ag.sum_(ag.softmax(ag.relu(a) + b, axis=1) * np.arange(4.0)),
        "upsample": lambda a, b: ag.sum_(ag.upsample_bilinear(ag.reshape(a, (1, 3, 4)), (5, 7)) ** 2),
        "concat_take": lambda a, b: ag.sum_(ag.take(ag.concat([a, b], axis=1), [0, 5, 7, 5], axis=1) ** 2),
        "mean_broadcast": lambda a, b: ag.sum_((a - ag.mean(a, axis=0, keepdims=True)) ** 2 * b),
        "clip_sigmoid": lambda a, b: ag.sum_(ag.clip(ag.sigmoid(a), 0.2, 0.8) * b),
    }

    @pytest.mark.parametrize("name", sorted(OPS))
    def test_op_finite_differences(self, name):
        rng = np.random.default_rng(abs(hash(name)) % 2**32)
        p = Params({"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(3, 4))})
        fn = self.OPS[name]
        report = check_gradients(lambda q: fn(q["a"], q["b"]), p, points=20)
        assert max(report.values()) <= 1e-3, report

    def test_conv_and_pool(self):
        rng = np.random.default_rng(4)
        p = Params({"x": rng.normal(size=(2, 4, 4, 3)), "w": rng.normal(size=(3, 3, 3, 2)) * 0.3})

        def loss(q):
            return ag.sum_(ag.avg_pool(ag.conv2d(q["x"], q["w"]), 2) ** 2)

        assert max(check_gradients(loss, p, points=20).values()) <= 1e-3

    def test_no_grad_builds_no_graph(self):
        w = Tensor(np.ones(3), requires_grad=True)
        with ag.no_grad():
            y = w * 2.0
        assert not y.requires_grad

    def test_shared_subexpression_accumulates(self):
        p = Params({"w": [3.0]})
        gradients(lambda q: ag.sum_(q["w"] * q["w"] * q["w"]), p)
        np.testing.assert_allclose(p.grad("w"), [27.0])


class TestKernels:
    def test_numpy_matches_direct_sum(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(1, 3, 3, 2))
        w = rng.normal(size=(3, 3, 2, 1))
        out = kernels.conv2d_forward_numpy(x, w)
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        for i in range(3):
            for j in range(3):
                assert out[0, i, j, 0] == pytest.approx(np.sum(xp[0, i:i + 3, j:j + 3, :] * w[..., 0]))

    @pytest.mark.skipif(not kernels.HAS_NUMBA, reason="numba not installed")
    def test_backends_agree(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 6, 5, 3))
        w = rng.normal(size=(3, 3, 3, 4))
        g = rng.normal(size=(2, 6, 5, 4))
        np.testing.assert_allclose(kernels.conv2d_forward_numba(x, w), kernels.conv2d_forward_numpy(x, w),
                                   atol=1e-12)
        for a, b in zip(kernels.conv2d_backward_numba(x, w, g), kernels.conv2d_backward_numpy(x, w, g)):
            np.testing.assert_allclose(a, b, atol=1e-12)

    def test_backend_flag(self):
        assert kernels.BACKEND in ("numba", "numpy")


class TestTensorIO:
    def test_round_trip(self, tmp_path):
        a = np.random.default_rng(0).normal(size=(4, 3, 2)).astype(np.float32)
        save_tensor(tmp_path / "a.t", a)
        np.testing.assert_array_equal(load_tensor(tmp_path / "a.t"), a)

    def test_header_layout(self):
        buf = tensorio.to_bytes(np.zeros((2, 3), np.float32))
        assert buf[:4] == b"EPSG"
        assert int.from_bytes(buf[4:8], "little") == 2
        assert int.from_bytes(buf[8:12], "little") == 2
        assert int.from_bytes(buf[12:16], "little") == 3
        assert len(buf) == 16 + 6 * 4

    def test_rank3_header_padded(self):
        buf = tensorio.to_bytes(np.zeros((2, 2, 1), np.float32))
        assert len(buf) == 32 + 4 * 4

    def test_bad_magic(self):
        with pytest.raises(ValueError, match="magic"):
            tensorio.from_bytes(b"NOPE" + b"\0" * 12)

    def test_truncated(self):
        buf = tensorio.to_bytes(np.zeros(5, np.float32))
        with pytest.raises(ValueError):
            tensorio.from_bytes(buf[:-1])
