import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from episeg import augment
from episeg.augment import (
    MixedStats, SampledStats, StatUncertainty, apply_ufa, estimate_uncertainty, mix_stats, reparameterize,
    ufa_hook,
)
from episeg.numcore import Params, Rng, Tensor, channel_stats, check_gradients
from episeg.numcore import autograd as ag
from episeg.numcore.stats import ChannelStats


def stats(mu, sigma):
    return ChannelStats(Tensor(np.asarray(mu, float)), Tensor(np.asarray(sigma, float)))


def sampled(alpha, beta):
    return SampledStats(Tensor(np.asarray(alpha, float)), Tensor(np.asarray(beta, float)))


class TestEstimateUncertainty:
    def test_identical_batch(self):
        u = estimate_uncertainty([stats([1, 2], [3, 4])] * 5)
        np.testing.assert_array_equal(u.var_mu, 0.0)
        np.testing.assert_array_equal(u.var_sigma, 0.0)
        assert u.batch_size == 5

    def test_single_sample(self):
        u = estimate_uncertainty([stats([1.5, -2.0], [0.3, 0.7])])
        np.testing.assert_array_equal(u.var_mu, 0.0)
        np.testing.assert_array_equal(u.var_sigma, 0.0)

    def test_population_variance(self):
        u = estimate_uncertainty([stats([1.0], [1.0]), stats([3.0], [1.0])])
        assert u.var_mu[0] == pytest.approx(1.0)
        assert u.var_sigma[0] == 0.0

    def test_batched_form(self):
        rng = np.random.default_rng(0)
        mu, sd = rng.normal(size=(6, 3)), rng.uniform(0.5, 2, size=(6, 3))
        u = estimate_uncertainty(stats(mu, sd))
        np.testing.assert_allclose(u.var_mu, mu.var(axis=0))
        np.testing.assert_allclose(u.var_sigma, sd.var(axis=0))

    def test_errors(self):
        with pytest.raises(ValueError):
            estimate_uncertainty([])
        with pytest.raises(ValueError, match="mismatched"):
            estimate_uncertainty([stats([1, 2], [1, 1]), stats([1], [1])])


class TestReparameterize:
    def test_zero_uncertainty_is_identity(self):
        s = stats([0.3, -1.0], [0.5, 2.0])
        u = StatUncertainty(np.zeros(2), np.zeros(2), 4)
        out = reparameterize(s, u, Rng(1))
        np.testing.assert_array_equal(out.alpha.data, s.mean.data)
        np.testing.assert_array_equal(out.beta.data, s.std.data)

    def test_forced_noise(self):
        out = reparameterize(stats([0.0], [1.0]), StatUncertainty(np.ones(1), np.zeros(1), 2), Rng(0),
                             eps_mu=[2.0], eps_sigma=[0.0])
        assert out.alpha.data[0] == pytest.approx(2.0)

    def test_beta_clamped(self):
        out = reparameterize(stats([0.0], [0.1]), StatUncertainty(np.zeros(1), np.ones(1), 2), Rng(0),
                             eps_mu=[0.0], eps_sigma=[-5.0])
        assert out.beta.data[0] == 0.0

    def test_stddev_mode(self):
        u = StatUncertainty(np.array([4.0]), np.array([9.0]), 2)
        out = reparameterize(stats([1.0], [1.0]), u, Rng(0), "stddev", eps_mu=[1.0], eps_sigma=[1.0])
        assert out.alpha.data[0] == pytest.approx(3.0)
        assert out.beta.data[0] == pytest.approx(4.0)
        out = reparameterize(stats([1.0], [1.0]), u, Rng(0), "variance", eps_mu=[1.0], eps_sigma=[1.0])
        assert out.alpha.data[0] == pytest.approx(5.0)

    def test_noise_per_channel(self):
        u = StatUncertainty(np.ones(64), np.zeros(64), 2)
        out = reparameterize(stats(np.zeros(64), np.ones(64)), u, Rng(3))
        assert len(np.unique(out.alpha.data)) == 64

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            reparameterize(stats([0.0], [1.0]), StatUncertainty(np.zeros(1), np.zeros(1), 1), Rng(0), "nope")


class TestMixStats:
    def test_endpoints(self):
        q, s = sampled([1, 2], [3, 4]), sampled([5, 6], [7, 8])
        m1 = mix_stats(q, s, Rng(0), lam=1.0)
        np.testing.assert_array_equal(m1.alpha_hat.data, q.alpha.data)
        np.testing.assert_array_equal(m1.beta_hat.data, q.beta.data)
        m0 = mix_stats(q, s, Rng(0), lam=0.0)
        np.testing.assert_array_equal(m0.alpha_hat.data, s.alpha.data)
        np.testing.assert_array_equal(m0.beta_hat.data, s.beta.data)

    def test_midpoint(self):
        m = mix_stats(sampled([0, 2], [1, 1]), sampled([2, 0], [1, 1]), Rng(0), lam=0.5)
        np.testing.assert_allclose(m.alpha_hat.data, [1.0, 1.0])

    def test_one_lambda_per_episode(self):
        rng = np.random.default_rng(0)
        q = sampled(rng.normal(size=(5, 4)), np.ones((5, 4)))
        s = sampled(rng.normal(size=(5, 4)), np.ones((5, 4)))
        m = mix_stats(q, s, Rng(2))
        lam = np.asarray(m.lam)
        assert lam.shape == (5,)
        np.testing.assert_allclose(m.alpha_hat.data, lam[:, None] * q.alpha.data + (1 - lam[:, None]) * s.alpha.data)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_hull(self, seed):
        rng = np.random.default_rng(seed)
        q = sampled(rng.normal(size=6), rng.uniform(0, 2, 6))
        s = sampled(rng.normal(size=6), rng.uniform(0, 2, 6))
        m = mix_stats(q, s, Rng(seed))
        assert 0.0 <= m.lam <= 1.0
        for a, b, h in ((q.alpha, s.alpha, m.alpha_hat), (q.beta, s.beta, m.beta_hat)):
            lo, hi = np.minimum(a.data, b.data), np.maximum(a.data, b.data)
            assert np.all(h.data >= lo - 1e-12) and np.all(h.data <= hi + 1e-12)


class TestApplyUFA:
    def test_identity_reconstruction(self):
        f = np.random.default_rng(0).normal(size=(5, 6, 3)) * 2 + 1
        s = channel_stats(f)
        out = apply_ufa(f, MixedStats(s.mean, s.std, 1.0))
        np.testing.assert_allclose(out.data, f, atol=1e-5)

    def test_constant_map(self):
        m = MixedStats(Tensor([3.0, -1.0]), Tensor([2.0, 5.0]), 1.0)
        out = apply_ufa(np.zeros((3, 3, 2)), m)
        np.testing.assert_allclose(out.data, np.broadcast_to([3.0, -1.0], (3, 3, 2)))

    def test_hand_computed(self):
        f = np.array([0.0, 2.0]).reshape(1, 2, 1)
        out = apply_ufa(f, MixedStats(Tensor([10.0]), Tensor([3.0]), 0.5), eps=0.0)
        np.testing.assert_allclose(out.data.ravel(), [7.0, 13.0])

    def test_carries_mixed_statistics(self):
        rng = np.random.default_rng(1)
        f = rng.normal(size=(4, 5, 3))
        m = MixedStats(Tensor(rng.normal(size=3)), Tensor(rng.uniform(0.5, 2, 3)), 0.3)
        out = apply_ufa(f, m, eps=0.0)
        s = channel_stats(out, eps=0.0)
        np.testing.assert_allclose(s.mean.data, m.alpha_hat.data, atol=1e-9)
        np.testing.assert_allclose(s.std.data, m.beta_hat.data, atol=1e-9)

    def test_gradient(self):
        rng = np.random.default_rng(2)
        p = Params({"f": rng.normal(size=(3, 4, 2))})
        m = MixedStats(Tensor(rng.normal(size=2)), Tensor(rng.uniform(0.5, 2, 2)), 0.4)
        w = rng.normal(size=(3, 4, 2))
        report = check_gradients(lambda q: ag.sum_(apply_ufa(q["f"], m) * w), p, points=20)
        assert report["f"] <= 1e-3


class TestHook:
    def batch(self, B=3, K=2, seed=0):
        rng = np.random.default_rng(seed)
        return Tensor(rng.normal(size=(B, 4, 4, 3))), Tensor(rng.normal(size=(B, K, 4, 4, 3)))

    def test_eval_is_identity(self):
        fq, fs = self.batch()
        copy_q, copy_s = fq.data.copy(), fs.data.copy()
        oq, os_ = ufa_hook(fq, fs, "eval", Rng(0))
        assert oq is fq and os_ is fs
        assert oq.data.tobytes() == copy_q.tobytes() and os_.data.tobytes() == copy_s.tobytes()

    def test_single_episode_collapse(self):
        fq, fs = self.batch(B=1, K=1)
        oq, _ = ufa_hook(fq, fs, "train", Rng(0), lam=1.0)
        np.testing.assert_allclose(oq.data, fq.data, atol=1e-4)

    def test_support_untouched_query_only(self):
        fq, fs = self.batch()
        before = fs.data.tobytes()
        oq, os_ = ufa_hook(fq, fs, "train", Rng(0))
        assert os_.data.tobytes() == before
        assert not np.allclose(oq.data, fq.data)

    def test_both_targets_support(self):
        fq, fs = self.batch()
        _, os_ = ufa_hook(fq, fs, "train", Rng(0), target="both")
        assert os_.shape == fs.shape
        assert not np.allclose(os_.data, fs.data)

    def test_deterministic(self):
        fq, fs = self.batch()
        a, _ = ufa_hook(fq, fs, "train", Rng(5))
        b, _ = ufa_hook(fq, fs, "train", Rng(5))
        assert a.data.tobytes() == b.data.tobytes()

    def test_counts_calls(self):
        fq, fs = self.batch()
        n = augment.calls["ufa_hook"]
        ufa_hook(fq, fs, "eval", Rng(0))
        assert augment.calls["ufa_hook"] == n
        ufa_hook(fq, fs, "train", Rng(0))
        assert augment.calls["ufa_hook"] == n + 1

    def test_bad_mode(self):
        fq, fs = self.batch()
        with pytest.raises(ValueError):
            ufa_hook(fq, fs, "predict", Rng(0))
