"""Uncertainty-based feature augmentation.

Training-time only.  Per-channel statistics of query and support feature
maps are treated as Gaussians whose variance is the mini-batch variance of
that statistic; a perturbed sample is drawn for each stream, the two are
mixed with a Beta-distributed weight, and the query map is re-styled with the
mixed statistics.
"""
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .numcore import autograd as ag
from .numcore.autograd import Tensor, as_tensor
from .numcore.stats import ChannelStats, channel_stats, scale_shift, standardize

DEFAULT_GAMMA = 0.1
SCALE_MODES = ("variance", "stddev")
TARGETS = ("query_only", "both")

calls = Counter()


@dataclass
class StatUncertainty:
    var_mu: np.ndarray
    var_sigma: np.ndarray
    batch_size: int


@dataclass
class SampledStats:
    alpha: Tensor
    beta: Tensor


@dataclass
class MixedStats:
    alpha_hat: Tensor
    beta_hat: Tensor
    lam: object  # float, or (B,) array with one weight per episode


def estimate_uncertainty(batch_stats):
    """Population variance of mean and std across the batch, per channel.

    ``batch_stats`` is a list of single-map ``ChannelStats`` or one batched
    ``ChannelStats`` with (B, C) fields.  The result is a constant: no gradient
    flows back into the batch through these variances.
    """
    if isinstance(batch_stats, ChannelStats):
        mus = batch_stats.mean.data.reshape(-1, batch_stats.channels)
        sigmas = batch_stats.std.data.reshape(-1, batch_stats.channels)
    else:
        if len(batch_stats) == 0:
            raise ValueError("estimate_uncertainty: empty batch")
        widths = {s.channels for s in batch_stats}
        if len(widths) != 1:
            raise ValueError(f"estimate_uncertainty: mismatched channel counts {sorted(widths)}")
        mus = np.stack([s.mean.data.reshape(-1) for s in batch_stats])
        sigmas = np.stack([s.std.data.reshape(-1) for s in batch_stats])
    if mus.shape[0] == 0:
        raise ValueError("estimate_uncertainty: empty batch")
    n = mus.shape[0]
    if n == 1:
        zero = np.zeros(mus.shape[1])
        return StatUncertainty(zero, zero.copy(), 1)
    var_mu = ((mus - mus.mean(axis=0)) ** 2).mean(axis=0)
    var_sigma = ((sigmas - sigmas.mean(axis=0)) ** 2).mean(axis=0)
    return StatUncertainty(var_mu, var_sigma, n)


def reparameterize(s, u, rng, scale_mode="variance", eps_mu=None, eps_sigma=None):
    """Draw perturbed statistics ``mu + eps * Var(mu)`` and ``sigma + eps * Var(sigma)``.

    One standard normal per channel (and per map when ``s`` is batched).
    ``scale_mode="stddev"`` scales by the square root of the variance instead.
    ``eps_mu`` / ``eps_sigma`` override the draws (used by tests).  The sampled
    std is clamped at zero.
    """
    if scale_mode not in SCALE_MODES:
        raise ValueError(f"unknown scale_mode {scale_mode!r}")
    shape = s.mean.shape
    if u.var_mu.shape[-1] != shape[-1]:
        raise ValueError("reparameterize: channel mismatch between stats and uncertainty")
    if eps_mu is None:
        eps_mu = rng.normal(shape)
    if eps_sigma is None:
        eps_sigma = rng.normal(shape)
    scale_mu, scale_sigma = u.var_mu, u.var_sigma
    if scale_mode == "stddev":
        scale_mu, scale_sigma = np.sqrt(scale_mu), np.sqrt(scale_sigma)
    alpha = s.mean + np.asarray(eps_mu) * scale_mu
    beta = ag.relu(s.std + np.asarray(eps_sigma) * scale_sigma)
    return SampledStats(alpha, beta)


def mix_stats(q, s, rng, gamma=DEFAULT_GAMMA, lam=None):
    """Convex mix ``lam * query + (1 - lam) * support`` with ``lam ~ Beta(gamma, gamma)``.

    A single weight is drawn for unbatched stats; (B, C) stats get one weight
    per row (episode), never per channel.
    """
    if q.alpha.shape != s.alpha.shape:
        raise ValueError(f"mix_stats: shape mismatch {q.alpha.shape} vs {s.alpha.shape}")
    batched = q.alpha.ndim == 2
    if lam is None:
        if batched:
            lam = np.array([rng.beta(gamma) for _ in range(q.alpha.shape[0])])
        else:
            lam = rng.beta(gamma)
    w = np.asarray(lam, dtype=np.float64)
    if batched and w.ndim == 1:
        w = w[:, None]
    alpha_hat = q.alpha * w + s.alpha * (1.0 - w)
    beta_hat = q.beta * w + s.beta * (1.0 - w)
    return MixedStats(alpha_hat, beta_hat, lam)


def apply_ufa(f_q, m, eps=None):
    """Replace the per-channel statistics of ``f_q`` with the mixed ones."""
    f_q = as_tensor(f_q)
    if m.alpha_hat.shape[-1] != f_q.shape[-1]:
        raise ValueError("apply_ufa: channel mismatch")
    own = channel_stats(f_q) if eps is None else channel_stats(f_q, eps=eps)
    return scale_shift(standardize(f_q, own), m.beta_hat, m.alpha_hat)


def ufa_hook(f_q, f_s, mode, rng, target="query_only", gamma=DEFAULT_GAMMA, scale_mode="variance",
             lam=None):
    """Augment a mini-batch of query features at one encoder position.

    ``f_q`` is (B, H, W, C); ``f_s`` is (B, K, H, W, C).  In eval mode both
    inputs are returned unchanged (same objects).  Query uncertainty is the
    variance over the B query maps; support uncertainty pools all B*K support
    maps.  The support side of each episode contributes the mean of its K
    sampled statistics.  ``lam`` forces the mixing weight (tests).
    """
    if mode == "eval":
        return f_q, f_s
    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")
    if target not in TARGETS:
        raise ValueError(f"unknown ufa target {target!r}")
    calls["ufa_hook"] += 1
    f_q, f_s = as_tensor(f_q), as_tensor(f_s)
    B, K = f_s.shape[:2]
    flat_s = ag.reshape(f_s, (B * K,) + f_s.shape[2:])

    stats_q = channel_stats(f_q)
    stats_s = channel_stats(flat_s)
    unc_q = estimate_uncertainty(stats_q)
    unc_s = estimate_uncertainty(stats_s)
    samp_q = reparameterize(stats_q, unc_q, rng, scale_mode)
    samp_s = reparameterize(stats_s, unc_s, rng, scale_mode)
    C = f_q.shape[-1]
    per_episode_s = SampledStats(ag.mean(ag.reshape(samp_s.alpha, (B, K, C)), axis=1),
                                 ag.mean(ag.reshape(samp_s.beta, (B, K, C)), axis=1))
    mixed = mix_stats(samp_q, per_episode_s, rng, gamma, lam)
    out_q = apply_ufa(f_q, mixed)

    if target == "query_only":
        return out_q, f_s
    # support side mirrors the query side: its own samples mixed towards the episode's query samples
    rep_q = SampledStats(ag.reshape(ag.broadcast_to(ag.reshape(samp_q.alpha, (B, 1, C)), (B, K, C)), (B * K, C)),
                         ag.reshape(ag.broadcast_to(ag.reshape(samp_q.beta, (B, 1, C)), (B, K, C)), (B * K, C)))
    mixed_s = mix_stats(samp_s, rep_q, rng, gamma, None if lam is None else np.repeat(np.broadcast_to(lam, (B,)), K))
    out_s = apply_ufa(flat_s, mixed_s)
    return out_q, ag.reshape(out_s, f_s.shape)
