"""Per-channel feature statistics and standardisation.

Feature maps are channel-last: (H, W, C) for one map or (B, H, W, C) for a
batch.  Statistics reduce over the two spatial axes only.
"""
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor, as_tensor

EPS_STD = 1e-5


@dataclass
class ChannelStats:
    mean: Tensor
    std: Tensor

    @property
    def channels(self):
        return self.mean.shape[-1]


def _spatial_axes(f):
    if f.ndim not in (3, 4):
        raise ValueError(f"feature map must be rank 3 or 4, got shape {f.shape}")
    return (f.ndim - 3, f.ndim - 2)


def channel_stats(f, eps=EPS_STD):
    """Spatial mean and population std (+eps inside the root) of each channel."""
    f = as_tensor(f)
    axes = _spatial_axes(f)
    if f.data.size == 0 or f.shape[axes[0]] * f.shape[axes[1]] == 0:
        raise ValueError("degenerate feature map")
    mu = ag.mean(f, axis=axes, keepdims=True)
    var = ag.mean((f - mu) ** 2, axis=axes, keepdims=True)
    sigma = ag.sqrt(var + eps) if eps else ag.sqrt(var)
    lead = f.shape[:-3]
    C = f.shape[-1]
    return ChannelStats(ag.reshape(mu, lead + (C,)), ag.reshape(sigma, lead + (C,)))


def _expand(v):
    # (..., C) -> (..., 1, 1, C) so it broadcasts over the spatial axes
    v = as_tensor(v)
    return ag.reshape(v, v.shape[:-1] + (1, 1, v.shape[-1]))


def standardize(f, s):
    if np.any(s.std.data <= 0):
        raise ValueError("standardize: channel std must be strictly positive")
    return (as_tensor(f) - _expand(s.mean)) / _expand(s.std)


def destandardize(z, s):
    return as_tensor(z) * _expand(s.std) + _expand(s.mean)


def scale_shift(z, scale, shift):
    """``scale * z + shift`` with per-channel (..., C) scale and shift."""
    return as_tensor(z) * _expand(scale) + _expand(shift)


def softmax(v, axis=-1):
    """Numerically stable softmax of a plain array (no graph)."""
    v = np.asarray(v, dtype=np.float64)
    z = np.exp(v - v.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)
