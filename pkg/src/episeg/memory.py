"""Class-shared memory: re-encoding features as attention over learnable vectors,
plus the foreground correlation reconstruction loss that trains them."""
import logging
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .numcore import autograd as ag
from .numcore.autograd import Tensor, as_tensor

log = logging.getLogger(__name__)

DEFAULT_NUM_VECTORS = 50

calls = Counter()


@dataclass
class MemoryBank:
    vectors: Tensor  # (N, C)

    @property
    def size(self):
        return self.vectors.shape[0]

    @property
    def dim(self):
        return self.vectors.shape[1]


def init_bank(n, dim, rng):
    """N(0, 1/dim) entries, trainable."""
    if n < 1 or dim < 1:
        raise ValueError(f"memory bank needs n >= 1 and dim >= 1, got ({n}, {dim})")
    vectors = rng.normal((n, dim)) / np.sqrt(dim)
    return MemoryBank(Tensor(vectors, requires_grad=True))


def _resolve_k(k, n):
    if k is None or k == "all":
        return n
    k = int(k)
    if k < 1 or k > n:
        raise ValueError(f"k={k} out of range for a bank of {n} vectors")
    return k


def attention_weights(f, bank, k="all", temperature=1.0):
    """Softmax weights over memory vectors for each pixel, shape (..., N)."""
    f = as_tensor(f)
    vectors = bank.vectors if isinstance(bank, MemoryBank) else as_tensor(bank)
    n, dim = vectors.shape
    if f.shape[-1] != dim:
        raise ValueError(f"feature channels {f.shape[-1]} != memory dim {dim}")
    k = _resolve_k(k, n)
    pixels = ag.reshape(f, (-1, dim))
    scores = ag.matmul(pixels, ag.transpose(vectors))
    if temperature != 1.0:
        scores = scores * (1.0 / temperature)
    keep = None
    if k < n:
        # stable sort keeps tie-breaking deterministic
        order = np.argsort(-scores.data, axis=1, kind="stable")[:, :k]
        keep = np.zeros(scores.shape, dtype=bool)
        np.put_along_axis(keep, order, True, axis=1)
    weights = ag.softmax(scores, axis=1, keep=keep)
    return ag.reshape(weights, f.shape[:-1] + (n,))


def reencode(f, bank, k="all", temperature=1.0):
    """Replace every pixel vector by a softmax-weighted sum of memory vectors.

    With finite ``k`` only the k most similar vectors (by dot product) take
    part and the softmax is renormalised over them.
    """
    calls["reencode"] += 1
    vectors = bank.vectors if isinstance(bank, MemoryBank) else as_tensor(bank)
    weights = attention_weights(f, bank, k, temperature)
    n = vectors.shape[0]
    out = ag.matmul(ag.reshape(weights, (-1, n)), vectors)
    return ag.reshape(out, as_tensor(f).shape)


def downsample_mask(mask, size):
    """Nearest-neighbour resize of a binary (H0, W0) mask, sampling source pixel centres."""
    mask = np.asarray(mask)
    H0, W0 = mask.shape[-2:]
    h, w = size
    rows = np.minimum(((np.arange(h) + 0.5) * H0 / h).astype(int), H0 - 1)
    cols = np.minimum(((np.arange(w) + 0.5) * W0 / w).astype(int), W0 - 1)
    return (mask[..., rows[:, None], cols[None, :]] > 0.5).astype(np.float64)


def _flat(f, mask):
    f = as_tensor(f)
    if f.ndim != 3:
        raise ValueError(f"expected a single (H, W, C) map, got {f.shape}")
    H, W, C = f.shape
    y = np.asarray(mask, dtype=np.float64).reshape(-1)
    if y.size != H * W:
        raise ValueError(f"mask has {y.size} entries, map has {H * W} pixels")
    return ag.reshape(f, (H * W, C)), y


def correlation(f_orig, f_re, mask):
    """(HW, HW) matrix of dot products between foreground-masked pixel vectors."""
    if as_tensor(f_orig).shape != as_tensor(f_re).shape:
        raise ValueError("correlation: map shapes differ")
    a, y = _flat(f_orig, mask)
    b, _ = _flat(f_re, mask)
    a = a * y[:, None]
    b = b * y[:, None]
    return ag.matmul(a, ag.transpose(b))


def recon_loss(f_orig, f_re, mask, mean=False):
    """Masked diagonal cross-entropy on the foreground correlation matrix.

    Each foreground row is softmax-normalised over the foreground columns and
    scored against its own column.  Fewer than two foreground pixels give 0.
    """
    if as_tensor(f_orig).shape != as_tensor(f_re).shape:
        raise ValueError("recon_loss: map shapes differ")
    a, y = _flat(f_orig, mask)
    b, _ = _flat(f_re, mask)
    fg = np.flatnonzero(y > 0.5)
    if fg.size < 2:
        log.warning("recon_loss: %d foreground pixel(s), returning 0", fg.size)
        return Tensor(0.0)
    corr = ag.matmul(ag.take(a, fg, axis=0), ag.transpose(ag.take(b, fg, axis=0)))
    logp = ag.log_softmax(corr, axis=1)
    diag = ag.sum_(logp * np.eye(fg.size))
    loss = -diag
    return loss * (1.0 / fg.size) if mean else loss
