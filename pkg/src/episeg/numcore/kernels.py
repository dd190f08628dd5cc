"""3x3 same-padding convolution kernels (NHWC layout).

Two implementations are kept side by side: explicit loops compiled with
numba, and a shifted-matmul numpy path.  ``EPISEG_NUMBA=0`` in the
environment forces the numpy path; it is also used when numba cannot be
imported.  Both paths compute the same sums in a different order, so they
agree to rounding error only.  Runs are bitwise reproducible within one
backend.
"""
import os

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and os.environ.get("EPISEG_NUMBA", "1").lower() not in ("0", "false", "no", "off")
BACKEND = "numba" if USE_NUMBA else "numpy"


def _pad(x):
    return np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))


# ---------------------------------------------------------------- numpy path


def conv2d_forward_numpy(x, w):
    B, H, W, Ci = x.shape
    Co = w.shape[3]
    xp = _pad(x)
    out = np.zeros((B * H * W, Co))
    for kh in range(3):
        for kw in range(3):
            patch = xp[:, kh:kh + H, kw:kw + W, :].reshape(-1, Ci)
            out += patch @ w[kh, kw]
    return out.reshape(B, H, W, Co)


def conv2d_backward_numpy(x, w, gout):
    B, H, W, Ci = x.shape
    Co = w.shape[3]
    xp = _pad(x)
    g2 = gout.reshape(-1, Co)
    gxp = np.zeros_like(xp)
    gw = np.empty_like(w)
    for kh in range(3):
        for kw in range(3):
            patch = xp[:, kh:kh + H, kw:kw + W, :].reshape(-1, Ci)
            gw[kh, kw] = patch.T @ g2
            gxp[:, kh:kh + H, kw:kw + W, :] += (g2 @ w[kh, kw].T).reshape(B, H, W, Ci)
    return gxp[:, 1:-1, 1:-1, :], gw


# ---------------------------------------------------------------- numba path

if HAS_NUMBA:

    @njit(cache=True)
    def _conv_fwd_loops(xp, w, out):
        B, H, W, Co = out.shape
        Ci = w.shape[2]
        for b in range(B):
            for i in range(H):
                for j in range(W):
                    for kh in range(3):
                        for kw in range(3):
                            for ci in range(Ci):
                                v = xp[b, i + kh, j + kw, ci]
                                if v == 0.0:
                                    continue
                                for co in range(Co):
                                    out[b, i, j, co] += v * w[kh, kw, ci, co]

    @njit(cache=True)
    def _conv_bwd_loops(xp, w, gout, gxp, gw):
        B, H, W, Co = gout.shape
        Ci = w.shape[2]
        for b in range(B):
            for i in range(H):
                for j in range(W):
                    for kh in range(3):
                        for kw in range(3):
                            for ci in range(Ci):
                                v = xp[b, i + kh, j + kw, ci]
                                acc = 0.0
                                for co in range(Co):
                                    g = gout[b, i, j, co]
                                    acc += g * w[kh, kw, ci, co]
                                    gw[kh, kw, ci, co] += v * g
                                gxp[b, i + kh, j + kw, ci] += acc


def conv2d_forward_numba(x, w):
    if not HAS_NUMBA:
        raise RuntimeError("numba is not available")
    B, H, W, _ = x.shape
    out = np.zeros((B, H, W, w.shape[3]))
    _conv_fwd_loops(_pad(np.ascontiguousarray(x, dtype=np.float64)),
                    np.ascontiguousarray(w, dtype=np.float64), out)
    return out


def conv2d_backward_numba(x, w, gout):
    if not HAS_NUMBA:
        raise RuntimeError("numba is not available")
    xp = _pad(np.ascontiguousarray(x, dtype=np.float64))
    gxp = np.zeros_like(xp)
    gw = np.zeros(w.shape)
    _conv_bwd_loops(xp, np.ascontiguousarray(w, dtype=np.float64),
                    np.ascontiguousarray(gout, dtype=np.float64), gxp, gw)
    return gxp[:, 1:-1, 1:-1, :], gw


if USE_NUMBA:
    conv2d_forward = conv2d_forward_numba
    conv2d_backward = conv2d_backward_numba
else:
    conv2d_forward = conv2d_forward_numpy
    conv2d_backward = conv2d_backward_numpy
