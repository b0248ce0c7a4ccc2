"""Forward/backward pairs for the few layer types the embedders need.

Images are NHWC float64 arrays. Every ``*_forward`` returns its output and a
cache; the matching ``*_backward`` takes the upstream gradient and the cache.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv3x3_forward(x, w, b):
    """Same-padded 3x3 convolution.

    Args:
        x: (N, H, W, C) input.
        w: (C, 3, 3, F) kernel.
        b: (F,) bias.
    """
    N, H, W, C = x.shape
    F = w.shape[-1]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = sliding_window_view(xp, (3, 3), axis=(1, 2)).reshape(N * H * W, C * 9)
    out = cols @ w.reshape(C * 9, F) + b
    return out.reshape(N, H, W, F), (cols, x.shape)


def conv3x3_backward(dout, cache, w):
    cols, (N, H, W, C) = cache
    F = w.shape[-1]
    d2 = dout.reshape(-1, F)
    dw = (cols.T @ d2).reshape(w.shape)
    db = d2.sum(axis=0)
    dcols = (d2 @ w.reshape(C * 9, F).T).reshape(N, H, W, C, 3, 3)
    dxp = np.zeros((N, H + 2, W + 2, C))
    for i in range(3):
        for j in range(3):
            dxp[:, i:i + H, j:j + W, :] += dcols[..., i, j]
    return dxp[:, 1:-1, 1:-1, :], dw, db


def relu_forward(x):
    return np.maximum(x, 0.0), x > 0


def relu_backward(dout, mask):
    return dout * mask


def avgpool2_forward(x):
    """2x2 average pooling with stride 2 (H and W must be even)."""
    N, H, W, C = x.shape
    return x.reshape(N, H // 2, 2, W // 2, 2, C).mean(axis=(2, 4)), x.shape


def avgpool2_backward(dout, shape):
    g = np.repeat(np.repeat(dout, 2, axis=1), 2, axis=2) * 0.25
    return g.reshape(shape)


def global_avg_forward(x):
    N, H, W, C = x.shape
    return x.mean(axis=(1, 2)), x.shape


def global_avg_backward(dout, shape):
    N, H, W, C = shape
    return np.broadcast_to(dout[:, None, None, :] / (H * W), shape).copy()


def dense_forward(x, w, b):
    """Affine map on the last axis: x (..., I) @ w (I, O) + b."""
    return x @ w + b, x


def dense_backward(dout, x, w):
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    return dout @ w.T, x2.T @ d2, d2.sum(axis=0)


def maxpool_points_forward(x):
    """Max over the point axis of (B, N, F); the first maximal point wins ties."""
    idx = np.argmax(x, axis=1)
    return np.take_along_axis(x, idx[:, None, :], axis=1)[:, 0, :], (idx, x.shape)


def maxpool_points_backward(dout, cache):
    idx, shape = cache
    dx = np.zeros(shape)
    np.put_along_axis(dx, idx[:, None, :], dout[:, None, :], axis=1)
    return dx


def l2normalize_forward(v):
    """Row-wise unit vectors; an exactly zero row maps to e1."""
    norm = np.linalg.norm(v, axis=1, keepdims=True)
    zero = norm[:, 0] == 0.0
    y = v / np.where(norm == 0.0, 1.0, norm)
    if np.any(zero):
        y[zero] = 0.0
        y[zero, 0] = 1.0
    return y, (y, norm, zero)


def l2normalize_backward(dy, cache):
    """Exact Jacobian (I - y y^T) / |v|; zero rows get zero gradient."""
    y, norm, zero = cache
    dv = (dy - y * (y * dy).sum(axis=1, keepdims=True)) / np.where(norm == 0.0, 1.0, norm)
    dv[zero] = 0.0
    return dv
