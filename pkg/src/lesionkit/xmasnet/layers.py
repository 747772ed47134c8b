"""Layer primitives with explicit backward passes.

Every ``*_forward`` returns ``(out, cache)`` and the matching ``*_backward`` takes
``(dout, cache)``. Tensors are NCHW. Functions keep the dtype of their inputs, so
the same code runs in float32 for training and float64 for gradient checks.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DegenerateBatch, ShapeMismatch

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def _im2col(x: np.ndarray) -> np.ndarray:
    # NHWC copy first: window gathers are then contiguous over channels
    n, c, h, w = x.shape
    xp = np.pad(x.transpose(0, 2, 3, 1), ((0, 0), (1, 1), (1, 1), (0, 0)))
    # (N, H, W, C, 3, 3) -> rows (n, y, x), columns (ky, kx, c)
    win = sliding_window_view(xp, (3, 3), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3)
    return win.reshape(n * h * w, 9 * c)


def conv3x3_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """3x3 cross-correlation, stride 1, zero padding 1."""
    if x.ndim != 4 or w.ndim != 4 or w.shape[2:] != (3, 3) or w.shape[1] != x.shape[1] or b.shape != (w.shape[0],):
        raise ShapeMismatch(f"conv3x3: input {x.shape}, weight {w.shape}, bias {b.shape}")
    n, c, h, wd = x.shape
    k = w.shape[0]
    cols = _im2col(x)
    out = cols @ w.transpose(0, 2, 3, 1).reshape(k, -1).T
    out += b
    out = out.reshape(n, h, wd, k).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (x.shape, cols, w)


def conv3x3_backward(dout: np.ndarray, cache, need_dx: bool = True):
    """Gradients (dx, dw, db); dx is None when ``need_dx`` is false."""
    (n, c, h, wd), cols, w = cache
    k = w.shape[0]
    dmat = dout.transpose(0, 2, 3, 1).reshape(-1, k)
    dw = (dmat.T @ cols).reshape(k, 3, 3, c).transpose(0, 3, 1, 2)
    db = dmat.sum(axis=0)
    dx = None
    if need_dx:
        # full correlation with the spatially flipped, channel-transposed kernel
        w_flip = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        dx, _ = conv3x3_forward(dout, w_flip, np.zeros(c, dtype=dout.dtype))
    return dx, np.ascontiguousarray(dw), db


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train: bool):
    """Per-channel batch normalization for (N, C, H, W) or (N, C) inputs.

    In train mode the running statistics are updated in place.
    """
    axes = (0, 2, 3) if x.ndim == 4 else (0,)
    shape = (1, -1, 1, 1) if x.ndim == 4 else (1, -1)
    if gamma.shape != (x.shape[1],):
        raise ShapeMismatch(f"batchnorm: input {x.shape}, gamma {gamma.shape}")
    if train:
        m = x.size // x.shape[1]
        if m < 2:
            raise DegenerateBatch("batch statistics need at least two values per channel")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        running_mean *= BN_MOMENTUM
        running_mean += (1 - BN_MOMENTUM) * mean
        running_var *= BN_MOMENTUM
        running_var += (1 - BN_MOMENTUM) * var
    else:
        mean, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + BN_EPS)).astype(x.dtype)
    xhat = (x - mean.reshape(shape).astype(x.dtype)) * inv_std.reshape(shape)
    out = xhat * gamma.reshape(shape) + beta.reshape(shape)
    return out, (xhat, inv_std, gamma, axes, shape, train)


def batchnorm_backward(dout, cache):
    xhat, inv_std, gamma, axes, shape, train = cache
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dxhat = dout * gamma.reshape(shape)
    if not train:
        return dxhat * inv_std.reshape(shape), dgamma, dbeta
    m = dout.size // dout.shape[1]
    dx = (inv_std.reshape(shape) / m) * (
        m * dxhat - dxhat.sum(axis=axes).reshape(shape) - xhat * (dxhat * xhat).sum(axis=axes).reshape(shape)
    )
    return dx, dgamma, dbeta


def relu_forward(x):
    return np.maximum(x, 0), x > 0


def relu_backward(dout, cache):
    return dout * cache


def maxpool2x2_forward(x):
    """2x2 max pooling, stride 2; ties resolve to the first element in row-major order."""
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeMismatch(f"maxpool2x2 needs even spatial dims, got {x.shape}")
    n, c, h, w = x.shape
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, (x.shape, arg)


def maxpool2x2_backward(dout, cache):
    (n, c, h, w), arg = cache
    win = np.zeros((n, c, h // 2, w // 2, 4), dtype=dout.dtype)
    np.put_along_axis(win, arg[..., None], dout[..., None], axis=-1)
    return win.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)


def fc_forward(x, w, b):
    """Affine layer with weight layout (out, in)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeMismatch(f"fc: input {x.shape}, weight {w.shape}, bias {b.shape}")
    return x @ w.T + b, (x, w)


def fc_backward(dout, cache):
    x, w = cache
    return dout @ w, dout.T @ x, dout.sum(axis=0)


def softmax_xent(logits, labels):
    """Mean cross-entropy over a batch; returns ``(loss, probs)``."""
    labels = np.asarray(labels).astype(np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeMismatch(f"softmax_xent: logits {logits.shape}, labels {labels.shape}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    loss = -log_probs[np.arange(labels.size), labels].mean()
    return float(loss), np.exp(log_probs)


def softmax_xent_backward(probs, labels):
    labels = np.asarray(labels).astype(np.int64)
    d = probs.copy()
    d[np.arange(labels.size), labels] -= 1
    return d / labels.size
