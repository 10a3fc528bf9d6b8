"""Forward and backward passes for each layer kind.

Functions are dtype-generic: training runs in float32, gradient checks in
float64.  Convolution is cross-correlation computed through im2col + GEMM.
"""

import numpy as np

from .. import _accel


def _pad(x, pad):
    if pad == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d_forward(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    cout, cin, k, _ = w.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    xp = _pad(x, pad)
    cols = _accel.im2col(xp, k, stride, ho, wo)
    out = w.reshape(cout, -1) @ cols  # (cout, n*ho*wo)
    if b is not None:
        out += b[:, None]
    out = np.ascontiguousarray(out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3))
    return out, (cols, xp.shape, x.shape, stride, pad, ho, wo)


def conv2d_backward(dout, cache, w, with_bias):
    cols, xp_shape, x_shape, stride, pad, ho, wo = cache
    cout, cin, k, _ = w.shape
    n = x_shape[0]
    d2 = np.ascontiguousarray(dout.transpose(1, 0, 2, 3)).reshape(cout, -1)
    dw = (d2 @ cols.T).reshape(w.shape)
    db = d2.sum(axis=1) if with_bias else None
    dcols = np.ascontiguousarray(w.reshape(cout, -1).T @ d2)
    dxp = _accel.col2im(dcols, n, cin, xp_shape[2], xp_shape[3], k, stride, ho, wo)
    dx = dxp[:, :, pad:pad + x_shape[2], pad:pad + x_shape[3]] if pad else dxp
    return np.ascontiguousarray(dx), dw, db


def linear_forward(x, w, b):
    # w: (out_features, in_features)
    out = x @ w.T
    if b is not None:
        out = out + b
    return out, x


def linear_backward(dout, x, w, with_bias):
    dw = dout.T @ x
    db = dout.sum(axis=0) if with_bias else None
    return dout @ w, dw, db


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    return dout * mask


def maxpool_forward(x, k, stride):
    n, c, h, w = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    out, arg = _accel.maxpool_forward(np.ascontiguousarray(x), k, stride, ho, wo)
    return out, (arg, h, w, k, stride)


def maxpool_backward(dout, cache):
    arg, h, w, k, stride = cache
    return _accel.maxpool_backward(np.ascontiguousarray(dout), arg, h, w, k, stride)


def gap_forward(x):
    return x.mean(axis=(2, 3)), x.shape


def gap_backward(dout, shape):
    n, c, h, w = shape
    g = dout / (h * w)
    return np.ascontiguousarray(np.broadcast_to(g[:, :, None, None], shape))


def batchnorm_forward(x, gamma, beta, running_mean, running_var, eps, momentum, training):
    """Per-channel normalisation; running statistics are updated in place when training."""
    if training:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        m = x.shape[0] * x.shape[2] * x.shape[3]
        unbiased = var * (m / max(m - 1, 1))
        running_mean *= 1 - momentum
        running_mean += momentum * mean.astype(running_mean.dtype)
        running_var *= 1 - momentum
        running_var += momentum * unbiased.astype(running_var.dtype)
    else:
        mean, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return out.astype(x.dtype, copy=False), (xhat.astype(x.dtype, copy=False), inv.astype(x.dtype), training)


def batchnorm_backward(dout, cache, gamma):
    xhat, inv, training = cache
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    dbeta = dout.sum(axis=(0, 2, 3))
    dxhat = dout * gamma[None, :, None, None]
    if training:
        m = dout.shape[0] * dout.shape[2] * dout.shape[3]
        dx = (inv[None, :, None, None] / m) * (
            m * dxhat
            - dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
            - xhat * (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
        )
    else:
        dx = dxhat * inv[None, :, None, None]
    return dx, dgamma, dbeta
