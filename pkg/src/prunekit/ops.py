"""Dense 4-d tensor kernels with hand-written backward passes.

All activations are (batch, channels, height, width) arrays.  Kernels are
dtype-generic: training runs in float32, gradient checking feeds float64
through the same code paths.  Each forward returns ``(output, cache)`` and
the matching backward consumes ``cache`` and the upstream gradient, so a
network executor can replay layers in exact reverse order.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import StructuralError


def check_tensor4(x: np.ndarray, what: str = "tensor") -> None:
    if x.ndim != 4:
        raise StructuralError(f"{what}: expected 4-d (n,c,h,w), got shape {x.shape}")
    if any(d < 1 for d in x.shape):
        raise StructuralError(f"{what}: all dims must be >= 1, got {x.shape}")


def assert_finite(x: np.ndarray, what: str = "tensor") -> None:
    """Assertable finiteness mode used by tests and the divergence guard."""
    if not np.isfinite(x).all():
        raise StructuralError(f"{what}: contains NaN or Inf")


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    out = (size + 2 * padding - kernel) // stride + 1
    if out < 1:
        raise StructuralError(
            f"kernel {kernel} (pad {padding}) does not fit input extent {size}"
        )
    return out


# ---------------------------------------------------------------------------
# convolution

def conv2d_forward(x, weight, bias, stride=1, padding=0):
    """Cross-correlation of x (n,cin,h,w) with weight (cout,cin,kh,kw)."""
    check_tensor4(x, "conv input")
    n, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise StructuralError(f"conv: input has {cin} channels, kernel expects {cin_w}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)

    if padding:
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win[:, :, :ho, :wo]
    # (n, ho, wo, cin*kh*kw) patch matrix; reused by backward for the weight grad
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * kh * kw)
    out = cols @ weight.reshape(cout, -1).T
    if bias is not None:
        out = out + bias
    y = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    cache = (x.shape, cols, weight, bias is not None, stride, padding)
    return np.ascontiguousarray(y), cache


def conv2d_backward(dy, cache):
    """Returns (dx, dweight, dbias); dbias is None when the conv has no bias."""
    x_shape, cols, weight, has_bias, stride, padding = cache
    n, cin, h, w = x_shape
    cout, _, kh, kw = weight.shape
    _, _, ho, wo = dy.shape

    dy_mat = dy.transpose(0, 2, 3, 1).reshape(-1, cout)
    dw = (dy_mat.T @ cols).reshape(weight.shape)
    db = dy_mat.sum(axis=0) if has_bias else None

    dcols = dy_mat @ weight.reshape(cout, -1)
    dwin = dcols.reshape(n, ho, wo, cin, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    hp, wp = h + 2 * padding, w + 2 * padding
    dxp = np.zeros((n, cin, hp, wp), dtype=dy.dtype)
    # scatter per kernel offset: target slices are disjoint for fixed (u, v)
    for u in range(kh):
        for v in range(kw):
            dxp[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride] += dwin[:, :, :, :, u, v]
    if padding:
        dx = dxp[:, :, padding:padding + h, padding:padding + w]
    else:
        dx = dxp
    return np.ascontiguousarray(dx), dw, db


# ---------------------------------------------------------------------------
# batch normalization

def batchnorm_forward(x, gamma, beta, running_mean, running_var,
                      eps=1e-5, momentum=0.1, training=False):
    """Per-channel normalization.

    Train mode normalizes with batch statistics (population variance) and
    returns updated running statistics; eval mode uses the running
    statistics unchanged.
    """
    check_tensor4(x, "batchnorm input")
    c = x.shape[1]
    if gamma.shape[0] != c:
        raise StructuralError(f"batchnorm: input has {c} channels, params have {gamma.shape[0]}")
    if training:
        mu = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        new_mean = (1.0 - momentum) * running_mean + momentum * mu
        new_var = (1.0 - momentum) * running_var + momentum * var
    else:
        mu, var = running_mean, running_var
        new_mean, new_var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu[None, :, None, None]) * inv_std[None, :, None, None]
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    cache = (xhat, gamma, inv_std, training)
    return y.astype(x.dtype, copy=False), cache, new_mean, new_var


def batchnorm_backward(dy, cache):
    xhat, gamma, inv_std, training = cache
    n, c, h, w = dy.shape
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    dxhat = dy * gamma[None, :, None, None]
    if not training:
        # eval statistics are constants w.r.t. the input
        dx = dxhat * inv_std[None, :, None, None]
        return dx, dgamma, dbeta
    m = n * h * w
    s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
    s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
    dx = (inv_std[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)
    return dx.astype(dy.dtype, copy=False), dgamma, dbeta


# ---------------------------------------------------------------------------
# activations and pooling

def relu_forward(x):
    y = np.maximum(x, 0)
    return y, (x > 0)


def relu_backward(dy, cache):
    return dy * cache


def maxpool_forward(x, kernel=2, stride=2):
    """Max pooling; ties resolved to the first (lowest linear index) maximum."""
    check_tensor4(x, "maxpool input")
    n, c, h, w = x.shape
    ho = conv_output_size(h, kernel, stride, 0)
    wo = conv_output_size(w, kernel, stride, 0)
    win = sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win[:, :, :ho, :wo].reshape(n, c, ho, wo, kernel * kernel)
    arg = win.argmax(axis=-1)  # np.argmax returns the first maximum
    y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    cache = (x.shape, arg, kernel, stride)
    return np.ascontiguousarray(y), cache


def maxpool_backward(dy, cache):
    x_shape, arg, kernel, stride = cache
    n, c, h, w = x_shape
    _, _, ho, wo = dy.shape
    dx = np.zeros(x_shape, dtype=dy.dtype)
    u, v = np.divmod(arg, kernel)
    oh = np.arange(ho)[None, None, :, None]
    ow = np.arange(wo)[None, None, None, :]
    rows = oh * stride + u
    cols = ow * stride + v
    bi = np.arange(n)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]
    np.add.at(dx, (bi, ci, rows, cols), dy)
    return dx


def global_avg_pool_forward(x):
    check_tensor4(x, "global pool input")
    y = x.mean(axis=(2, 3), keepdims=True)
    return y, x.shape


def global_avg_pool_backward(dy, x_shape):
    n, c, h, w = x_shape
    return np.broadcast_to(dy / (h * w), x_shape).astype(dy.dtype, copy=False)


# ---------------------------------------------------------------------------
# classifier head

def linear_forward(x, weight, bias):
    """Fully connected layer on a (n, f, 1, 1) activation; weight is (out, in)."""
    check_tensor4(x, "linear input")
    n = x.shape[0]
    flat = x.reshape(n, -1)
    if flat.shape[1] != weight.shape[1]:
        raise StructuralError(
            f"linear: input has {flat.shape[1]} features, weight expects {weight.shape[1]}"
        )
    y = flat @ weight.T
    if bias is not None:
        y = y + bias
    return y[:, :, None, None], (flat, weight, x.shape, bias is not None)


def linear_backward(dy, cache):
    flat, weight, x_shape, has_bias = cache
    dy_mat = dy.reshape(dy.shape[0], -1)
    dw = dy_mat.T @ flat
    db = dy_mat.sum(axis=0) if has_bias else None
    dx = (dy_mat @ weight).reshape(x_shape)
    return dx, dw, db


def softmax_forward(x):
    """Channel-wise softmax on a (n, classes, 1, 1) activation."""
    check_tensor4(x, "softmax input")
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    return p, p


def softmax_backward(dp, p):
    inner = (dp * p).sum(axis=1, keepdims=True)
    return p * (dp - inner)
