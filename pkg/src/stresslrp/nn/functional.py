"""Batched convolution and pooling kernels on ``(N, C, H, W)`` arrays.

These are shared by training (forward/backward) and by relevance
propagation, which needs the same linear maps and their adjoints.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def im2col(x, kh, kw, stride, pad):
    """Return ``(cols, (Ho, Wo))`` with ``cols`` shaped ``(N*Ho*Wo, C*kh*kw)``."""
    ph, pw = pad
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return cols, (ho, wo)


def col2im(dcols, x_shape, kh, kw, stride, pad, out_hw):
    n, c, h, w = x_shape
    ph, pw = pad
    ho, wo = out_hw
    d = dcols.reshape(n, ho, wo, c, kh, kw)
    dxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += d[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, ph : ph + h, pw : pw + w]


def conv2d(x, weight, bias, stride, pad, return_cols=False):
    o, _, kh, kw = weight.shape
    cols, (ho, wo) = im2col(x, kh, kw, stride, pad)
    y = cols @ weight.reshape(o, -1).T
    if bias is not None:
        y = y + bias
    y = y.reshape(x.shape[0], ho, wo, o).transpose(0, 3, 1, 2)
    if return_cols:
        return y, cols
    return y


def conv2d_input_grad(dy, weight, x_shape, stride, pad):
    """Adjoint of the convolution with respect to its input."""
    o, _, kh, kw = weight.shape
    ho, wo = dy.shape[2:]
    dym = dy.transpose(0, 2, 3, 1).reshape(-1, o)
    return col2im(dym @ weight.reshape(o, -1), x_shape, kh, kw, stride, pad, (ho, wo))


def conv2d_weight_grad(dy, cols, weight_shape):
    o = weight_shape[0]
    dym = dy.transpose(0, 2, 3, 1).reshape(-1, o)
    return (dym.T @ cols).reshape(weight_shape), dym.sum(axis=0)


def pool_windows(x, k, stride):
    return sliding_window_view(x, k, axis=(2, 3))[:, :, ::stride, ::stride]


def avg_pool(x, k, stride):
    return pool_windows(x, k, stride).mean(axis=(4, 5))


def avg_pool_input_grad(dy, x_shape, k, stride):
    kh, kw = k
    ho, wo = dy.shape[2:]
    dx = np.zeros(x_shape, dtype=dy.dtype)
    g = dy / (kh * kw)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += g
    return dx


def max_pool(x, k, stride):
    """Return pooled values and the flat in-window index of each winner."""
    win = pool_windows(x, k, stride)
    flat = win.reshape(win.shape[:4] + (-1,))
    arg = flat.argmax(axis=-1)
    return np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0], arg


def max_pool_scatter(dy, arg, x_shape, k, stride):
    """Route each pooled value back to its window winner (first maximum on ties)."""
    kh, kw = k
    ho, wo = dy.shape[2:]
    dx = np.zeros(x_shape, dtype=dy.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dy * (arg == i * kw + j)
    return dx
