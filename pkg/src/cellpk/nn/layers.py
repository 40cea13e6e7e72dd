"""Forward/backward kernels for each layer kind.

Every ``*_forward`` returns ``(output, cache)``; the matching ``*_backward``
takes the upstream gradient and the cache and returns
``(input_grads, param_grads)`` where ``input_grads`` is a list aligned with the
node's inputs and ``param_grads`` maps "weight"/"bias" to arrays.

Layouts: images are NCHW, conv kernels are (F, C, k, k), dense weights are
(in, out).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv2d_forward(x, w, b, stride=1, padding=0):
    n, c, h, wd = x.shape
    f, _, k, _ = w.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    out = cols @ w.reshape(f, -1).T + b
    out = out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (cols, x.shape, w, stride, padding, (ho, wo))


def conv2d_backward(dout, cache):
    cols, padded_shape, w, stride, padding, (ho, wo) = cache
    f, c, k, _ = w.shape
    n = dout.shape[0]
    dflat = dout.transpose(0, 2, 3, 1).reshape(-1, f)
    dw = (dflat.T @ cols).reshape(w.shape)
    db = dflat.sum(axis=0)
    # scatter back in NHWC so each (i, j) slice moves whole channel vectors
    wmat = w.transpose(0, 2, 3, 1).reshape(f, -1)
    dcols = (dflat @ wmat).reshape(n, ho, wo, k, k, c)
    _, _, hp, wp = padded_shape
    dx = np.zeros((n, hp, wp, c), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, :, i, j]
    dx = dx.transpose(0, 3, 1, 2)
    if padding:
        dx = dx[:, :, padding:-padding, padding:-padding]
    return [dx], {"weight": dw, "bias": db}


def dense_forward(x, w, b):
    return x @ w + b, (x, w)


def dense_backward(dout, cache):
    x, w = cache
    return [dout @ w.T], {"weight": x.T @ dout, "bias": dout.sum(axis=0)}


def maxpool_forward(x, size=2):
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    xc = x[:, :, : ho * size, : wo * size]
    blocks = xc.reshape(n, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, -1)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, idx, size)


def maxpool_backward(dout, cache):
    shape, idx, size = cache
    n, c, h, w = shape
    ho, wo = dout.shape[2], dout.shape[3]
    dblocks = np.zeros((n, c, ho, wo, size * size), dtype=dout.dtype)
    # only the first maximum of each window receives gradient
    np.put_along_axis(dblocks, idx[..., None], dout[..., None], axis=-1)
    dblocks = dblocks.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5)
    dx = np.zeros(shape, dtype=dout.dtype)
    dx[:, :, : ho * size, : wo * size] = dblocks.reshape(n, c, ho * size, wo * size)
    return [dx], {}


def relu_forward(x):
    mask = x > 0
    return np.where(mask, x, np.zeros((), dtype=x.dtype)), mask


def relu_backward(dout, mask):
    return [np.where(mask, dout, np.zeros((), dtype=dout.dtype))], {}


def sigmoid_forward(x):
    # tanh form is overflow-free and gives exactly 0.5 at 0
    y = 0.5 * (1.0 + np.tanh(0.5 * x))
    return y.astype(x.dtype, copy=False), y


def sigmoid_backward(dout, y):
    return [(dout * y * (1.0 - y)).astype(dout.dtype, copy=False)], {}


def dropout_forward(x, p, rng):
    keep = rng.random(x.shape) >= p
    scale = np.asarray(1.0 / (1.0 - p), dtype=x.dtype)
    mask = keep.astype(x.dtype) * scale
    return x * mask, mask


def dropout_backward(dout, mask):
    return [dout * mask], {}


def global_avg_pool_forward(x):
    return x.mean(axis=(2, 3)), x.shape


def global_avg_pool_backward(dout, shape):
    n, c, h, w = shape
    dx = np.broadcast_to((dout / (h * w))[:, :, None, None], shape).astype(dout.dtype)
    return [dx], {}


def flatten_forward(x):
    return x.reshape(x.shape[0], -1), x.shape


def flatten_backward(dout, shape):
    return [dout.reshape(shape)], {}


def concat_forward(xs):
    return np.concatenate(xs, axis=1), [x.shape[1] for x in xs]


def concat_backward(dout, widths):
    splits = np.cumsum(widths)[:-1]
    return list(np.split(dout, splits, axis=1)), {}
