"""Pure NumPy implementations of the conv/pool hot kernels.

All arrays are float64, NHWC, C-contiguous. The compiled module
``_ckernels`` exposes the same four functions with the same semantics.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xp, k, stride, ho, wo):
    n, _, _, c = xp.shape
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # (N, Hp-k+1, Wp-k+1, C, k, k)
    win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, k * k * c)


def col2im(cols, n, hp, wp, c, k, stride, ho, wo):
    out = np.zeros((n, hp, wp, c))
    cols = cols.reshape(n, ho, wo, k, k, c)
    for i in range(k):
        for j in range(k):
            out[:, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride] += cols[
                :, :, :, i, j
            ]
    return out


def maxpool_forward(x, p, stride, ho, wo):
    """Returns pooled output and, per output cell, the flat ``h * W + w`` source index."""
    n, h, w, c = x.shape
    win = sliding_window_view(x, (p, p), axis=(1, 2))
    win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    flat = win.reshape(n, ho, wo, c, p * p)
    local = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]
    di, dj = np.divmod(local, p)
    rows = np.arange(ho)[None, :, None, None] * stride + di
    cols = np.arange(wo)[None, None, :, None] * stride + dj
    return np.ascontiguousarray(out), (rows * w + cols).astype(np.int64)


def maxpool_backward(dout, argmax, h, w):
    n, ho, wo, c = dout.shape
    dx = np.zeros((n, h * w, c))
    idx = argmax.reshape(n, ho * wo, c)
    nn_ = np.arange(n)[:, None, None]
    cc = np.arange(c)[None, None, :]
    np.add.at(dx, (nn_, idx, cc), dout.reshape(n, ho * wo, c))
    return dx.reshape(n, h, w, c)
