"""Pure numpy versions of the hot kernels.

Must stay bitwise identical to the compiled ``_kernels`` module: col2im adds
the nine kernel-offset contributions in (kh, kw) order starting from zero,
and pooling ties resolve to the first window element in row-major order.
"""
import numpy as np


def im2col3x3(x):
    """(N, C, H, W) -> (C*9, N*H*W) patch matrix for a padding-1 3x3 conv."""
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2, w + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x
    cols = np.empty((c, 3, 3, n, h, w), dtype=x.dtype)
    for kh in range(3):
        for kw in range(3):
            cols[:, kh, kw] = xp[:, :, kh : kh + h, kw : kw + w].transpose(1, 0, 2, 3)
    return cols.reshape(c * 9, n * h * w)


def col2im3x3(cols, shape):
    n, c, h, w = shape
    blocks = cols.reshape(c, 3, 3, n, h, w)
    xp = np.zeros((n, c, h + 2, w + 2), dtype=cols.dtype)
    for kh in range(3):
        for kw in range(3):
            xp[:, :, kh : kh + h, kw : kw + w] += blocks[:, kh, kw].transpose(1, 0, 2, 3)
    return np.ascontiguousarray(xp[:, :, 1:-1, 1:-1])


def maxpool2x2(x):
    """Returns (pooled, argmax) where argmax in 0..3 indexes the 2x2 window."""
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    win = x[:, :, : 2 * ho, : 2 * wo].reshape(n, c, ho, 2, wo, 2)
    win = win.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    arg = win.argmax(axis=-1).astype(np.int8)
    y = np.take_along_axis(win, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(y), arg


def maxpool2x2_backward(gy, arg, shape):
    n, c, h, w = shape
    ho, wo = h // 2, w // 2
    win = np.zeros((n, c, ho, wo, 4), dtype=gy.dtype)
    np.put_along_axis(win, arg[..., None].astype(np.intp), gy[..., None], axis=-1)
    gx = np.zeros(shape, dtype=gy.dtype)
    gx[:, :, : 2 * ho, : 2 * wo] = (
        win.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
    )
    return gx
