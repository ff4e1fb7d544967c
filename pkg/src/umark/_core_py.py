"""Pure-numpy fallback for the compiled kernels in ``_core.pyx``.

Same signatures and layout (NCHW, float64). Selected by :mod:`umark.kernels`
when the extension is not built or ``UMARK_PURE_PYTHON=1`` is set.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _im2col(x):
    # (N, C, H, W) -> (N*H*W, C*9), column order (c, di, dj)
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = sliding_window_view(xp, (3, 3), axis=(2, 3))  # n,c,h,w,3,3
    return cols.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * 9)


def conv3x3_forward(x, w, b):
    n, _, h, wd = x.shape
    o = w.shape[0]
    out = _im2col(x) @ w.reshape(o, -1).T + b
    return np.ascontiguousarray(out.reshape(n, h, wd, o).transpose(0, 3, 1, 2))


def conv3x3_backward(x, w, g, need_dx=True):
    n, c, h, wd = x.shape
    o = w.shape[0]
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
    dw = (g2.T @ _im2col(x)).reshape(o, c, 3, 3)
    db = g.sum(axis=(0, 2, 3))
    if not need_dx:
        return None, dw, db
    dcols = (g2 @ w.reshape(o, -1)).reshape(n, h, wd, c, 3, 3)
    dxp = np.zeros((n, c, h + 2, wd + 2))
    for di in range(3):
        for dj in range(3):
            dxp[:, :, di:di + h, dj:dj + wd] += dcols[..., di, dj].transpose(0, 3, 1, 2)
    return np.ascontiguousarray(dxp[:, :, 1:-1, 1:-1]), dw, db


def maxpool2_forward(x):
    n, c, h, w = x.shape
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    idx = np.argmax(win, axis=-1)  # first maximum wins
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx.astype(np.int8)


def maxpool2_backward(g, idx):
    n, c, h, w = g.shape
    win = np.zeros((n, c, h, w, 4))
    np.put_along_axis(win, idx.astype(np.intp)[..., None], g[..., None], axis=-1)
    win = win.reshape(n, c, h, w, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return win.reshape(n, c, 2 * h, 2 * w)
