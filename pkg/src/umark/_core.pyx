# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for the segmentation network (NCHW, float64).

Convolutions run along image rows in fixed 32-wide chunks, four output
channels per pass, so the compiler vectorizes them without -ffast-math.
The weight gradient is a per-tap BLAS GEMM.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()

DEF CH = 32


cdef void _conv_padded(const double[:, :, :, ::1] xp, const double[:, :, :, ::1] w,
                       const double[::1] b, double[:, :, :, ::1] out) noexcept nogil:
    # xp: (N, C, H+2, Wr+2); w: (O, C, 3, 3); out: (N, O, H, Wr), Wr % CH == 0
    cdef Py_ssize_t N = xp.shape[0], C = xp.shape[1]
    cdef Py_ssize_t H = out.shape[2], W = out.shape[3], O = w.shape[0]
    cdef Py_ssize_t n, i, j, jb, di, dj, c, o
    cdef double a0[CH]
    cdef double a1[CH]
    cdef double a2[CH]
    cdef double a3[CH]
    cdef double w0, w1, w2, w3, xv
    cdef const double* xr
    for n in range(N):
        o = 0
        while o < O:
            for i in range(H):
                for jb in range(0, W, CH):
                    for j in range(CH):
                        a0[j] = 0.0
                        a1[j] = 0.0
                        a2[j] = 0.0
                        a3[j] = 0.0
                    for c in range(C):
                        for di in range(3):
                            for dj in range(3):
                                w0 = w[o, c, di, dj]
                                w1 = w[o + 1, c, di, dj]
                                w2 = w[o + 2, c, di, dj]
                                w3 = w[o + 3, c, di, dj]
                                xr = &xp[n, c, i + di, jb + dj]
                                for j in range(CH):
                                    xv = xr[j]
                                    a0[j] += w0 * xv
                                    a1[j] += w1 * xv
                                    a2[j] += w2 * xv
                                    a3[j] += w3 * xv
                    for j in range(CH):
                        out[n, o, i, jb + j] = a0[j] + b[o]
                        out[n, o + 1, i, jb + j] = a1[j] + b[o + 1]
                        out[n, o + 2, i, jb + j] = a2[j] + b[o + 2]
                        out[n, o + 3, i, jb + j] = a3[j] + b[o + 3]
            o += 4


def _conv(x, w, b):
    # pads channels-out to a multiple of 4 and width to a multiple of CH
    n, c, h, wd = x.shape
    o = w.shape[0]
    o4 = -(-o // 4) * 4
    wr = -(-wd // CH) * CH
    if o4 != o:
        w = np.concatenate([w, np.zeros((o4 - o, c, 3, 3))])
        b = np.concatenate([b, np.zeros(o4 - o)])
    xp = np.zeros((n, c, h + 2, wr + 2))
    xp[:, :, 1:h + 1, 1:wd + 1] = x
    out = np.empty((n, o4, h, wr))
    _conv_padded(xp, np.ascontiguousarray(w), np.ascontiguousarray(b), out)
    return np.ascontiguousarray(out[:, :o, :, :wd])


def conv3x3_forward(x, w, b):
    """Zero-padded 3x3 convolution. x (N,C,H,W), w (O,C,3,3), b (O,)."""
    return _conv(np.asarray(x, dtype=np.float64), np.asarray(w, dtype=np.float64),
                 np.asarray(b, dtype=np.float64))


def _conv_wgrad(x, g):
    # dw[:, :, di, dj] as one GEMM per tap over a padded-width flat layout;
    # out-of-image rows of the flattened gradient are zero, so wraparound is inert
    n, c, h, wd = x.shape
    o = g.shape[1]
    wp = wd + 2
    xp = np.zeros((c, n, h + 2, wp))
    xp[:, :, 1:-1, 1:-1] = x.transpose(1, 0, 2, 3)
    xf = xp.reshape(c, -1)
    gp = np.zeros((o, n, h + 2, wp))
    gp[:, :, :h, :wd] = g.transpose(1, 0, 2, 3)
    m = xf.shape[1] - 2 * wp - 2
    gf = gp.reshape(o, -1)[:, :m]
    dw = np.empty((o, c, 3, 3))
    for di in range(3):
        for dj in range(3):
            off = di * wp + dj
            dw[:, :, di, dj] = gf @ xf[:, off:off + m].T
    return dw


def conv3x3_backward(x, w, g, need_dx=True):
    """Gradients (dx, dw, db) of :func:`conv3x3_forward`."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    dw = _conv_wgrad(x, g)
    db = g.sum(axis=(0, 2, 3))
    dx = None
    if need_dx:
        # transposed conv: flip taps, swap in/out channels
        wt = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        dx = _conv(g, wt, np.zeros(w.shape[1]))
    return dx, dw, db


def maxpool2_forward(x):
    """2x2/2 max pool; argmax code k = 2*dr + dc, first maximum wins ties."""
    cdef const double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t N = xv.shape[0], C = xv.shape[1], H = xv.shape[2] // 2, W = xv.shape[3] // 2
    out_arr = np.empty((N, C, H, W), dtype=np.float64)
    idx_arr = np.empty((N, C, H, W), dtype=np.int8)
    cdef double[:, :, :, ::1] out = out_arr
    cdef signed char[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t n, i, j, c, k
    cdef double best, v
    cdef signed char bk
    with nogil:
        for n in range(N):
            for c in range(C):
                for i in range(H):
                    for j in range(W):
                        best = xv[n, c, 2 * i, 2 * j]
                        bk = 0
                        for k in range(1, 4):
                            v = xv[n, c, 2 * i + k // 2, 2 * j + k % 2]
                            if v > best:
                                best = v
                                bk = <signed char>k
                        out[n, c, i, j] = best
                        idx[n, c, i, j] = bk
    return out_arr, idx_arr


def maxpool2_backward(g, idx):
    cdef const double[:, :, :, ::1] gv = np.ascontiguousarray(g, dtype=np.float64)
    cdef const signed char[:, :, :, ::1] iv = np.ascontiguousarray(idx, dtype=np.int8)
    cdef Py_ssize_t N = gv.shape[0], C = gv.shape[1], H = gv.shape[2], W = gv.shape[3]
    dx_arr = np.zeros((N, C, 2 * H, 2 * W), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t n, i, j, c, k
    with nogil:
        for n in range(N):
            for c in range(C):
                for i in range(H):
                    for j in range(W):
                        k = iv[n, c, i, j]
                        dx[n, c, 2 * i + k // 2, 2 * j + k % 2] = gv[n, c, i, j]
    return dx_arr
