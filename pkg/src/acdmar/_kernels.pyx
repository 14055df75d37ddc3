# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops: direct convolution, im2col/col2im, radon, backprojection.

Every routine here has a numpy twin in ``_pykernels`` with the same signature;
``acdmar.backend`` picks one at import time.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor, cos, sin

cnp.import_array()


def _pad(cnp.ndarray x, int ph, int pw):
    return np.ascontiguousarray(
        np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))), dtype=np.float64)


def conv2d_direct(x, w):
    """Zero-padded "same" cross-correlation, (B,Cin,H,W) x (Cout,Cin,kh,kw)."""
    cdef int B = x.shape[0], Cin = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef int Cout = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef int ph = kh // 2, pw = kw // 2
    cdef double[:, :, :, ::1] xp = _pad(x, ph, pw)
    cdef double[:, :, :, ::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    out = np.zeros((B, Cout, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] y = out
    cdef int b, o, i, u, v, r, c
    cdef double wt
    cdef double* yrow
    cdef double* xrow
    for b in range(B):
        for o in range(Cout):
            for i in range(Cin):
                for u in range(kh):
                    for v in range(kw):
                        wt = wv[o, i, u, v]
                        if wt == 0.0:
                            continue
                        for r in range(H):
                            yrow = &y[b, o, r, 0]
                            xrow = &xp[b, i, r + u, v]
                            for c in range(W):
                                yrow[c] += wt * xrow[c]
    return out


def conv2d_weight_direct(x, gy, int kh, int kw):
    """Gradient of ``conv2d_direct`` with respect to its kernel."""
    cdef int B = x.shape[0], Cin = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef int Cout = gy.shape[1]
    cdef int ph = kh // 2, pw = kw // 2
    cdef double[:, :, :, ::1] xp = _pad(x, ph, pw)
    cdef double[:, :, :, ::1] g = np.ascontiguousarray(gy, dtype=np.float64)
    out = np.zeros((Cout, Cin, kh, kw), dtype=np.float64)
    cdef double[:, :, :, ::1] dw = out
    cdef int b, o, i, u, v, r, c
    cdef double acc
    cdef double* grow
    cdef double* xrow
    for o in range(Cout):
        for i in range(Cin):
            for u in range(kh):
                for v in range(kw):
                    acc = 0.0
                    for b in range(B):
                        for r in range(H):
                            grow = &g[b, o, r, 0]
                            xrow = &xp[b, i, r + u, v]
                            for c in range(W):
                                acc += grow[c] * xrow[c]
                    dw[o, i, u, v] = acc
    return out


def im2col(x, int kh, int kw):
    """(B,C,H,W) -> (B, C*kh*kw, H*W) patch matrix for "same" zero padding."""
    cdef int B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef int ph = kh // 2, pw = kw // 2
    cdef double[:, :, :, ::1] xp = _pad(x, ph, pw)
    out = np.empty((B, C * kh * kw, H * W), dtype=np.float64)
    cdef double[:, :, ::1] cols = out
    cdef int b, i, u, v, r, c, row
    cdef double* dst
    cdef double* src
    for b in range(B):
        for i in range(C):
            for u in range(kh):
                for v in range(kw):
                    row = (i * kh + u) * kw + v
                    for r in range(H):
                        dst = &cols[b, row, r * W]
                        src = &xp[b, i, r + u, v]
                        for c in range(W):
                            dst[c] = src[c]
    return out


def col2im(cols, int C, int H, int W, int kh, int kw):
    """Adjoint of ``im2col``: scatter-add patches back to (B,C,H,W)."""
    cdef int B = cols.shape[0]
    cdef int ph = kh // 2, pw = kw // 2
    cdef double[:, :, ::1] cv = np.ascontiguousarray(cols, dtype=np.float64)
    padded = np.zeros((B, C, H + 2 * ph, W + 2 * pw), dtype=np.float64)
    cdef double[:, :, :, ::1] xp = padded
    cdef int b, i, u, v, r, c, row
    cdef double* dst
    cdef double* src
    for b in range(B):
        for i in range(C):
            for u in range(kh):
                for v in range(kw):
                    row = (i * kh + u) * kw + v
                    for r in range(H):
                        dst = &xp[b, i, r + u, v]
                        src = &cv[b, row, r * W]
                        for c in range(W):
                            dst[c] += src[c]
    return np.ascontiguousarray(padded[:, :, ph:ph + H, pw:pw + W])


cdef inline double _bilinear(double[:, ::1] img, int H, int W, double row, double col) nogil:
    cdef double r0f = floor(row), c0f = floor(col)
    cdef int r0 = <int>r0f, c0 = <int>c0f
    cdef double fr = row - r0f, fc = col - c0f
    cdef double acc = 0.0
    if r0 >= 0 and r0 < H:
        if c0 >= 0 and c0 < W:
            acc += (1.0 - fr) * (1.0 - fc) * img[r0, c0]
        if c0 + 1 >= 0 and c0 + 1 < W:
            acc += (1.0 - fr) * fc * img[r0, c0 + 1]
    if r0 + 1 >= 0 and r0 + 1 < H:
        if c0 >= 0 and c0 < W:
            acc += fr * (1.0 - fc) * img[r0 + 1, c0]
        if c0 + 1 >= 0 and c0 + 1 < W:
            acc += fr * fc * img[r0 + 1, c0 + 1]
    return acc


def radon_march(image, angles, int n_bins, double step):
    """Parallel-beam line integrals by bilinear ray marching."""
    cdef double[:, ::1] img = np.ascontiguousarray(image, dtype=np.float64)
    cdef double[::1] th = np.ascontiguousarray(angles, dtype=np.float64)
    cdef int H = img.shape[0], W = img.shape[1]
    cdef int n_views = th.shape[0]
    cdef double cy = (H - 1) / 2.0, cx = (W - 1) / 2.0
    cdef double half = (n_bins - 1) / 2.0
    cdef int n_t = <int>(2.0 * half / step) + 1
    cdef double t0 = -(n_t - 1) * step / 2.0
    out = np.zeros((n_views, n_bins), dtype=np.float64)
    cdef double[:, ::1] sino = out
    cdef int k, j, m
    cdef double cs, sn, s, t, acc
    for k in range(n_views):
        cs = cos(th[k])
        sn = sin(th[k])
        for j in range(n_bins):
            s = j - half
            acc = 0.0
            for m in range(n_t):
                t = t0 + m * step
                acc += _bilinear(img, H, W, cy - (s * sn + t * cs), cx + (s * cs - t * sn))
            sino[k, j] = acc * step
    return out


def backproject(filtered, angles, int H, int W):
    """Sum of linearly interpolated projections over views (unscaled)."""
    cdef double[:, ::1] q = np.ascontiguousarray(filtered, dtype=np.float64)
    cdef double[::1] th = np.ascontiguousarray(angles, dtype=np.float64)
    cdef int n_views = q.shape[0], n_bins = q.shape[1]
    cdef double cy = (H - 1) / 2.0, cx = (W - 1) / 2.0
    cdef double half = (n_bins - 1) / 2.0
    out = np.zeros((H, W), dtype=np.float64)
    cdef double[:, ::1] img = out
    cdef int k, r, c, j0
    cdef double cs, sn, x, y, pos, f
    for k in range(n_views):
        cs = cos(th[k])
        sn = sin(th[k])
        for r in range(H):
            y = cy - r
            for c in range(W):
                x = c - cx
                pos = x * cs + y * sn + half
                j0 = <int>floor(pos)
                f = pos - j0
                if j0 >= 0 and j0 < n_bins:
                    img[r, c] += (1.0 - f) * q[k, j0]
                if j0 + 1 >= 0 and j0 + 1 < n_bins:
                    img[r, c] += f * q[k, j0 + 1]
    return out
