"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``.

Signatures and conventions match the compiled module exactly, so either can
back :mod:`acdmar.tensor_ops` and :mod:`acdmar.ctsim`.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _pad(x, ph, pw):
    return np.pad(np.asarray(x, dtype=np.float64), ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def conv2d_direct(x, w):
    """Zero-padded "same" cross-correlation, (B,Cin,H,W) x (Cout,Cin,kh,kw)."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    B, _, H, W = x.shape
    Cout, _, kh, kw = w.shape
    xp = _pad(x, kh // 2, kw // 2)
    out = np.zeros((B, Cout, H, W))
    for u in range(kh):
        for v in range(kw):
            # (Cout,Cin) x (B,Cin,H,W) -> (B,Cout,H,W)
            out += np.einsum("oi,bihw->bohw", w[:, :, u, v], xp[:, :, u:u + H, v:v + W])
    return out


def conv2d_weight_direct(x, gy, kh, kw):
    """Gradient of ``conv2d_direct`` with respect to its kernel."""
    x = np.asarray(x, dtype=np.float64)
    gy = np.asarray(gy, dtype=np.float64)
    _, Cin, H, W = x.shape
    Cout = gy.shape[1]
    xp = _pad(x, kh // 2, kw // 2)
    dw = np.empty((Cout, Cin, kh, kw))
    for u in range(kh):
        for v in range(kw):
            dw[:, :, u, v] = np.einsum("bohw,bihw->oi", gy, xp[:, :, u:u + H, v:v + W])
    return dw


def im2col(x, kh, kw):
    """(B,C,H,W) -> (B, C*kh*kw, H*W) patch matrix for "same" zero padding."""
    x = np.asarray(x, dtype=np.float64)
    B, C, H, W = x.shape
    xp = _pad(x, kh // 2, kw // 2)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # B,C,H,W,kh,kw
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(B, C * kh * kw, H * W)


def col2im(cols, C, H, W, kh, kw):
    """Adjoint of ``im2col``: scatter-add patches back to (B,C,H,W)."""
    cols = np.asarray(cols, dtype=np.float64)
    B = cols.shape[0]
    ph, pw = kh // 2, kw // 2
    c6 = cols.reshape(B, C, kh, kw, H, W)
    xp = np.zeros((B, C, H + 2 * ph, W + 2 * pw))
    for u in range(kh):
        for v in range(kw):
            xp[:, :, u:u + H, v:v + W] += c6[:, :, u, v]
    return np.ascontiguousarray(xp[:, :, ph:ph + H, pw:pw + W])


def _bilinear(img, rows, cols):
    H, W = img.shape
    r0 = np.floor(rows)
    c0 = np.floor(cols)
    fr = rows - r0
    fc = cols - c0
    r0 = r0.astype(np.int64)
    c0 = c0.astype(np.int64)
    acc = np.zeros(rows.shape)
    for dr, wr in ((0, 1.0 - fr), (1, fr)):
        for dc, wc in ((0, 1.0 - fc), (1, fc)):
            rr = r0 + dr
            cc = c0 + dc
            ok = (rr >= 0) & (rr < H) & (cc >= 0) & (cc < W)
            vals = np.where(ok, img[np.clip(rr, 0, H - 1), np.clip(cc, 0, W - 1)], 0.0)
            acc += wr * wc * vals
    return acc


def radon_march(image, angles, n_bins, step):
    """Parallel-beam line integrals by bilinear ray marching."""
    img = np.asarray(image, dtype=np.float64)
    H, W = img.shape
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    half = (n_bins - 1) / 2.0
    n_t = int(2.0 * half / step) + 1
    t = -(n_t - 1) * step / 2.0 + np.arange(n_t) * step
    s = np.arange(n_bins) - half
    out = np.zeros((len(angles), n_bins))
    for k, th in enumerate(np.asarray(angles, dtype=np.float64)):
        cs, sn = np.cos(th), np.sin(th)
        rows = cy - (s[:, None] * sn + t[None, :] * cs)
        cols = cx + (s[:, None] * cs - t[None, :] * sn)
        out[k] = _bilinear(img, rows, cols).sum(axis=1) * step
    return out


def backproject(filtered, angles, H, W):
    """Sum of linearly interpolated projections over views (unscaled)."""
    q = np.asarray(filtered, dtype=np.float64)
    n_bins = q.shape[1]
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    half = (n_bins - 1) / 2.0
    y = (cy - np.arange(H))[:, None]
    x = (np.arange(W) - cx)[None, :]
    out = np.zeros((H, W))
    for k, th in enumerate(np.asarray(angles, dtype=np.float64)):
        pos = x * np.cos(th) + y * np.sin(th) + half
        j0 = np.floor(pos)
        f = pos - j0
        j0 = j0.astype(np.int64)
        for dj, wt in ((0, 1.0 - f), (1, f)):
            jj = j0 + dj
            ok = (jj >= 0) & (jj < n_bins)
            out += wt * np.where(ok, q[k, np.clip(jj, 0, n_bins - 1)], 0.0)
    return out
