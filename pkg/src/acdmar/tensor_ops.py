"""Dense 2-D convolution kernels and the tensor reshapes built on them.

Layout is channel-first throughout: a coefficient stack is ``(C, H, W)``, a
filter bank is ``(C, p, p)`` and a batched feature map is ``(B, C, H, W)``.

Two orientations are used and are not interchangeable:

* ``conv_same`` / ``conv_bank_sum`` / ``depthwise_conv`` are true convolutions
  (kernel flipped), zero padded, output the same size as the input;
* ``conv_transpose_bank`` is the matching correlation, i.e. the exact adjoint
  of ``conv_bank_sum`` under zero padding.

The batched ``conv2d`` family is plain cross-correlation (the deep-learning
convention) and is what the network layers call.
"""
import numpy as np

from .backend import kernels


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


# Above this many bytes an im2col buffer is not worth materialising.
_IM2COL_BYTES = 96 * 2**20


def _use_gemm(x_shape, w_shape):
    B, Cin, H, W = x_shape
    Cout, _, kh, kw = w_shape
    cols_bytes = 8 * B * Cin * kh * kw * H * W
    if cols_bytes > _IM2COL_BYTES:
        return False
    # a single output channel makes GEMM a mat-vec; the direct loop wins there
    return Cout >= 4 or kh * kw <= 9


def _check_conv(x, w):
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D operands, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"input has {x.shape[1]} channels, kernel expects {w.shape[1]}")
    if w.shape[2] % 2 == 0 or w.shape[3] % 2 == 0:
        raise DimensionError(f"kernel size must be odd, got {w.shape[2:]}")


def conv2d(x, w):
    """Batched "same" cross-correlation ``(B,Cin,H,W) * (Cout,Cin,k,k) -> (B,Cout,H,W)``."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    _check_conv(x, w)
    B, _, H, W = x.shape
    Cout, _, kh, kw = w.shape
    if _use_gemm(x.shape, w.shape):
        cols = kernels.im2col(x, kh, kw)
        return np.matmul(w.reshape(Cout, -1), cols).reshape(B, Cout, H, W)
    return kernels.conv2d_direct(x, w)


def conv2d_input_grad(gy, w):
    """Adjoint of :func:`conv2d` in its input argument."""
    gy = np.asarray(gy, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    B, Cout, H, W = gy.shape
    _, Cin, kh, kw = w.shape
    if _use_gemm((B, Cin, H, W), w.shape):
        dcols = np.matmul(w.reshape(Cout, -1).T, gy.reshape(B, Cout, H * W))
        return kernels.col2im(dcols, Cin, H, W, kh, kw)
    w_t = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    return kernels.conv2d_direct(gy, w_t)


def conv2d_weight_grad(x, gy, kernel_size):
    """Gradient of ``<conv2d(x, w), gy>`` with respect to ``w``."""
    x = np.asarray(x, dtype=np.float64)
    gy = np.asarray(gy, dtype=np.float64)
    kh, kw = kernel_size
    B, Cin, H, W = x.shape
    Cout = gy.shape[1]
    if _use_gemm(x.shape, (Cout, Cin, kh, kw)):
        cols = kernels.im2col(x, kh, kw)
        g2 = gy.reshape(B, Cout, H * W)
        dw = g2[0] @ cols[0].T
        for b in range(1, B):
            dw += g2[b] @ cols[b].T
        return dw.reshape(Cout, Cin, kh, kw)
    return kernels.conv2d_weight_direct(x, gy, kh, kw)


def _flip(bank):
    return np.ascontiguousarray(bank[..., ::-1, ::-1])


def conv_same(filt, image):
    """True 2-D convolution of ``image`` (H,W) with an odd ``filt`` (p,p), zero padded."""
    filt = np.asarray(filt, dtype=np.float64)
    image = np.asarray(image, dtype=np.float64)
    if filt.ndim != 2 or image.ndim != 2:
        raise DimensionError("conv_same expects a 2-D filter and a 2-D image")
    return conv2d(image[None, None], _flip(filt)[None, None])[0, 0]


def conv_bank_sum(bank, codes):
    """``sum_n conv_same(bank[n], codes[n])`` for a (N,p,p) bank and (N,H,W) codes."""
    bank = np.asarray(bank, dtype=np.float64)
    codes = np.asarray(codes, dtype=np.float64)
    if bank.ndim != 3 or codes.ndim != 3 or bank.shape[0] != codes.shape[0]:
        raise DimensionError(f"bank {bank.shape} does not match codes {codes.shape}")
    return conv2d(codes[None], _flip(bank)[None])[0, 0]


def conv_transpose_bank(bank, residual):
    """Adjoint of :func:`conv_bank_sum`: correlate ``residual`` with every filter."""
    bank = np.asarray(bank, dtype=np.float64)
    residual = np.asarray(residual, dtype=np.float64)
    if bank.ndim != 3 or residual.ndim != 2:
        raise DimensionError(f"bank {bank.shape} / residual {residual.shape}")
    return conv2d(residual[None, None], bank[:, None])[0]


def depthwise_conv(dictionary, plane):
    """Convolve one plane with each of the d filters: (d,p,p), (H,W) -> (d,H,W)."""
    dictionary = np.asarray(dictionary, dtype=np.float64)
    plane = np.asarray(plane, dtype=np.float64)
    if dictionary.ndim != 3 or plane.ndim != 2:
        raise DimensionError(f"dictionary {dictionary.shape} / plane {plane.shape}")
    return conv2d(plane[None, None], _flip(dictionary)[:, None])[0]


def mode3_unfold(t):
    """(C,H,W) -> (C, H*W); row c is the row-major vectorisation of channel c."""
    t = np.asarray(t)
    return t.reshape(t.shape[0], -1)


def mode3_fold(mat, height, width):
    """Inverse of :func:`mode3_unfold`."""
    mat = np.asarray(mat)
    return mat.reshape(mat.shape[0], height, width)


def weighted_combine(dictionary, K):
    """Per-sample filters ``out[n] = sum_i dictionary[i] * K[i, n]``: (d,p,p), (d,N) -> (N,p,p)."""
    dictionary = np.asarray(dictionary, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    if K.ndim != 2 or K.shape[0] != dictionary.shape[0]:
        raise DimensionError(f"K {K.shape} needs {dictionary.shape[0]} rows")
    return np.einsum("ipq,in->npq", dictionary, K)
