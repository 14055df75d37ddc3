"""PSNR and SSIM restricted to the non-metal region."""
import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class MetricReport:
    psnr_db: float
    ssim: float
    n_pixels_evaluated: int
    psnr_infinite: bool = False


def masked_psnr(x, ref, I=None, peak=1.0):
    """PSNR over pixels with ``I == 1``; ``inf`` when they match exactly."""
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    sel = np.ones(x.shape, bool) if I is None else np.asarray(I) > 0.5
    if not sel.any():
        raise ValueError("mask selects no pixels")
    mse = float(np.mean((x[sel] - ref[sel]) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gauss1d(win=SSIM_WIN, sigma=SSIM_SIGMA):
    k = np.arange(win) - win // 2
    g = np.exp(-(k * k) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img, g):
    # separable "valid" correlation
    rows = sliding_window_view(img, g.size, axis=1) @ g
    return sliding_window_view(rows, g.size, axis=0) @ g


def ssim_map(x, ref, data_range=1.0):
    """Gaussian-window SSIM for every fully interior 11x11 window."""
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    g = _gauss1d()
    mx, my = _filter_valid(x, g), _filter_valid(ref, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(ref * ref, g) - my * my
    sxy = _filter_valid(x * ref, g) - mx * my
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))


def masked_ssim(x, ref, I=None, data_range=1.0):
    """Mean SSIM over the windows that lie entirely inside ``I == 1``."""
    smap = ssim_map(x, ref, data_range)
    if I is None:
        return float(smap.mean())
    inside = sliding_window_view(np.asarray(I) > 0.5, (SSIM_WIN, SSIM_WIN)).all(axis=(2, 3))
    if not inside.any():
        return math.nan
    return float(smap[inside].mean())


def evaluate(x, ref, I=None, peak=1.0, data_range=1.0):
    p = masked_psnr(x, ref, I, peak)
    n = int(np.size(x) if I is None else np.sum(np.asarray(I) > 0.5))
    return MetricReport(psnr_db=p, ssim=masked_ssim(x, ref, I, data_range),
                        n_pixels_evaluated=n, psnr_infinite=math.isinf(p))
