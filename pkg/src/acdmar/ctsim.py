"""Parallel-beam CT simulation and the linear-interpolation (LI) baseline.

Images live in normalised intensity units (an affine map of a HU window to
[0, 1]).  Pixel (row, col) sits at ``x = col - cx``, ``y = cy - row`` with the
centre ``((W-1)/2, (H-1)/2)``; detector bin j sits at ``s = j - (n_bins-1)/2``
and a view at angle theta integrates along the line
``x cos(theta) + y sin(theta) = s``.

The metal corruption is a simplified surrogate of polychromatic physics:
sinogram bins on the metal trace are amplified by a factor ``a`` and
trace-adjacent bins receive signal-dependent Gaussian noise.
"""
import json
import math
import os
import warnings
from dataclasses import asdict, dataclass
from typing import Optional, Tuple

import numpy as np

from .backend import kernels
from .wcd import MaskedScene

TRACE_THRESHOLD = 1e-9
RAY_STEP = 0.5


class LIEdgeWarning(RuntimeWarning):
    """An LI run touched the detector edge (or covered the whole view)."""


class HUClipWarning(RuntimeWarning):
    """Values outside the HU window were clipped during normalisation."""


def default_n_bins(image_size):
    return int(math.ceil(math.sqrt(2.0) * image_size)) + 1


def view_angles(n_views, span_deg=180.0):
    return np.linspace(0.0, math.radians(span_deg), n_views, endpoint=False)


@dataclass
class SimConfig:
    image_size: int = 128
    n_views: int = 180
    n_bins: Optional[int] = None
    span_deg: float = 180.0
    hu_window: Tuple[float, float] = (-1000.0, 2000.0)
    metal_hu: float = 4000.0
    trace_amplification: float = 1.25
    noise_level: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 32:
            raise ValueError("image_size must be at least 32")
        if self.n_views < 2:
            raise ValueError("n_views must be at least 2")
        if self.trace_amplification < 1:
            raise ValueError("trace_amplification must be >= 1")
        if self.noise_level < 0:
            raise ValueError("noise_level must be >= 0")
        lo, hi = self.hu_window
        if not lo < hi:
            raise ValueError("hu_window needs lo < hi")
        self.hu_window = (float(lo), float(hi))
        if self.n_bins is None:
            self.n_bins = default_n_bins(self.image_size)

    @classmethod
    def full_scale(cls, **kw):
        kw.setdefault("image_size", 416)
        kw.setdefault("n_views", 640)
        kw.setdefault("n_bins", 641)
        kw.setdefault("span_deg", 360.0)
        return cls(**kw)


# --- intensity mapping -----------------------------------------------------

def hu_normalize(image_hu, window, clip=True):
    """Map the HU window to [0, 1].  Returns ``(plane, clipped_mask)``."""
    lo, hi = window
    out = (np.asarray(image_hu, dtype=np.float64) - lo) / (hi - lo)
    clipped = (out < 0) | (out > 1)
    if clip and clipped.any():
        warnings.warn(f"{int(clipped.sum())} pixel(s) outside the HU window clipped",
                      HUClipWarning, stacklevel=2)
        out = np.clip(out, 0.0, 1.0)
    return out, clipped


def hu_denormalize(plane, window):
    lo, hi = window
    return np.asarray(plane, dtype=np.float64) * (hi - lo) + lo


def segment_metal(image_hu, threshold_hu=2500.0):
    """Binary metal mask: pixels at or above ``threshold_hu``."""
    return (np.asarray(image_hu) >= threshold_hu).astype(np.float64)


# --- projection operators --------------------------------------------------

def radon(image, n_views, n_bins=None, span_deg=180.0):
    """Line integrals over ``n_views`` equally spaced angles; (n_views, n_bins)."""
    image = np.asarray(image, dtype=np.float64)
    if n_bins is None:
        n_bins = default_n_bins(max(image.shape))
    return kernels.radon_march(image, view_angles(n_views, span_deg), int(n_bins), RAY_STEP)


def ramp_kernel(n_bins):
    """Spatial Ram-Lak kernel for unit detector spacing, length 2*n_bins - 1."""
    k = np.arange(-(n_bins - 1), n_bins)
    h = np.zeros(k.shape)
    h[k == 0] = 0.25
    odd = (k % 2) == 1
    h[odd] = -1.0 / (math.pi ** 2 * k[odd] ** 2)
    return h


def ramp_filter(sino):
    sino = np.asarray(sino, dtype=np.float64)
    n_bins = sino.shape[1]
    h = ramp_kernel(n_bins)
    out = np.empty_like(sino)
    for k in range(sino.shape[0]):
        out[k] = np.convolve(sino[k], h, mode="full")[n_bins - 1:2 * n_bins - 1]
    return out


def fbp(sino, image_size, span_deg=180.0):
    """Filtered back-projection onto an ``image_size`` square grid."""
    sino = np.asarray(sino, dtype=np.float64)
    n_views = sino.shape[0]
    q = ramp_filter(sino)
    img = kernels.backproject(q, view_angles(n_views, span_deg), image_size, image_size)
    return img * (math.pi / n_views)


def metal_trace(mask, n_views, n_bins=None, span_deg=180.0):
    """Binary sinogram of rays that pass through metal."""
    return (radon(mask, n_views, n_bins, span_deg) > TRACE_THRESHOLD).astype(np.float64)


def li_inpaint(sino, trace):
    """Replace traced bins by linear interpolation between the nearest clean bins.

    Runs touching the detector edge are filled with the nearest clean value;
    a fully traced view is filled with zeros.  Both cases issue
    :class:`LIEdgeWarning`.
    """
    sino = np.asarray(sino, dtype=np.float64)
    bad_all = np.asarray(trace) > 0
    out = sino.copy()
    idx = np.arange(sino.shape[1])
    n_edge = n_full = 0
    for k in range(sino.shape[0]):
        bad = bad_all[k]
        if not bad.any():
            continue
        if bad.all():
            out[k] = 0.0
            n_full += 1
            continue
        if bad[0] or bad[-1]:
            n_edge += 1
        clean = ~bad
        out[k, bad] = np.interp(idx[bad], idx[clean], sino[k, clean])
    if n_full or n_edge:
        warnings.warn(f"LI: {n_full} fully traced view(s) zero-filled, "
                      f"{n_edge} edge run(s) extended", LIEdgeWarning, stacklevel=2)
    return out


# --- phantoms and masks ----------------------------------------------------

# (value, a, b, x0, y0, phi_deg) in unit-disk coordinates, modified Shepp-Logan
_SHEPP_LOGAN = [
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
]


def _unit_grid(size):
    c = (np.arange(size) - (size - 1) / 2.0) / (size / 2.0)
    return np.meshgrid(c, -c)  # x right, y up


def _paint_ellipses(size, ellipses):
    x, y = _unit_grid(size)
    img = np.zeros((size, size))
    for val, a, b, x0, y0, phi in ellipses:
        t = math.radians(phi)
        xr = (x - x0) * math.cos(t) + (y - y0) * math.sin(t)
        yr = -(x - x0) * math.sin(t) + (y - y0) * math.cos(t)
        img[(xr / a) ** 2 + (yr / b) ** 2 <= 1.0] += val
    return img


def make_phantom(kind="shepp_logan", size=128, seed=0):
    """Normalised test image in [0, 1].

    ``shepp_logan`` is deterministic; ``random_ellipses`` draws a body outline
    with soft-tissue, low-density and bone-like inclusions from ``seed``.
    """
    if kind == "shepp_logan":
        return np.clip(_paint_ellipses(size, _SHEPP_LOGAN), 0.0, 1.0)
    if kind != "random_ellipses":
        raise ValueError(f"unknown phantom kind {kind!r}")
    rng = np.random.default_rng(seed)
    body_a, body_b = rng.uniform(0.72, 0.88), rng.uniform(0.6, 0.8)
    ellipses = [(0.33, body_a, body_b, 0.0, 0.0, rng.uniform(-10, 10))]
    for _ in range(rng.integers(4, 9)):
        val = rng.choice([-0.12, -0.06, 0.04, 0.08, 0.25])
        a, b = rng.uniform(0.05, 0.25, size=2)
        r = rng.uniform(0.0, 0.55)
        ang = rng.uniform(0, 2 * math.pi)
        ellipses.append((val, a, b, r * body_a * math.cos(ang), r * body_b * math.sin(ang),
                         rng.uniform(0, 180)))
    img = _paint_ellipses(size, ellipses)
    # faint texture so patches are not piecewise constant
    x, y = _unit_grid(size)
    fx, fy, ph = rng.uniform(2, 6), rng.uniform(2, 6), rng.uniform(0, 2 * math.pi)
    body = img > 0
    img = img + body * 0.01 * np.sin(math.pi * (fx * x + fy * y) + ph)
    return np.clip(img, 0.0, 1.0)


def make_metal_mask(size, seed, max_objects=2, radius_range=(0.03, 0.09)):
    """Random metal implants (ellipses) well inside the field of view."""
    rng = np.random.default_rng(seed)
    ellipses = []
    for _ in range(rng.integers(1, max_objects + 1)):
        a = rng.uniform(*radius_range)
        b = a * rng.uniform(0.5, 1.0)
        r = rng.uniform(0.1, 0.45)
        ang = rng.uniform(0, 2 * math.pi)
        ellipses.append((1.0, a, b, r * math.cos(ang), r * math.sin(ang), rng.uniform(0, 180)))
    mask = (_paint_ellipses(size, ellipses) > 0).astype(np.float64)
    if not mask.any():  # sub-pixel draw; force a single pixel
        c = size // 2 + int(rng.integers(-size // 6, size // 6))
        mask[c, c] = 1.0
    return mask


# --- case synthesis --------------------------------------------------------

def simulate_case(phantom, mask, cfg, seed=None):
    """Corrupt ``phantom`` with metal ``mask``; returns a :class:`MaskedScene`.

    ``s = radon(phantom)``; traced bins are scaled by ``a``; trace-adjacent
    bins get noise of std ``sigma * sqrt(|s'|)``; ``Y = fbp(s')`` with the metal
    pixels set to the normalised metal intensity.
    """
    phantom = np.asarray(phantom, dtype=np.float64)
    mask = (np.asarray(mask) > 0).astype(np.float64)
    size = cfg.image_size
    if phantom.shape != (size, size) or mask.shape != (size, size):
        raise ValueError(f"phantom/mask must be {size}x{size}")
    if mask[0].any() or mask[-1].any() or mask[:, 0].any() or mask[:, -1].any():
        raise ValueError("metal mask touches the image border")
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    s = radon(phantom, cfg.n_views, cfg.n_bins, cfg.span_deg)
    trace = metal_trace(mask, cfg.n_views, cfg.n_bins, cfg.span_deg)
    s_c = s + (cfg.trace_amplification - 1.0) * s * trace
    if cfg.noise_level > 0:
        near = trace.copy()
        near[:, 1:] = np.maximum(near[:, 1:], trace[:, :-1])
        near[:, :-1] = np.maximum(near[:, :-1], trace[:, 1:])
        noise = rng.standard_normal(s_c.shape)
        s_c = s_c + near * cfg.noise_level * np.sqrt(np.abs(s_c)) * noise
    Y = fbp(s_c, size, cfg.span_deg)
    metal_val = (cfg.metal_hu - cfg.hu_window[0]) / (cfg.hu_window[1] - cfg.hu_window[0])
    Y = np.where(mask > 0, metal_val, Y)
    meta = {"seed": int(seed), "metal_pixels": int(mask.sum()), "sim": sim_config_dict(cfg)}
    return MaskedScene(Y=Y, I=1.0 - mask, X_gt=phantom, meta=meta)


def li_mar(scene, cfg):
    """LI-restored image; also stored on ``scene.X_li``."""
    mask = 1.0 - scene.I
    s = radon(scene.Y, cfg.n_views, cfg.n_bins, cfg.span_deg)
    trace = metal_trace(mask, cfg.n_views, cfg.n_bins, cfg.span_deg)
    x_li = fbp(li_inpaint(s, trace), scene.shape[0], cfg.span_deg)
    scene.X_li = x_li
    return x_li


def sim_config_dict(cfg):
    d = asdict(cfg)
    d["hu_window"] = list(cfg.hu_window)
    return d


# --- raw + JSON sidecar I/O ------------------------------------------------

def write_raw(path, array):
    np.ascontiguousarray(array, dtype="<f4").tofile(path)


def read_raw(path, shape):
    return np.fromfile(path, dtype="<f4").reshape(shape).astype(np.float64)


def write_sinogram(path, sino, meta=None):
    """``<path>.raw`` plus ``<path>.json`` holding shape and geometry."""
    sino = np.asarray(sino)
    write_raw(f"{path}.raw", sino)
    side = {"shape": list(sino.shape), "dtype": "float32-le"}
    side.update(meta or {})
    with open(f"{path}.json", "w") as fh:
        json.dump(side, fh, indent=2, sort_keys=True)


def read_sinogram(path):
    with open(f"{path}.json") as fh:
        side = json.load(fh)
    return read_raw(f"{path}.raw", tuple(side["shape"])), side


_BUNDLE_FILES = {"Y": "Y.raw", "X_gt": "Xgt.raw", "I": "I.raw", "X_li": "Xli.raw"}


def write_bundle(directory, scene, meta=None):
    """Write a case bundle directory (32-bit little-endian rasters + meta.json)."""
    os.makedirs(directory, exist_ok=True)
    for attr, fname in _BUNDLE_FILES.items():
        arr = getattr(scene, attr)
        if arr is not None:
            write_raw(os.path.join(directory, fname), arr)
    side = {"shape": list(scene.shape), "dtype": "float32-le"}
    side.update(scene.meta)
    side.update(meta or {})
    with open(os.path.join(directory, "meta.json"), "w") as fh:
        json.dump(side, fh, indent=2, sort_keys=True)


def read_bundle(directory):
    with open(os.path.join(directory, "meta.json")) as fh:
        meta = json.load(fh)
    shape = tuple(meta["shape"])
    arrays = {}
    for attr, fname in _BUNDLE_FILES.items():
        p = os.path.join(directory, fname)
        if os.path.exists(p):
            arrays[attr] = read_raw(p, shape)
    if "Y" not in arrays or "I" not in arrays:
        raise FileNotFoundError(f"{directory} is missing Y.raw or I.raw")
    arrays["I"] = (arrays["I"] > 0.5).astype(np.float64)
    return MaskedScene(meta=meta, **arrays)
