"""PNG panels and plots.  These are derived views; rasters are the data."""
import numpy as np
from PIL import Image

GAP = 2


def to_uint8(img, lo=0.0, hi=1.0):
    x = (np.asarray(img, dtype=np.float64) - lo) / (hi - lo)
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def tile(rows, lo=0.0, hi=1.0):
    """Arrange a list of rows of equally sized images into one uint8 canvas."""
    H, W = np.asarray(rows[0][0]).shape
    ncol = max(len(r) for r in rows)
    canvas = np.full((len(rows) * (H + GAP) - GAP, ncol * (W + GAP) - GAP), 255, np.uint8)
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            r, c = i * (H + GAP), j * (W + GAP)
            canvas[r:r + H, c:c + W] = to_uint8(img, lo, hi)
    return canvas


def save_panel(path, images, lo=0.0, hi=1.0):
    """Side-by-side strip of images windowed to [lo, hi]."""
    Image.fromarray(tile([list(images)], lo, hi)).save(path)


def save_gallery(path, rows, lo=0.0, hi=1.0):
    Image.fromarray(tile(rows, lo, hi)).save(path)


def save_loss_curve(path, epochs, losses, val_psnr=None):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5), dpi=100)
    ax.plot(epochs, losses, color="C0")
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss", color="C0")
    ax.set_yscale("log")
    if val_psnr is not None and np.isfinite(val_psnr).any():
        ax2 = ax.twinx()
        ax2.plot(epochs, val_psnr, color="C1")
        ax2.set_ylabel("validation PSNR (dB)", color="C1")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
