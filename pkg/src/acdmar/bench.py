"""Timing of the compiled kernels against the numpy fallback.

Run ``python -m acdmar.bench`` for a table.
"""
import argparse
import statistics
import time

import numpy as np

from . import backend
from .ctsim import view_angles


def _time(fn, repeats):
    fn()  # warm-up
    out = []
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t)
    return statistics.mean(out), (statistics.stdev(out) if len(out) > 1 else 0.0)


def cases(size=64, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((4, 9, size, size))
    w3 = rng.standard_normal((9, 9, 3, 3))
    z = rng.standard_normal((4, 16, size, size))
    w9 = rng.standard_normal((1, 16, 9, 9))
    gy = rng.standard_normal((4, 1, size, size))
    img = rng.random((2 * size, 2 * size))
    ang = view_angles(90)
    nb = int(np.ceil(np.sqrt(2) * 2 * size)) + 1
    sino = rng.standard_normal((90, nb))
    return {
        "conv2d_direct 9->9 3x3": lambda k: k.conv2d_direct(x, w3),
        "conv2d_direct 16->1 9x9": lambda k: k.conv2d_direct(z, w9),
        "conv2d_weight_direct 16->1 9x9": lambda k: k.conv2d_weight_direct(z, gy, 9, 9),
        "im2col 9ch 3x3": lambda k: k.im2col(x, 3, 3),
        "radon_march 90 views": lambda k: k.radon_march(img, ang, nb, 0.5),
        "backproject 90 views": lambda k: k.backproject(sino, ang, 2 * size, 2 * size),
    }


def compare(repeats=5, size=64):
    """Rows of (kernel, compiled mean, compiled sd, python mean, python sd)."""
    rows = []
    for name, fn in cases(size).items():
        py = _time(lambda: fn(backend.python_kernels), repeats)
        if backend.compiled_kernels is not None:
            cc = _time(lambda: fn(backend.compiled_kernels), repeats)
        else:
            cc = (float("nan"), float("nan"))
        rows.append((name, cc[0], cc[1], py[0], py[1]))
    return rows


def format_rows(rows):
    lines = [f"{'kernel':34s} {'compiled (s)':>16s} {'python (s)':>16s} {'speedup':>8s}"]
    for name, cm, cs, pm, ps in rows:
        lines.append(f"{name:34s} {cm:9.4f}±{cs:6.4f} {pm:9.4f}±{ps:6.4f} {pm / cm:8.2f}")
    return "\n".join(lines)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--size", type=int, default=64)
    args = ap.parse_args(argv)
    print(f"active backend: {backend.name}")
    print(format_rows(compare(args.repeats, args.size)))


if __name__ == "__main__":
    main()
