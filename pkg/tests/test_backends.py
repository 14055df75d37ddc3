import os
import subprocess
import sys

import numpy as np
import pytest

from acdmar import backend, bench

needs_compiled = pytest.mark.skipif(backend.compiled_kernels is None,
                                    reason="compiled extension not built")


@needs_compiled
@pytest.mark.parametrize("name", list(bench.cases(size=12)))
def test_compiled_matches_python(name):
    fn = bench.cases(size=12)[name]
    a = fn(backend.compiled_kernels)
    b = fn(backend.python_kernels)
    if isinstance(a, tuple):
        a, b = a[0], b[0]
    np.testing.assert_allclose(np.asarray(a), np.asarray(b), rtol=1e-10, atol=1e-10)


@needs_compiled
def test_col2im_matches(rng):
    cols = rng.standard_normal((2, 3 * 9, 7 * 6))
    np.testing.assert_allclose(backend.compiled_kernels.col2im(cols, 3, 7, 6, 3, 3),
                               backend.python_kernels.col2im(cols, 3, 7, 6, 3, 3), atol=1e-12)


def _selected(env_value):
    env = dict(os.environ, ACDMAR_BACKEND=env_value)
    return subprocess.run([sys.executable, "-c", "from acdmar import backend; print(backend.name)"],
                          env=env, capture_output=True, text=True)


def test_env_forces_python():
    r = _selected("python")
    assert r.returncode == 0 and r.stdout.strip() == "python"


@needs_compiled
def test_env_auto_prefers_compiled():
    r = _selected("auto")
    assert r.returncode == 0 and r.stdout.strip() == "compiled"


def test_env_rejects_unknown_value():
    r = _selected("gpu")
    assert r.returncode != 0 and "ACDMAR_BACKEND" in r.stderr


def test_compare_rows():
    rows = bench.compare(repeats=1, size=8)
    assert len(rows) == len(bench.cases(size=8))
    assert all(r[3] > 0 for r in rows)
    assert "speedup" in bench.format_rows(rows)
