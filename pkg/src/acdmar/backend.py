"""Kernel backend selection.

The compiled Cython module is used when it imports; otherwise the numpy
twin in ``_pykernels`` is used.  Set ``ACDMAR_BACKEND=python`` to force the
fallback, or ``ACDMAR_BACKEND=compiled`` to make a missing extension an error.
"""
import os

from . import _pykernels

python_kernels = _pykernels

try:
    from . import _kernels as compiled_kernels
except ImportError:  # extension not built
    compiled_kernels = None

_choice = os.environ.get("ACDMAR_BACKEND", "auto").lower()
if _choice not in ("auto", "python", "compiled"):
    raise ImportError(f"ACDMAR_BACKEND must be auto, python or compiled, got {_choice!r}")
if _choice == "compiled" and compiled_kernels is None:
    raise ImportError("ACDMAR_BACKEND=compiled but acdmar._kernels is not built")

if _choice == "python" or compiled_kernels is None:
    kernels = python_kernels
    name = "python"
else:
    kernels = compiled_kernels
    name = "compiled"
