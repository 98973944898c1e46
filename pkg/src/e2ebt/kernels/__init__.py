"""Kernel backend selection.

The hot row-wise kernels exist twice: a compiled Cython extension
(``_ckernels``) and a pure numpy fallback (``numpy_backend``). The active
backend is picked at import time; set ``E2EBT_KERNELS=numpy`` or ``=c`` to
force one. ``impl`` is the module the rest of the package calls into.
"""

import os

from . import numpy_backend

try:
    from . import _ckernels
except ImportError:
    _ckernels = None


def get(name):
    """Return a backend module by name ('c' or 'numpy')."""
    if name == "numpy":
        return numpy_backend
    if name == "c":
        if _ckernels is None:
            raise RuntimeError("compiled kernel extension is not available")
        return _ckernels
    raise ValueError(f"unknown kernel backend: {name!r}")


def available():
    """Names of the backends importable in this environment."""
    return ("c", "numpy") if _ckernels is not None else ("numpy",)


_requested = os.environ.get("E2EBT_KERNELS", "auto")
if _requested == "auto":
    impl = _ckernels if _ckernels is not None else numpy_backend
else:
    impl = get(_requested)

backend_name = "c" if impl is _ckernels and impl is not None else "numpy"
