"""Select the compiled kernels when available, else the numpy fallback.

Set ``KANEPOC_BACKEND=python`` to force the fallback.
"""
import os

from . import _kernels_py

kernels = _kernels_py
BACKEND = "python"

if os.environ.get("KANEPOC_BACKEND", "").lower() != "python":
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        kernels = _compiled
        BACKEND = "cython"


def get_kernels(name=None):
    """Return a kernel module by name (``"cython"``/``"python"``), default active."""
    if name is None:
        return kernels
    if name == "python":
        return _kernels_py
    if name == "cython":
        from . import _kernels as compiled
        return compiled
    raise ValueError(f"unknown backend {name!r}")
