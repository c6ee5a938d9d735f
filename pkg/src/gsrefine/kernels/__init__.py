"""Backend selection for the hot pair-accumulation kernels.

The compiled Cython core is used when its extension module imported
successfully; otherwise the numpy/scipy fallback takes over transparently.
Set GSREFINE_BACKEND=python to force the fallback (useful for the
benchmark and for debugging); GSREFINE_BACKEND=compiled raises if the
extension is unavailable.
"""

import os

from . import numpy_backend

try:
    from . import _core

    HAVE_COMPILED = True
except ImportError:
    _core = None
    HAVE_COMPILED = False

_FORCED = os.environ.get("GSREFINE_BACKEND", "").strip().lower()
if _FORCED == "compiled" and not HAVE_COMPILED:
    raise ImportError("GSREFINE_BACKEND=compiled but the extension module is not built")

_active = numpy_backend if (_FORCED == "python" or not HAVE_COMPILED) else (_core or numpy_backend)


def backend_name() -> str:
    return "compiled" if _active is _core else "python"


def get_backend(name: str | None = None):
    """Return the kernel module for `name` ('compiled', 'python', or None
    for the active default)."""
    if name is None:
        return _active
    if name == "python":
        return numpy_backend
    if name == "compiled":
        if not HAVE_COMPILED:
            raise ValueError("compiled backend requested but the extension is not built")
        return _core
    raise ValueError(f"unknown backend {name!r}")


def find_pairs(*args, **kwargs):
    return _active.find_pairs(*args, **kwargs)


def grad_scatter(*args, **kwargs):
    return _active.grad_scatter(*args, **kwargs)
