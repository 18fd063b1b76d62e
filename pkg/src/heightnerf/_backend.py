"""Kernel selection: compiled ``_core`` when importable, else ``_pykernels``.

Set ``HEIGHTNERF_PURE_PYTHON=1`` to force the fallback.
"""
from __future__ import annotations

import os

from . import _pykernels

_core = None
if os.environ.get("HEIGHTNERF_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _core  # type: ignore[no-redef]
    except ImportError:
        _core = None

BACKEND = "compiled" if _core is not None else "python"
_impl = _core if _core is not None else _pykernels

ais_edges = _impl.ais_edges
composite_forward = _impl.composite_forward
composite_backward = _impl.composite_backward


def get_backend(name: str):
    """Module implementing the kernels for ``name`` in {"compiled", "python"}."""
    if name == "python":
        return _pykernels
    if name == "compiled":
        if _core is None:
            raise ImportError("compiled core is not built")
        return _core
    raise ValueError(f"unknown backend {name!r}")
