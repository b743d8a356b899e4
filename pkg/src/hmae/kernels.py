"""Kernel dispatch: compiled extension when importable, numpy otherwise.

Set ``HMAE_PURE_PYTHON=1`` to force the numpy fallback.
"""
from __future__ import annotations

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("HMAE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled  # type: ignore[attr-defined]
    except ImportError:
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"

binary_search_perplexity = _impl.binary_search_perplexity
tsne_gradient = _impl.tsne_gradient
resize_bilinear = _impl.resize_bilinear


def get_backend(name: str):
    """Return the kernel module named ``"python"`` or ``"cython"`` (for tests/benchmarks)."""
    if name == "python":
        return _kernels_py
    if name == "cython":
        from . import _kernels

        return _kernels
    raise ValueError(f"unknown kernel backend {name!r}")
