"""Kernel backend selection.

The compiled extension is preferred when importable; the pure-Python twin is
the fallback.  ``HETBIAS_BACKEND=python|cython`` overrides the default.
Both kernels produce bit-identical output for identical inputs.
"""

from __future__ import annotations

import os

from . import _kernel_py

try:
    from . import _kernel  # type: ignore[attr-defined]

    HAVE_COMPILED = True
except ImportError:
    _kernel = None  # type: ignore[assignment]
    HAVE_COMPILED = False

__all__ = ["HAVE_COMPILED", "available_backends", "get_kernel", "default_backend"]


def available_backends() -> tuple[str, ...]:
    return ("cython", "python") if HAVE_COMPILED else ("python",)


def default_backend() -> str:
    env = os.environ.get("HETBIAS_BACKEND")
    if env:
        return env
    return "cython" if HAVE_COMPILED else "python"


def get_kernel(name: str | None = None):
    """Resolve a kernel module by name, env override, or availability."""
    if name is None:
        name = default_backend()
    if name == "cython":
        if not HAVE_COMPILED:
            raise RuntimeError(
                "compiled kernel unavailable; build the extension or select "
                "backend='python'"
            )
        return _kernel
    if name == "python":
        return _kernel_py
    raise ValueError(f"unknown backend {name!r}")
