"""Kernel dispatch: compiled extension when importable, numpy fallback otherwise.

Set ``PROGSEG_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _fallback

BACKEND = "python"
_impl = _fallback

if os.environ.get("PROGSEG_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None
    else:
        _impl = _compiled
        BACKEND = "cython"
else:
    _compiled = None


def get_backend(name=None):
    """Return the kernel module for ``name`` ('cython', 'python' or None for active)."""
    if name is None:
        return _impl
    if name == "python":
        return _fallback
    if name == "cython":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not available")
        return _compiled
    raise ValueError(f"unknown kernel backend {name!r}")


def compiled_available():
    return _compiled is not None


fps = _impl.fps
weighted_fps = _impl.weighted_fps
solve = _impl.solve
hungarian_lex = _impl.hungarian_lex
