"""Kernel backend selection.

The gather/scatter inner loops of the sparse convolutions exist twice: a
numba-jitted version (`_kernels_numba`) and a pure-numpy version
(`_kernels_numpy`). The active backend is chosen once at import from the
``SPARSELOC_BACKEND`` environment variable (``numba`` or ``numpy``, default
``numba``) and can be switched at runtime with :func:`set_backend`, which the
benchmark and the backend-equivalence tests use.

``SPARSELOC_NUM_THREADS`` caps the numba thread pool. All accumulation loops
run in a fixed order, so results do not depend on the thread count.
"""

import os
import warnings

_VALID = ("numba", "numpy")

_requested = os.environ.get("SPARSELOC_BACKEND", "numba").strip().lower()
if _requested not in _VALID:
    warnings.warn(
        f"SPARSELOC_BACKEND={_requested!r} is not one of {_VALID}; using 'numba'"
    )
    _requested = "numba"

_active = None
_module = None


def _load(name: str):
    if name == "numba":
        try:
            threads = os.environ.get("SPARSELOC_NUM_THREADS")
            if threads:
                import numba

                numba.set_num_threads(max(1, int(threads)))
            from sparseloc import _kernels_numba as mod
        except ImportError as exc:
            warnings.warn(f"numba backend unavailable ({exc}); falling back to numpy")
            from sparseloc import _kernels_numpy as mod

            return "numpy", mod
        return "numba", mod
    from sparseloc import _kernels_numpy as mod

    return "numpy", mod


def set_backend(name: str) -> str:
    """Switch the active kernel backend; returns the backend actually in use."""
    global _active, _module
    if name not in _VALID:
        raise ValueError(f"unknown backend {name!r}; expected one of {_VALID}")
    _active, _module = _load(name)
    return _active


def active_backend() -> str:
    if _active is None:
        set_backend(_requested)
    return _active


def kernels():
    """Module holding the hot kernels of the active backend."""
    if _module is None:
        set_backend(_requested)
    return _module
