"""Kernel backend selection.

Hot numeric kernels (convolution, pooling, median filtering) ship in two
flavours: numba-compiled loops and pure-numpy vectorised fallbacks. The
active flavour is decided once at import time from the ``PURELAB_BACKEND``
environment variable:

    PURELAB_BACKEND=numba   force numba (error if it cannot be imported)
    PURELAB_BACKEND=numpy   force the pure-numpy fallback
    unset or "auto"         numba when importable, numpy otherwise

``benchmarks/bench_backends.py`` times both flavours side by side.
"""
from __future__ import annotations

import os

_ENV_VAR = "PURELAB_BACKEND"

try:
    import numba  # noqa: F401

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - mirror env always has numba
    NUMBA_AVAILABLE = False


def resolve_backend() -> str:
    """Return the active kernel backend name, "numba" or "numpy"."""
    choice = os.environ.get(_ENV_VAR, "auto").strip().lower()
    if choice in ("", "auto"):
        return "numba" if NUMBA_AVAILABLE else "numpy"
    if choice == "numba":
        if not NUMBA_AVAILABLE:
            raise RuntimeError(
                f"{_ENV_VAR}=numba requested but numba is not importable"
            )
        return "numba"
    if choice == "numpy":
        return "numpy"
    raise RuntimeError(
        f"unrecognised {_ENV_VAR}={choice!r}; expected auto, numba or numpy"
    )


BACKEND = resolve_backend()
