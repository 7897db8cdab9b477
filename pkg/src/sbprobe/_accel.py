"""Numba toggle shared by the kernel modules.

Set ``SBPROBE_DISABLE_NUMBA=1`` to route every kernel through its pure-numpy
implementation. The flag is read once at import time.
"""
from __future__ import annotations

import os
from typing import Any, Callable

_DISABLED = os.environ.get("SBPROBE_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

try:
    if _DISABLED:
        raise ImportError
    from numba import njit as _njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def _njit(*args: Any, **kwargs: Any) -> Callable:
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f


njit = _njit


def use_numba() -> bool:
    return HAVE_NUMBA
