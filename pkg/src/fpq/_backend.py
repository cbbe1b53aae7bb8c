"""Kernel backend selection.

The compiled extension is used when it imports; ``FPQ_BACKEND=python``
forces the numpy fallback.
"""

import os

from . import _fallback

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

BACKENDS = {"python": _fallback}
if _compiled is not None:
    BACKENDS["cython"] = _compiled


def _select():
    want = os.environ.get("FPQ_BACKEND", "").strip().lower()
    if want:
        if want not in BACKENDS:
            raise ImportError(f"FPQ_BACKEND={want!r} is not available (have {sorted(BACKENDS)})")
        return want
    return "cython" if "cython" in BACKENDS else "python"


name = _select()
kernels = BACKENDS[name]


def use(backend: str) -> None:
    """Switch the active backend at runtime (tests and benchmarks)."""
    global name, kernels
    if backend not in BACKENDS:
        raise ValueError(f"backend {backend!r} is not available (have {sorted(BACKENDS)})")
    name = backend
    kernels = BACKENDS[backend]
