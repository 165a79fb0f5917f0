"""Select the compiled core when available, else the numpy fallback.

Set ``SRBRIDGE_BACKEND=python`` to force the fallback.
"""

from __future__ import annotations

import os

from . import _fallback

_forced = os.environ.get("SRBRIDGE_BACKEND", "").lower()
if _forced in ("python", "numpy", "fallback"):
    impl = _fallback
    BACKEND = "python"
else:
    try:
        from . import _core as impl  # type: ignore[attr-defined]
        BACKEND = "compiled"
    except ImportError:  # pragma: no cover - depends on the build
        impl = _fallback
        BACKEND = "python"

fallback = _fallback


def get(name: str, backend: str | None = None):
    """Return kernel ``name`` from the selected (or an explicit) backend."""
    if backend is None:
        return getattr(impl, name)
    if backend == "python":
        return getattr(_fallback, name)
    if backend == "compiled":
        from . import _core  # type: ignore[attr-defined]
        return getattr(_core, name)
    raise ValueError(f"unknown backend {backend!r}")


_threads = 1


def set_threads(n: int) -> None:
    """Thread count for the compiled kernels (0 means all cores)."""
    global _threads
    _threads = (os.cpu_count() or 1) if n == 0 else max(1, int(n))


def threads() -> int:
    return _threads
