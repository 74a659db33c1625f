"""Pick the routing-kernel backend at import time.

The compiled ``_kernels`` extension is preferred. Setting
``CAPSATTN_PURE_PYTHON=1`` in the environment, or a failed import, selects the
numpy implementation in ``_kernels_py``.
"""

import os

from . import _kernels_py

_BACKENDS = {"python": _kernels_py}

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None
else:
    _BACKENDS["cython"] = _compiled

if _compiled is not None and os.environ.get("CAPSATTN_PURE_PYTHON", "") in ("", "0"):
    _active = "cython"
else:
    _active = "python"


def available() -> list[str]:
    return sorted(_BACKENDS)


def backend_name() -> str:
    return _active


def set_backend(name: str) -> None:
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"backend {name!r} not available; have {available()}")
    _active = name


def get(name: str | None = None):
    """Return the kernel module for ``name`` (default: the active one)."""
    return _BACKENDS[name or _active]
