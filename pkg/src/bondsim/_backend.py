"""Kernel selection.

The compiled extension is used when it imports; ``BONDSIM_PURE_PYTHON=1``
forces the interpreter written in Python.
"""

from __future__ import annotations

import os
from types import ModuleType

from . import _pykernel


def _load_compiled() -> ModuleType | None:
    if os.environ.get("BONDSIM_PURE_PYTHON", "") not in ("", "0"):
        return None
    try:
        from . import _ckernel
    except ImportError:
        return None
    return _ckernel


compiled: ModuleType | None = _load_compiled()
kernel: ModuleType = compiled if compiled is not None else _pykernel
python = _pykernel


def available() -> dict[str, ModuleType]:
    """Backends importable in this process, keyed by name."""
    out = {"python": _pykernel}
    try:
        from . import _ckernel
    except ImportError:
        pass
    else:
        out[_ckernel.NAME] = _ckernel
    return out


def use(name: str) -> ModuleType:
    """Switch the active kernel ("python" or "c") and return it."""
    global kernel
    backends = available()
    if name not in backends:
        raise ValueError(f"backend {name!r} not available (have {sorted(backends)})")
    kernel = backends[name]
    return kernel
