"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy kernels.
``COLONTCN_BACKEND=numpy`` (or ``compiled``) forces a choice.
"""

import logging
import os

from colontcn import _npkernels

logger = logging.getLogger(__name__)

_BACKENDS = {"numpy": _npkernels}

try:
    from colontcn import _ckernels

    _BACKENDS["compiled"] = _ckernels
except ImportError:  # pragma: no cover - depends on build
    _ckernels = None


def available():
    return sorted(_BACKENDS)


def get(name=None):
    """Return the kernel module called ``name`` (default: best available)."""
    if name is None:
        name = os.environ.get("COLONTCN_BACKEND") or (
            "compiled" if "compiled" in _BACKENDS else "numpy"
        )
    try:
        return _BACKENDS[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} unavailable; have {available()}") from None


kernels = get()
name = "compiled" if kernels is _ckernels and _ckernels is not None else "numpy"
logger.debug("colontcn kernel backend: %s", name)


def use(backend):
    """Switch the process-wide backend (used by tests and the benchmark)."""
    global kernels, name
    kernels = get(backend)
    name = backend
