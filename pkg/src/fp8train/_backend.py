"""Pick the element-wise kernel implementation at import time.

The compiled extension is used when it was built; ``FP8TRAIN_BACKEND=python``
forces the NumPy fallback and ``FP8TRAIN_BACKEND=cython`` makes a missing
extension an error.
"""

import importlib
import logging
import os

log = logging.getLogger(__name__)

_requested = os.environ.get("FP8TRAIN_BACKEND", "auto").lower()


def load(name: str):
    """Return the kernel module for ``name`` in {"cython", "python"}."""
    if name == "cython":
        return importlib.import_module("fp8train._kernels")
    if name == "python":
        return importlib.import_module("fp8train._kernels_py")
    raise ValueError(f"unknown backend {name!r}")


if _requested == "auto":
    try:
        kernels = load("cython")
    except ImportError:
        log.debug("compiled kernels unavailable, using NumPy fallback")
        kernels = load("python")
else:
    kernels = load(_requested)

BACKEND = kernels.BACKEND
