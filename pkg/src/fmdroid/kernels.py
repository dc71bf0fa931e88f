"""Backend selection for the FM kernels.

The compiled extension is used when it imports; otherwise the numpy
implementation is used. Setting ``FMDROID_PURE_PYTHON=1`` forces the
fallback, which is how the test-suite exercises both paths.
"""

import os

import numpy as np

from . import _kernels_py

try:
    if os.environ.get("FMDROID_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("compiled kernels disabled by FMDROID_PURE_PYTHON")
    from . import _kernels as _compiled
except ImportError:
    _compiled = None

BACKENDS = {"python": _kernels_py}
if _compiled is not None:
    BACKENDS["compiled"] = _compiled

BACKEND = "compiled" if _compiled is not None else "python"


def get(name=None):
    """Kernel module for ``name`` (default: the active backend)."""
    name = name or BACKEND
    try:
        return BACKENDS[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} is not available; have {sorted(BACKENDS)}") from None


def as_csr(indptr, indices):
    return (
        np.ascontiguousarray(indptr, dtype=np.int64),
        np.ascontiguousarray(indices, dtype=np.int64),
    )
