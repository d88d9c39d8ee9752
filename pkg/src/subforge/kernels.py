"""Kernel backend selection.

The compiled extension is used when it was built; otherwise the numpy
fallback is loaded. Set ``SUBFORGE_BACKEND=python`` to force the fallback.
"""

import os

from . import _pykernels

python_backend = _pykernels

try:
    if os.environ.get("SUBFORGE_BACKEND", "").lower() == "python":
        raise ImportError("fallback forced by SUBFORGE_BACKEND")
    from . import _ckernels as _impl

    compiled_backend = _impl
    BACKEND = "cython"
except ImportError:
    try:
        from . import _ckernels as compiled_backend
    except ImportError:
        compiled_backend = None
    _impl = _pykernels
    BACKEND = "python"

splitmix64_stream = _impl.splitmix64_stream
fisher_yates_prefix = _impl.fisher_yates_prefix
fnv1a64 = _impl.fnv1a64
prune_lowest = _impl.prune_lowest
popcount_and_or = _impl.popcount_and_or
popcount_xor = _impl.popcount_xor


def available_backends():
    """Return ``{name: module}`` for every importable backend."""
    out = {"python": _pykernels}
    if compiled_backend is not None:
        out["cython"] = compiled_backend
    return out
