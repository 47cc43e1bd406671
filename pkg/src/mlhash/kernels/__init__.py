"""Hamming-scan kernels.

The compiled extension is used when it was built; otherwise, or when the
``MLHASH_PURE_PYTHON`` environment variable is set to a non-empty value, the
numpy implementation is used. ``BACKEND`` names the active one.
"""

import os

from . import _fallback

if os.environ.get("MLHASH_PURE_PYTHON"):
    _impl = _fallback
else:
    try:
        from . import _hamming as _impl
    except ImportError:
        _impl = _fallback

BACKEND = "compiled" if _impl is not _fallback else "python"

hamming_scan = _impl.hamming_scan
rank_by_distance = _impl.rank_by_distance
search_packed = _impl.search_packed


def available_backends() -> dict:
    out = {"python": _fallback}
    try:
        from . import _hamming
    except ImportError:
        pass
    else:
        out["compiled"] = _hamming
    return out
