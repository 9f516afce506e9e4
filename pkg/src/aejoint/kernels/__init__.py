"""Hot DP kernels. The compiled module is used when present, unless
``AEJOINT_PURE_PYTHON=1`` forces the fallback."""

import os

import numpy as np

from . import _fallback

BACKEND = "python"
_impl = _fallback
if os.environ.get("AEJOINT_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _fallback


def edit_distance(ref, hyp) -> int:
    """Levenshtein distance between two integer-token sequences."""
    if _impl is _fallback:
        return _fallback.edit_distance(ref, hyp)
    return _impl.edit_distance(
        np.ascontiguousarray(ref, dtype=np.int64), np.ascontiguousarray(hyp, dtype=np.int64)
    )


def ctc_nll(log_probs, target, blank: int) -> float:
    if _impl is _fallback:
        return _fallback.ctc_nll(log_probs, target, blank)
    return float(_impl.ctc_nll(
        np.ascontiguousarray(log_probs, dtype=np.float64),
        np.ascontiguousarray(target, dtype=np.int64),
        int(blank),
    ))


__all__ = ["BACKEND", "edit_distance", "ctc_nll"]
