"""Kernel backend selection.

The compiled extension is preferred when present; set CTDRL_PURE_PYTHON=1
to force the numpy fallback. Both backends implement identical math.
"""

import os

import numpy as np

from . import _fallback

if os.environ.get("CTDRL_PURE_PYTHON"):
    _impl = _fallback
    BACKEND = "python"
else:
    try:
        from . import _native as _impl

        BACKEND = "native"
    except ImportError:
        _impl = _fallback
        BACKEND = "python"


def quantile_huber_batch(pred, target, kappa):
    if kappa <= 0:
        raise ValueError(f"kappa must be positive, got {kappa}")
    pred = np.ascontiguousarray(pred, dtype=np.float64)
    target = np.ascontiguousarray(target, dtype=np.float64)
    if pred.ndim != 2 or target.ndim != 2 or pred.shape[0] != target.shape[0]:
        raise ValueError("pred and target must be 2-d with matching batch size")
    return _impl.quantile_huber_batch(pred, target, float(kappa))


def wasserstein_sorted(a, b, p):
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("inputs must be 1-d and the same size")
    return _impl.wasserstein_sorted(a, b, int(p))
