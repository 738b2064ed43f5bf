"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy
fallback. Set ``ALIGNADAPT_PURE=1`` to force the fallback.
"""
import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("ALIGNADAPT_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None
    if _compiled is not None:
        _impl = _compiled
        BACKEND = "cython"


def _float(a, dtype):
    return np.ascontiguousarray(a, dtype=dtype)


def _index(a):
    return np.ascontiguousarray(a, dtype=np.int64)


def bipartite_match(scores, r, impl=None):
    impl = impl or _impl
    scores = np.ascontiguousarray(scores)
    if scores.dtype not in (np.float32, np.float64):
        scores = scores.astype(np.float64)
    return impl.bipartite_match(scores, int(r))


def merge_slots(n, src, dst, impl=None):
    impl = impl or _impl
    return impl.merge_slots(int(n), _index(src), _index(dst))


def merge_forward(x, w, slot, m, impl=None):
    impl = impl or _impl
    return impl.merge_forward(_float(x, x.dtype), _float(w, x.dtype), _index(slot), int(m))


def merge_backward(g, w, slot, impl=None):
    impl = impl or _impl
    return impl.merge_backward(_float(g, g.dtype), _float(w, g.dtype), _index(slot))


def conv1d_forward(x, W, impl=None):
    impl = impl or _impl
    dtype = np.result_type(x, W)
    return impl.conv1d_forward(_float(x, dtype), _float(W, dtype))


def conv1d_backward(x, W, g, impl=None):
    impl = impl or _impl
    dtype = np.result_type(x, W, g)
    return impl.conv1d_backward(_float(x, dtype), _float(W, dtype), _float(g, dtype))


def available():
    """Backends importable in this environment, keyed by name."""
    out = {"python": _kernels_py}
    try:
        from . import _kernels as compiled
        out["cython"] = compiled
    except ImportError:
        pass
    return out
