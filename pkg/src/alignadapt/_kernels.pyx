# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the token-merging and temporal-conv kernels.

Signatures and tie-breaking match ``_kernels_py`` exactly.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating

cnp.import_array()


def bipartite_match(floating[:, :, ::1] scores, Py_ssize_t r):
    cdef Py_ssize_t B = scores.shape[0], na = scores.shape[1]
    cdef Py_ssize_t b, a, pos, q
    dtype = np.float32 if floating is float else np.float64
    src_arr = np.zeros((B, r), dtype=np.int64)
    dst_arr = np.zeros((B, r), dtype=np.int64)
    val_arr = np.zeros((B, r), dtype=dtype)
    if r == 0:
        return src_arr, dst_arr, val_arr
    # the row argmax is vectorised by numpy (first index on ties, like the fallback)
    full = np.asarray(scores)
    bidx_arr = np.ascontiguousarray(full.argmax(axis=-1), dtype=np.int64)
    best_arr = np.ascontiguousarray(np.take_along_axis(full, bidx_arr[..., None], axis=-1)[..., 0])
    cdef cnp.int64_t[:, ::1] src = src_arr
    cdef cnp.int64_t[:, ::1] dst = dst_arr
    cdef floating[:, ::1] val = val_arr
    cdef floating[:, ::1] best = best_arr
    cdef cnp.int64_t[:, ::1] bidx = bidx_arr
    cdef floating s
    cdef Py_ssize_t filled
    for b in range(B):
        # top-r by (score desc, source asc) using insertion into a sorted prefix
        filled = 0
        for a in range(na):
            s = best[b, a]
            if filled == r and not (s > val[b, r - 1]):
                continue
            pos = filled if filled < r else r - 1
            while pos > 0 and s > val[b, pos - 1]:
                pos -= 1
            q = filled if filled < r else r - 1
            while q > pos:
                val[b, q] = val[b, q - 1]
                src[b, q] = src[b, q - 1]
                dst[b, q] = dst[b, q - 1]
                q -= 1
            val[b, pos] = s
            src[b, pos] = a
            dst[b, pos] = bidx[b, a]
            if filled < r:
                filled += 1
    return src_arr, dst_arr, val_arr


def merge_slots(Py_ssize_t n, cnp.int64_t[:, ::1] src, cnp.int64_t[:, ::1] dst):
    cdef Py_ssize_t B = src.shape[0], r = src.shape[1]
    cdef Py_ssize_t b, i, k
    slot_arr = np.empty((B, n), dtype=np.int64)
    removed_arr = np.zeros(n, dtype=np.uint8)
    cdef cnp.int64_t[:, ::1] slot = slot_arr
    cdef cnp.uint8_t[::1] removed = removed_arr
    for b in range(B):
        for i in range(n):
            removed[i] = 0
        for k in range(r):
            removed[src[b, k]] = 1
        k = 0
        for i in range(n):
            slot[b, i] = k
            if not removed[i]:
                k += 1
        for k in range(r):
            slot[b, src[b, k]] = slot[b, dst[b, k]]
    return slot_arr


def merge_forward(floating[:, :, ::1] x, floating[:, ::1] w,
                  cnp.int64_t[:, ::1] slot, Py_ssize_t m):
    cdef Py_ssize_t B = x.shape[0], n = x.shape[1], d = x.shape[2]
    cdef Py_ssize_t b, i, c, o
    cdef floating wi
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((B, m, d), dtype=dtype)
    cdef floating[:, :, ::1] out = out_arr
    for b in range(B):
        for i in range(n):
            o = slot[b, i]
            wi = w[b, i]
            for c in range(d):
                out[b, o, c] += wi * x[b, i, c]
    return out_arr


def merge_backward(floating[:, :, ::1] g, floating[:, ::1] w, cnp.int64_t[:, ::1] slot):
    cdef Py_ssize_t B = g.shape[0], d = g.shape[2], n = slot.shape[1]
    cdef Py_ssize_t b, i, c, o
    cdef floating wi
    dtype = np.float32 if floating is float else np.float64
    gx_arr = np.empty((B, n, d), dtype=dtype)
    cdef floating[:, :, ::1] gx = gx_arr
    for b in range(B):
        for i in range(n):
            o = slot[b, i]
            wi = w[b, i]
            for c in range(d):
                gx[b, i, c] = wi * g[b, o, c]
    return gx_arr


def _unfold(floating[:, :, ::1] x, Py_ssize_t k):
    """(B, T, d) -> (B*T, k*d) zero-padded sliding windows."""
    cdef Py_ssize_t B = x.shape[0], T = x.shape[1], d = x.shape[2], pad = (k - 1) // 2
    cdef Py_ssize_t b, t, o, src_t, i, row
    dtype = np.float32 if floating is float else np.float64
    col_arr = np.zeros((B * T, k * d), dtype=dtype)
    cdef floating[:, ::1] col = col_arr
    for b in range(B):
        for t in range(T):
            row = b * T + t
            for o in range(k):
                src_t = t + o - pad
                if src_t < 0 or src_t >= T:
                    continue
                for i in range(d):
                    col[row, o * d + i] = x[b, src_t, i]
    return col_arr


def _fold(floating[:, ::1] col, Py_ssize_t B, Py_ssize_t T, Py_ssize_t k):
    """Adjoint of ``_unfold``: scatter-add windows back to (B, T, d)."""
    cdef Py_ssize_t d = col.shape[1] // k, pad = (k - 1) // 2
    cdef Py_ssize_t b, t, o, src_t, i, row
    dtype = np.float32 if floating is float else np.float64
    gx_arr = np.zeros((B, T, d), dtype=dtype)
    cdef floating[:, :, ::1] gx = gx_arr
    for b in range(B):
        for t in range(T):
            row = b * T + t
            for o in range(k):
                src_t = t + o - pad
                if src_t < 0 or src_t >= T:
                    continue
                for i in range(d):
                    gx[b, src_t, i] += col[row, o * d + i]
    return gx_arr


# Window gathering is compiled; the contraction is one BLAS matmul.
def conv1d_forward(floating[:, :, ::1] x, floating[:, :, ::1] W):
    cdef Py_ssize_t B = x.shape[0], T = x.shape[1], k = W.shape[0], e = W.shape[2]
    col = _unfold(x, k)
    return (col @ np.asarray(W).reshape(-1, e)).reshape(B, T, e)


def conv1d_backward(floating[:, :, ::1] x, floating[:, :, ::1] W, floating[:, :, ::1] g):
    cdef Py_ssize_t B = x.shape[0], T = x.shape[1], k = W.shape[0], d = W.shape[1], e = W.shape[2]
    Wm = np.asarray(W).reshape(k * d, e)
    gm = np.asarray(g).reshape(B * T, e)
    gW = (_unfold(x, k).T @ gm).reshape(k, d, e)
    gx = _fold(np.ascontiguousarray(gm @ Wm.T), B, T, k)
    return gx, gW
