"""Pure numpy implementations of the hot kernels.

These are the reference versions; the Cython module ``_kernels`` mirrors the
same signatures and must return identical indices and numerically equal
values.
"""
import numpy as np


def bipartite_match(scores, r):
    """Pick the ``r`` best source->destination proposals per batch row.

    ``scores`` has shape (B, na, nb). Each source proposes its best
    destination (lowest destination index on ties); sources are ranked by
    descending score, lower source index first on ties.

    Returns ``(src, dst, val)`` each of shape (B, r), in rank order.
    """
    scores = np.ascontiguousarray(scores)
    B, na, nb = scores.shape
    if r == 0:
        return (np.zeros((B, 0), np.int64), np.zeros((B, 0), np.int64),
                np.zeros((B, 0), scores.dtype))
    best_dst = scores.argmax(axis=-1)
    best = np.take_along_axis(scores, best_dst[..., None], axis=-1)[..., 0]
    order = np.argsort(-best, axis=-1, kind="stable")[:, :r]
    src = order.astype(np.int64)
    dst = np.take_along_axis(best_dst, order, axis=-1).astype(np.int64)
    val = np.take_along_axis(best, order, axis=-1)
    return src, dst, val


def merge_slots(n, src, dst):
    """Map every input token to its output slot after merging src into dst.

    ``src``/``dst`` hold full token indices, shape (B, r). Surviving tokens
    keep their relative order.
    """
    B, r = src.shape
    removed = np.zeros((B, n), dtype=bool)
    rows = np.arange(B)[:, None]
    removed[rows, src] = True
    rank = np.cumsum(~removed, axis=1) - 1
    slot = rank.copy()
    slot[rows, src] = rank[rows, dst]
    return slot.astype(np.int64)


def _merge_matrix(w, slot, m):
    B, n = slot.shape
    mat = np.zeros((B, m, n), dtype=w.dtype)
    rows = np.arange(B)[:, None]
    cols = np.arange(n)[None, :]
    mat[rows, slot, cols] = w
    return mat


def merge_forward(x, w, slot, m):
    """out[b, slot[b, i]] += w[b, i] * x[b, i]."""
    return _merge_matrix(w.astype(x.dtype), slot, m) @ x


def merge_backward(g, w, slot):
    """Gradient of ``merge_forward`` with respect to ``x``."""
    gathered = np.take_along_axis(g, slot[..., None], axis=1)
    return w.astype(g.dtype)[..., None] * gathered


def conv1d_forward(x, W):
    """Zero-padded temporal convolution. x: (B, T, d), W: (k, d, e)."""
    k = W.shape[0]
    pad = (k - 1) // 2
    B, T, _ = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (0, 0)))
    out = np.zeros((B, T, W.shape[2]), dtype=np.result_type(x, W))
    for o in range(k):
        out += xp[:, o:o + T] @ W[o]
    return out


def conv1d_backward(x, W, g):
    k = W.shape[0]
    pad = (k - 1) // 2
    B, T, d = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (0, 0)))
    gxp = np.zeros((B, T + 2 * pad, d), dtype=np.result_type(x, W, g))
    gW = np.zeros_like(W, dtype=np.result_type(x, W, g))
    g2 = g.reshape(B * T, -1)
    for o in range(k):
        gW[o] = xp[:, o:o + T].reshape(B * T, d).T @ g2
        gxp[:, o:o + T] += g @ W[o].T
    return gxp[:, pad:pad + T], gW
