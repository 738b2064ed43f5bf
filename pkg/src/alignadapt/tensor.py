"""Dense tensors with reverse-mode differentiation.

Every op output remembers its parents, a backward closure and a sequence
number. ``Tensor.backward`` walks the reachable ops in reverse execution
order and accumulates gradients into leaves that require them.

Discrete choices made during a forward pass (detached values, argmax
selections, token-merge plans) can be captured in a ``DecisionLog`` and
replayed, so that finite differences treat them as constants the same way
reverse accumulation does.
"""
import itertools
import math
from contextlib import contextmanager
from contextvars import ContextVar

import numpy as np

from . import kernels
from .errors import ContractError, NumericError, ParameterError, ShapeError

_grad_enabled = ContextVar("grad_enabled", default=True)
_decision_log = ContextVar("decision_log", default=None)
_seq = itertools.count()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_seq")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._op = None
        self._seq = -1

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def zero_grad(self):
        self.grad = None

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def backward(self, grad=None):
        backward(self, grad)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward_fn, op):
    out = Tensor(data)
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        out._op = op
        out._seq = next(_seq)
    return out


@contextmanager
def no_grad():
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


# -- decision capture -----------------------------------------------------
class DecisionLog:
    """Ordered discrete choices from one forward pass.

    In ``record`` mode each decision is computed and stored; in ``replay``
    mode the stored values are returned in the same order.
    """

    def __init__(self):
        self.entries = []
        self.mode = "record"
        self._cursor = 0

    def __len__(self):
        return len(self.entries)

    def resolve(self, key, compute):
        if self.mode == "record":
            value = compute()
            self.entries.append((key, value))
            return value
        if self._cursor >= len(self.entries):
            raise ContractError("decision replay ran past the recorded pass")
        stored_key, value = self.entries[self._cursor]
        if stored_key != key:
            raise ContractError(f"decision replay mismatch: expected {stored_key}, got {key}")
        self._cursor += 1
        return value


@contextmanager
def recording(log):
    log.mode = "record"
    token = _decision_log.set(log)
    try:
        yield log
    finally:
        _decision_log.reset(token)


@contextmanager
def replaying(log):
    log.mode = "replay"
    log._cursor = 0
    token = _decision_log.set(log)
    try:
        yield log
    finally:
        _decision_log.reset(token)


def decide(key, compute):
    """Compute a non-differentiable choice, honouring any active log."""
    log = _decision_log.get()
    if log is None:
        return compute()
    return log.resolve(key, compute)


# -- reverse accumulation -------------------------------------------------
def backward(loss, grad=None):
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor")
    if grad is None:
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        return
    nodes = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in nodes:
            continue
        nodes[id(t)] = t
        for p in t._parents:
            if p.requires_grad and id(p) not in nodes:
                stack.append(p)
    grads = {id(loss): np.asarray(grad, dtype=loss.dtype)}
    ordered = sorted((t for t in nodes.values() if t._backward is not None),
                     key=lambda t: t._seq, reverse=True)
    for t in ordered:
        g = grads.pop(id(t), None)
        if g is None:
            continue
        parent_grads = t._backward(g)
        for p, pg in zip(t._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if p._backward is None:
                pg = np.asarray(pg, dtype=p.dtype)
                p.grad = pg.copy() if p.grad is None else p.grad + pg
            else:
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg
    if loss._backward is None:
        loss.grad = grads.get(id(loss), grad) if loss.grad is None else loss.grad + grad


# -- elementwise ----------------------------------------------------------
def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _lift(a, b):
    a_t = isinstance(a, Tensor)
    b_t = isinstance(b, Tensor)
    if not a_t:
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not b_t:
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


def add(a, b):
    a, b = _lift(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = _lift(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b):
    a, b = _lift(a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                 "mul")


def div(a, b):
    a, b = _lift(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape))

    return _make(out, (a, b), bw, "div")


def power(a, p):
    ad = a.data
    return _make(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a):
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a):
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """Tanh-approximated GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), bw, "gelu")


# -- shape ops ------------------------------------------------------------
def reshape(a, shape):
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None):
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(a, i, j):
    return _make(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),), "swapaxes")


def _basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def getitem(a, idx):
    shape, dtype = a.shape, a.dtype
    basic = _basic_index(idx)

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        if basic:
            out[idx] += g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), bw, "getitem")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw, "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), bw, "stack")


def broadcast_to(a, shape):
    old = a.shape
    return _make(np.broadcast_to(a.data, shape).copy(), (a,),
                 lambda g: (_unbroadcast(g, old),), "broadcast")


# -- reductions -----------------------------------------------------------
def tsum(a, axis=None, keepdims=False):
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


# -- linear algebra -------------------------------------------------------
def matmul(a, b):
    a, b = _lift(a, b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape[-1]} vs {b.shape[-2]} "
                         f"(shapes {a.shape} and {b.shape})")
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(ad @ bd, (a, b), bw, "matmul")


def linear(x, weight, bias=None):
    out = matmul(x, weight)
    return out if bias is None else out + bias


# -- normalisation / softmax ---------------------------------------------
def softmax(a, axis=-1):
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


def softmax_rows(m):
    """Row-wise softmax with max subtraction; rows of the output sum to 1."""
    return softmax(as_tensor(m), axis=-1)


def log_softmax(a, axis=-1):
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def bw(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), bw, "log_softmax")


def logsumexp(a, axis=-1):
    """log(sum(exp(a))) over ``axis`` (dropped), stabilised by the max."""
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))
    w = np.exp(x - lse)

    def bw(g):
        return (np.expand_dims(g, axis) * w,)

    return _make(np.squeeze(lse, axis), (a,), bw, "logsumexp")


def layer_norm(x, gain, bias, eps=1e-5):
    if eps <= 0:
        raise ParameterError(f"layer_norm eps must be positive, got {eps}")
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias must have length {d}, got {gain.shape}/{bias.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        gx = ggain = gbias = None
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gbias = g.reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain, gbias

    return _make(out, (x, gain, bias), bw, "layer_norm")


def l2_normalize(a, axis=-1):
    """Scale rows to unit length. Zero rows are rejected, not patched."""
    x = a.data
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    if np.any(norm == 0):
        raise NumericError("cannot normalise a zero-norm row (cosine undefined)")
    out = x / norm

    def bw(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return _make(out, (a,), bw, "l2_normalize")


def cross_entropy(logits, targets):
    """Mean negative log-likelihood of integer ``targets`` under row softmax."""
    targets = np.asarray(targets, dtype=np.int64)
    lp = log_softmax(logits, axis=-1)
    n = logits.shape[0]
    picked = getitem(lp, (np.arange(n), targets))
    return mean(picked) * -1.0


# -- discrete / gradient-routing ops ---------------------------------------
def detach(a):
    """Copy of ``a`` that blocks gradient flow."""
    value = decide("detach", lambda: a.data.copy())
    return Tensor(value)


def straight_through_onehot(a, axis=-1):
    """Exact one-hot of the row argmax in the forward pass, identity gradient.

    Equivalent to ``one_hot(argmax a) + a - detach(a)`` with the forward
    value free of rounding residue.
    """
    idx = decide("argmax", lambda: a.data.argmax(axis=axis))
    out = np.zeros_like(a.data)
    np.put_along_axis(out, np.expand_dims(idx, axis), 1.0, axis=axis)
    if _decision_log.get() is not None:
        # Under replay the detached copy is the recorded one, so perturbed
        # passes see one_hot + (a - a_recorded), exactly the surrogate above.
        out = out + (a.data - decide("detach", lambda: a.data.copy()))
    return _make(out, (a,), lambda g: (g,), "straight_through")


# -- attention / temporal conv / merging ------------------------------------
def multi_head_attention(q, k, v, heads, wq, bq, wk, bk, wv, bv, wo, bo):
    """Scaled dot-product attention over ``heads`` heads with projections.

    ``q`` is (..., nq, d); ``k`` and ``v`` are (..., nk, d). Scale is
    1/sqrt(head_dim).
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    d = q.shape[-1]
    if heads <= 0 or d % heads:
        raise ShapeError(f"feature dim {d} not divisible by heads={heads}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"key rows {k.shape[-2]} != value rows {v.shape[-2]}")
    squeeze = q.ndim == 2
    if squeeze:
        q, k, v = (reshape(t, (1,) + t.shape) for t in (q, k, v))
    B, nq, _ = q.shape
    nk = k.shape[1]
    dh = d // heads
    Q = transpose(reshape(linear(q, wq, bq), (B, nq, heads, dh)), (0, 2, 1, 3))
    K = transpose(reshape(linear(k, wk, bk), (B, nk, heads, dh)), (0, 2, 3, 1))
    V = transpose(reshape(linear(v, wv, bv), (B, nk, heads, dh)), (0, 2, 1, 3))
    att = softmax(matmul(Q, K) * (1.0 / math.sqrt(dh)), axis=-1)
    ctx = reshape(transpose(matmul(att, V), (0, 2, 1, 3)), (B, nq, d))
    out = linear(ctx, wo, bo)
    if squeeze:
        out = reshape(out, (nq, d))
    return out


def conv1d_temporal(x, kernels_w):
    """Zero-padded convolution over the time axis of a (..., T, d) tensor.

    ``kernels_w`` is a (kernel_size, d_in, d_out) bank; kernel_size must be odd.
    """
    x, kernels_w = as_tensor(x), as_tensor(kernels_w)
    ks = kernels_w.shape[0]
    if ks % 2 == 0:
        raise ParameterError(f"kernel_size must be odd, got {ks}")
    if kernels_w.shape[1] != x.shape[-1]:
        raise ShapeError(f"conv input dim {x.shape[-1]} != kernel dim {kernels_w.shape[1]}")
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    Wd = kernels_w.data
    out = kernels.conv1d_forward(xd, Wd)

    def bw(g):
        g3 = g[None] if squeeze else g
        gx, gW = kernels.conv1d_backward(xd, Wd, g3)
        if squeeze:
            gx = gx[0]
        return gx.astype(x.dtype, copy=False), gW.astype(kernels_w.dtype, copy=False)

    return _make(out[0] if squeeze else out, (x, kernels_w), bw, "conv1d")


def merge_tokens(x, weights, slot, m):
    """Weighted scatter of (B, n, d) tokens into m output slots.

    ``out[b, slot[b, i]] += weights[b, i] * x[b, i]``. Weights are constants.
    """
    xd = x.data
    w = np.asarray(weights, dtype=xd.dtype)
    out = kernels.merge_forward(xd, w, slot, m)

    def bw(g):
        return (kernels.merge_backward(np.ascontiguousarray(g), w, slot),)

    return _make(out, (x,), bw, "merge")


def one_hot(indices, depth, dtype=np.float64):
    out = np.zeros(np.shape(indices) + (depth,), dtype=dtype)
    np.put_along_axis(out, np.expand_dims(np.asarray(indices), -1), 1.0, axis=-1)
    return out
