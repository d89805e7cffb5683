"""Minimal reverse-mode differentiation over numpy arrays.

Operations performed inside an active :class:`GradTape` on tensors that
require gradients are recorded in execution order. Because every node is
appended after its parents, walking the tape backwards is a reverse
topological order and each node is visited exactly once.

Outside a tape the same functions just compute forward values, which is
what inference uses. Tensors are float64 unless built from float32 data;
gradients always take the dtype of the tensor they belong to.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NonFiniteError, ShapeError

_tapes: list["GradTape"] = []
_debug = False


def set_debug(enabled: bool) -> None:
    """Check every op output for NaN/Inf and raise on the first one."""
    global _debug
    _debug = bool(enabled)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        self.data = arr if arr.dtype == np.float32 else arr.astype(np.float64, copy=False)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"<Tensor{label} shape={self.data.shape}>"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)


class GradTape:
    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        _tapes.append(self)
        return self

    def __exit__(self, *exc):
        _tapes.pop()
        return False


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    if _debug and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by {op}")
    out = Tensor(data)
    if _tapes and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        out.name = op
        _tapes[-1].nodes.append(out)
    return out


def backward(tape: GradTape, root: Tensor, wrt: Sequence[Tensor] | None = None):
    """Accumulate d(root)/d(x) into ``x.grad`` for every tensor on the tape.

    Returns the gradients of ``wrt`` (zeros where ``root`` does not depend
    on a tensor).
    """
    if root.data.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.data.shape}")
    for node in tape.nodes:
        node.grad = None
        for parent in node.parents:
            parent.grad = None
    root.grad = np.ones_like(root.data)
    for node in reversed(tape.nodes):
        if node.grad is None or node.backward_fn is None:
            continue
        grads = node.backward_fn(node.grad)
        for parent, g in zip(node.parents, grads):
            if g is None or not parent.requires_grad:
                continue
            g = np.asarray(g, dtype=parent.data.dtype)
            if parent.grad is None:
                parent.grad = g
            else:
                parent.grad = parent.grad + g
    if wrt is None:
        return None
    return [np.zeros_like(t.data) if t.grad is None else t.grad for t in wrt]


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and reductions

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def square(a: Tensor) -> Tensor:
    return _result(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def tsum(a: Tensor) -> Tensor:
    return _result(np.sum(a.data), (a,), lambda g: (np.full(a.shape, g),), "sum")


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return _result(np.mean(a.data), (a,), lambda g: (np.full(a.shape, g / n),), "mean")


def reshape(a: Tensor, shape) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(data, tensors, bw, "concat")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    return _result(out, (a,), lambda g: (g * (out > 0),), "relu")


def log(a: Tensor, floor: float = 0.0) -> Tensor:
    """Natural log of max(a, floor); no gradient flows through clamped entries."""
    clamped = a.data < floor
    safe = np.maximum(a.data, floor) if floor > 0 else a.data
    return _result(np.log(safe), (a,), lambda g: (np.where(clamped, 0.0, g / safe),), "log")


def l2_penalty(params: Sequence[Tensor], lam: float) -> Tensor:
    """(lam / 2) * sum of squared entries over all ``params``."""
    total = 0.5 * lam * sum(float(np.sum(p.data * p.data)) for p in params)
    return _result(np.asarray(total), tuple(params),
                   lambda g: tuple(lam * g * p.data for p in params), "l2")


# ---------------------------------------------------------------------------
# layers

def matmul(a: Tensor, b: Tensor) -> Tensor:
    return _result(a.data @ b.data, (a, b),
                   lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x (B, D) @ w (D, O) + b (O)."""
    if x.shape[-1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ShapeError(f"affine extents {x.shape} @ {w.shape} + {b.shape}")
    return _result(x.data @ w.data + b.data, (x, w, b),
                   lambda g: (g @ w.data.T, x.data.T @ g, g.sum(axis=0)), "affine")


def conv_over_time(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Full-height convolution along the last (time) axis, stride 1.

    x: (B, P, M, T); w: (Q, P, M, k); b: (Q,). Returns (B, Q, T - k + 1) with
    out[b, q, t] = sum_{p, m, j} x[b, p, m, t + j] * w[q, p, m, j] + b[q].
    """
    x, w = _as_tensor(x), _as_tensor(w)
    bsz, p, m, t = x.shape
    q, wp, wm, k = w.shape
    if (wp, wm) != (p, m):
        raise ShapeError(f"filter extent {(wp, wm)} must cover input {(p, m)}")
    if k > t:
        raise ShapeError(f"filter width {k} exceeds time extent {t}")
    length = t - k + 1
    pm = p * m
    # time-major input (B, T, P*M); column block j holds the frames shifted by j
    xt = np.ascontiguousarray(x.data.reshape(bsz, pm, t).transpose(0, 2, 1))
    cols = np.concatenate([xt[:, j:j + length] for j in range(k)], axis=2)  # (B, L, k*P*M)
    wmat = w.data.reshape(q, pm, k).transpose(0, 2, 1).reshape(q, k * pm)
    out = (cols.reshape(-1, k * pm) @ wmat.T).reshape(bsz, length, q)
    if b is not None:
        out += b.data
    out = out.transpose(0, 2, 1)

    def bw(g):
        gt = np.ascontiguousarray(g.transpose(0, 2, 1))  # (B, L, Q)
        gw = gt.reshape(-1, q).T @ cols.reshape(-1, k * pm)
        gw = gw.reshape(q, k, pm).transpose(0, 2, 1).reshape(w.shape)
        gx = None
        if x.requires_grad:
            gcols = (gt.reshape(-1, q) @ wmat).reshape(bsz, length, k * pm)
            gxt = np.zeros_like(xt)
            for j in range(k):
                gxt[:, j:j + length] += gcols[:, :, j * pm:(j + 1) * pm]
            gx = gxt.transpose(0, 2, 1).reshape(x.shape)
        grads = (gx, gw)
        if b is not None:
            grads = grads + (gt.sum(axis=(0, 1)),)
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return _result(np.ascontiguousarray(out), parents, bw, "conv_over_time")


def max_over_time(x: Tensor) -> Tensor:
    """1-max pooling over the last axis; ties route the gradient to the first index."""
    if x.shape[-1] == 0:
        raise ShapeError("1-max pooling of an empty feature map")
    idx = np.argmax(x.data, axis=-1)[..., None]
    out = np.take_along_axis(x.data, idx, axis=-1)[..., 0]

    def bw(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, g[..., None], axis=-1)
        return (gx,)

    return _result(out, (x,), bw, "max_over_time")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout: kept units are scaled by 1 / (1 - rate) at train time."""
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = 1.0 - rate
    mask = ((rng.random(x.shape) < keep) / keep).astype(x.data.dtype)
    return _result(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max subtraction."""
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteError("softmax of non-finite logits")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - np.sum(g * p, axis=-1, keepdims=True)),)

    return _result(p, (x,), bw, "softmax")


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray, floor: float = 1e-12) -> Tensor:
    """Per-sample multi-slot cross-entropy from logits.

    logits, targets: (B, S, Y). Returns (B,) with
    loss[b] = -sum_{s, y} targets[b, s, y] * ln(max(softmax(logits)[b, s, y], floor)).
    """
    if logits.shape != targets.shape:
        raise ShapeError(f"logits {logits.shape} vs targets {targets.shape}")
    targets = np.asarray(targets, dtype=logits.data.dtype)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    live = targets * (p >= floor)
    loss = -np.sum(targets * np.log(np.maximum(p, floor)), axis=(1, 2))

    def bw(g):
        gl = p * live.sum(axis=-1, keepdims=True) - live
        return (gl * g[:, None, None],)

    return _result(loss, (logits,), bw, "softmax_cross_entropy")


def filterbank(x: Tensor, w: Tensor) -> Tensor:
    """Per-channel filter bank: x (B, P, F, T), w (P, M, F) -> (B, P, M, T)."""
    if x.shape[1] != w.shape[0] or x.shape[2] != w.shape[2]:
        raise ShapeError(f"filter bank {w.shape} does not fit input {x.shape}")
    out = w.data @ x.data  # broadcasts (P, M, F) over the batch axis

    def bw(g):
        return (np.swapaxes(w.data, 1, 2) @ g,
                (g @ np.swapaxes(x.data, 2, 3)).sum(axis=0))

    return _result(out, (x, w), bw, "filterbank")


def conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Valid 2-D convolution, stride 1. x (B, C, H, W), w (K, C, kh, kw), b (K,)."""
    bsz, c, h, wd = x.shape
    kout, wc, kh, kw = w.shape
    if wc != c:
        raise ShapeError(f"conv2d channel mismatch {wc} vs {c}")
    if kh > h or kw > wd:
        raise ShapeError(f"kernel {(kh, kw)} larger than input {(h, wd)}")
    ho, wo = h - kh + 1, wd - kw + 1
    cols = sliding_window_view(x.data, (kh, kw), axis=(2, 3))  # (B, C, Ho, Wo, kh, kw)
    cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(bsz * ho * wo, c * kh * kw)
    wmat = w.data.reshape(kout, -1)
    out = (cols @ wmat.T + b.data).reshape(bsz, ho, wo, kout).transpose(0, 3, 1, 2)

    def bw(g):
        gcol = g.transpose(0, 2, 3, 1).reshape(-1, kout)
        gw = (gcol.T @ cols).reshape(w.shape)
        gb = gcol.sum(axis=0)
        gpatch = (gcol @ wmat).reshape(bsz, ho, wo, c, kh, kw)
        gx = np.zeros_like(x.data)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i:i + ho, j:j + wo] += gpatch[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return gx, gw, gb

    return _result(np.ascontiguousarray(out), (x, w, b), bw, "conv2d")


def max_pool2d(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Max pooling with stride equal to the window; trailing remainders dropped."""
    ph, pw = size
    bsz, c, h, wd = x.shape
    ho, wo = h // ph, wd // pw
    if ho == 0 or wo == 0:
        raise ShapeError(f"pool {size} larger than input {(h, wd)}")
    win = x.data[:, :, :ho * ph, :wo * pw].reshape(bsz, c, ho, ph, wo, pw)
    win = win.transpose(0, 1, 2, 4, 3, 5).reshape(bsz, c, ho, wo, ph * pw)
    idx = np.argmax(win, axis=-1)[..., None]
    out = np.take_along_axis(win, idx, axis=-1)[..., 0]

    def bw(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, idx, g[..., None], axis=-1)
        gw = gw.reshape(bsz, c, ho, wo, ph, pw).transpose(0, 1, 2, 4, 3, 5)
        gx = np.zeros_like(x.data)
        gx[:, :, :ho * ph, :wo * pw] = gw.reshape(bsz, c, ho * ph, wo * pw)
        return (gx,)

    return _result(out, (x,), bw, "max_pool2d")


# ---------------------------------------------------------------------------
# checking

def finite_difference_grad(f, arrays: Sequence[np.ndarray], h: float = 1e-5) -> list[np.ndarray]:
    """Central differences of the scalar ``f()`` w.r.t. each array, perturbed in place."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            orig = a[i]
            a[i] = orig + h
            fp = f()
            a[i] = orig - h
            fm = f()
            a[i] = orig
            g[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray, atol: float = 1e-8) -> float:
    """max |a - n| / max(|a| + |n|, atol), elementwise."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), atol), initial=0.0))
