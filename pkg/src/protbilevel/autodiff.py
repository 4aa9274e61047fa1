"""Dense tensors with tape-based reverse-mode differentiation.

Operations are recorded only while a :class:`Tape` is active and at least one
input requires a gradient, so inference code pays nothing for the machinery.
Ragged attention is expressed through ``segment_*`` ops keyed by an integer
segment id per row.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy import sparse

__all__ = [
    "ShapeError", "ContractError", "Tensor", "Tape", "tensor", "add", "sub", "mul", "div", "neg", "matmul",
    "sum_", "mean", "reshape", "concat", "getitem", "gather", "index_update", "segment_sum", "segment_softmax", "edge_dot", "segment_attend",
    "layer_norm", "gelu", "relu", "exp", "sqrt", "abs_", "square", "l2_norm", "embedding_lookup",
    "cross_entropy_with_logits", "bce_with_logits", "l1_loss", "l2_loss", "grad_check", "grad_check_params",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for an op."""


class ContractError(ValueError):
    pass


_ACTIVE: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        if not _ACTIVE:
            raise ContractError("backward() needs an active tape; use Tape.backward")
        _ACTIVE[-1].backward(self)


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad, dtype)


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of executed ops; use as a context manager."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, out: Tensor, seed: np.ndarray | None = None) -> None:
        """Accumulate d(out)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
        if seed is None:
            if out.data.size != 1:
                raise ContractError(f"backward from non-scalar output of shape {out.shape} needs a seed")
            seed = np.ones_like(out.data)
        grads: dict[int, np.ndarray] = {id(out): np.asarray(seed, dtype=out.dtype)}
        produced = {id(o) for o, _, _ in self.nodes}
        leaves: dict[int, Tensor] = {}
        for node_out, inputs, fn in reversed(self.nodes):
            g = grads.pop(id(node_out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if key not in produced:
                    leaves[key] = inp
        if id(out) not in produced and out.requires_grad:
            leaves[id(out)] = out
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def _record(out_data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    track = bool(_ACTIVE) and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        _ACTIVE[-1].nodes.append((out, tuple(inputs), backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# --- elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _broadcast_shape("add", a, b)
    return _record(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape) if a.requires_grad else None,
                   _unbroadcast(g, b.shape) if b.requires_grad else None),
    )


def sub(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _broadcast_shape("sub", a, b)
    return _record(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape) if a.requires_grad else None,
                   _unbroadcast(-g, b.shape) if b.requires_grad else None),
    )


def mul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _broadcast_shape("mul", a, b)
    return _record(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                   _unbroadcast(g * a.data, b.shape) if b.requires_grad else None),
    )


def div(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return _record(
        out, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                   _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None),
    )


def neg(a) -> Tensor:
    a = _t(a)
    return _record(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = _t(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def sqrt(a) -> Tensor:
    a = _t(a)
    out = np.sqrt(a.data)
    return _record(out, (a,), lambda g: (g * 0.5 / out,))


def square(a) -> Tensor:
    a = _t(a)
    return _record(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def abs_(a) -> Tensor:
    a = _t(a)
    return _record(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def relu(a) -> Tensor:
    a = _t(a)
    mask = a.data > 0
    return _record(a.data * mask, (a,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """Tanh approximation of GELU (in-place arithmetic keeps temporaries down)."""
    a = _t(a)
    x = a.data
    x2 = x * x
    inner = x2 * (_GELU_C * 0.044715)
    inner += _GELU_C
    inner *= x
    th = np.tanh(inner, out=inner)
    out = th + 1.0
    out *= x
    out *= 0.5

    def back(g):
        d = x2 * (3 * 0.044715 * _GELU_C)
        d += _GELU_C
        d *= x
        sech2 = th * th
        np.subtract(1.0, sech2, out=sech2)
        d *= sech2
        d += th
        d += 1.0
        d *= 0.5
        d *= g
        return (d,)

    return _record(out, (a,), back)


# --- linear algebra and shape ---------------------------------------------------


def matmul(a, b) -> Tensor:
    """``a @ b`` for ``a`` of shape ``(..., k)`` and a 2-D ``b`` of shape ``(k, m)``."""
    a, b = _t(a), _t(b)
    if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def back(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[1]) if b.requires_grad else None
        return ga, gb

    return _record(a.data @ b.data, (a, b), back)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = _t(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(out, (a,), back)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _t(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis, keepdims), 1.0 / max(int(count), 1))


def reshape(a, shape) -> Tensor:
    a = _t(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [_t(x) for x in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(out, ts, back)


def getitem(a, index) -> Tensor:
    a = _t(a)
    out = a.data[index]

    basic = all(isinstance(i, (slice, int, type(None), type(Ellipsis)))
                for i in (index if isinstance(index, tuple) else (index,)))

    def back(g):
        ga = np.zeros_like(a.data)
        if basic:
            ga[index] = g
        else:
            np.add.at(ga, index, g)
        return (ga,)

    return _record(out, (a,), back)


_INCIDENCE: dict[tuple[int, int], tuple[np.ndarray, sparse.csr_matrix]] = {}


def _incidence(index: np.ndarray, n_rows: int) -> sparse.csr_matrix:
    """Sparse ``(n_rows, len(index))`` 0/1 matrix, cached for index arrays reused across ops."""
    key = (id(index), n_rows)
    hit = _INCIDENCE.get(key)
    if hit is not None and hit[0] is index:
        return hit[1]
    mat = sparse.csr_matrix((np.ones(len(index)), (index, np.arange(len(index)))), shape=(n_rows, len(index)))
    if len(_INCIDENCE) >= 32:
        _INCIDENCE.pop(next(iter(_INCIDENCE)))
    _INCIDENCE[key] = (index, mat)
    return mat


_PATTERNS: dict[tuple[int, int, int, int], tuple] = {}


def _pattern(dst: np.ndarray, src: np.ndarray, n_rows: int, n_cols: int):
    """CSR layout (order, indices, indptr) of the edge pattern ``(dst, src)``, cached like ``_incidence``."""
    key = (id(dst), id(src), n_rows, n_cols)
    hit = _PATTERNS.get(key)
    if hit is not None and hit[0] is dst and hit[1] is src:
        return hit[2]
    order = np.argsort(dst, kind="stable")
    indptr = np.concatenate([[0], np.cumsum(np.bincount(dst, minlength=n_rows))])
    layout = (order, src[order].astype(np.int32), indptr.astype(np.int32))
    if len(_PATTERNS) >= 32:
        _PATTERNS.pop(next(iter(_PATTERNS)))
    _PATTERNS[key] = (dst, src, layout)
    return layout


def _segment_reduce(values: np.ndarray, index: np.ndarray, n_rows: int) -> np.ndarray:
    """``out[index[e]] += values[e]`` as a sparse incidence-matrix product."""
    if values.ndim == 1:
        return np.bincount(index, weights=values, minlength=n_rows).astype(values.dtype, copy=False)
    out = _incidence(index, n_rows) @ values.reshape(len(index), -1)
    return np.asarray(out, dtype=values.dtype).reshape((n_rows,) + values.shape[1:])


_GROUPS: dict[int, tuple[np.ndarray, tuple]] = {}


def _groups(index: np.ndarray):
    """(order, sorted ids, group starts) of an id array, cached like ``_incidence``."""
    hit = _GROUPS.get(id(index))
    if hit is not None and hit[0] is index:
        return hit[1]
    order = np.argsort(index, kind="stable")
    sorted_ids = index[order]
    starts = np.flatnonzero(np.r_[True, sorted_ids[1:] != sorted_ids[:-1]])
    if len(_GROUPS) >= 32:
        _GROUPS.pop(next(iter(_GROUPS)))
    _GROUPS[id(index)] = (index, (order, sorted_ids, starts))
    return order, sorted_ids, starts


def _segment_max(values: np.ndarray, index: np.ndarray, n_rows: int) -> np.ndarray:
    order, sorted_ids, starts = _groups(index)
    out = np.full((n_rows,) + values.shape[1:], -np.inf, dtype=values.dtype)
    if len(order):
        out[sorted_ids[starts]] = np.maximum.reduceat(values[order], starts, axis=0)
    return out


def gather(a, index) -> Tensor:
    """Rows ``a[index]`` for an integer index array."""
    a = _t(a)
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < -a.shape[0] or index.max() >= a.shape[0]):
        raise ShapeError(f"gather: index out of range for {a.shape[0]} rows")
    n = a.shape[0]
    rows = index if not index.size or index.min() >= 0 else index % n
    return _record(a.data[index], (a,), lambda g: (_segment_reduce(g, rows, n),))


def embedding_lookup(table, ids) -> Tensor:
    return gather(table, ids)


def index_update(a, index, rows) -> Tensor:
    """Copy of ``a`` with ``a[index] = rows`` (indices unique)."""
    a, rows = _t(a), _t(rows)
    index = np.asarray(index, dtype=np.int64)
    if rows.shape != (len(index),) + a.shape[1:]:
        raise ShapeError(f"index_update: rows {rows.shape} do not fit {len(index)} slots of {a.shape}")
    out = a.data.copy()
    out[index] = rows.data

    def back(g):
        ga = g.copy()
        ga[index] = 0.0
        return ga, g[index]

    return _record(out, (a, rows), back)


def segment_sum(values, segment_ids, n_segments: int) -> Tensor:
    """``out[s] = sum of values[e] with segment_ids[e] == s``."""
    values = _t(values)
    seg = np.asarray(segment_ids, dtype=np.int64)
    if seg.shape != values.shape[:1]:
        raise ShapeError(f"segment_sum: {len(seg)} ids for values of shape {values.shape}")
    return _record(_segment_reduce(values.data, seg, n_segments), (values,), lambda g: (g[seg],))


def segment_softmax(logits, segment_ids, n_segments: int) -> Tensor:
    """Softmax over the rows that share a segment id, independently per trailing column."""
    logits = _t(logits)
    seg = np.asarray(segment_ids, dtype=np.int64)
    if seg.shape != logits.shape[:1]:
        raise ShapeError(f"segment_softmax: {len(seg)} ids for logits of shape {logits.shape}")
    x = logits.data
    peak = _segment_max(x, seg, n_segments)
    z = np.exp(x - peak[seg])
    total = _segment_reduce(z, seg, n_segments)
    out = z / total[seg]

    def back(g):
        dot = _segment_reduce(g * out, seg, n_segments)
        return (out * (g - dot[seg]),)

    return _record(out, (logits,), back)


_HEAD_LAYOUTS: dict[tuple[int, int, int, int, int], tuple] = {}


def _head_layout(dst: np.ndarray, src: np.ndarray, n_rows: int, n_cols: int, heads: int):
    """CSR layout of the block matrix with entry ``[dst[e] * H + h, src[e] * H + h]`` for every edge and head.

    Returns ``(perm, indices, indptr)`` where ``perm`` picks the CSR data out of
    a flattened ``(E, H)`` weight array. Cached like ``_pattern``.
    """
    key = (id(dst), id(src), n_rows, n_cols, heads)
    hit = _HEAD_LAYOUTS.get(key)
    if hit is not None and hit[0] is dst and hit[1] is src:
        return hit[2]
    order, indices, indptr = _pattern(dst, src, n_rows, n_cols)
    counts = np.repeat(np.diff(indptr), heads)
    starts = np.repeat(indptr[:-1], heads)
    total = int(counts.sum())
    j = np.repeat(starts - np.concatenate([[0], np.cumsum(counts)[:-1]]), counts) + np.arange(total)
    h = np.repeat(np.tile(np.arange(heads), n_rows), counts)
    layout = (order[j] * heads + h, (indices[j].astype(np.int64) * heads + h).astype(np.int32),
              np.concatenate([[0], np.cumsum(counts)]).astype(np.int32))
    if len(_HEAD_LAYOUTS) >= 32:
        _HEAD_LAYOUTS.pop(next(iter(_HEAD_LAYOUTS)))
    _HEAD_LAYOUTS[key] = (dst, src, layout)
    return layout


def _head_matrix(weights: np.ndarray, dst: np.ndarray, src: np.ndarray, n_rows: int, n_cols: int):
    """Sparse ``(n_rows * H, n_cols * H)`` matrix holding ``weights[e, h]`` at ``[dst[e] * H + h, src[e] * H + h]``."""
    heads = weights.shape[1]
    perm, indices, indptr = _head_layout(dst, src, n_rows, n_cols, heads)
    return sparse.csr_matrix((weights.ravel()[perm], indices, indptr), shape=(n_rows * heads, n_cols * heads))


def _per_head(mat, x: np.ndarray, transpose: bool = False) -> np.ndarray:
    """Apply a ``_head_matrix`` to ``(n, H, K)`` rows, giving ``(m, H, K)``."""
    n, heads, width = x.shape
    out = (mat.T if transpose else mat) @ x.reshape(n * heads, width)
    return out.reshape(-1, heads, width)


def edge_dot(q, k, dst, src) -> Tensor:
    """Per-edge, per-head dot products ``out[e, h] = <q[dst[e], h], k[src[e], h]>``."""
    q, k = _t(q), _t(k)
    dst = np.asarray(dst, dtype=np.int64)
    src = np.asarray(src, dtype=np.int64)
    if q.ndim != 3 or k.shape[1:] != q.shape[1:] or dst.shape != src.shape:
        raise ShapeError(f"edge_dot: q {q.shape}, k {k.shape}, {len(dst)} dst / {len(src)} src")

    def back(g):
        mat = _head_matrix(g, dst, src, q.shape[0], k.shape[0])
        gq = _per_head(mat, k.data) if q.requires_grad else None
        gk = _per_head(mat, q.data, transpose=True) if k.requires_grad else None
        return gq, gk

    return _record(np.einsum("ehk,ehk->eh", q.data[dst], k.data[src]), (q, k), back)


def segment_attend(weights, values, src, dst, n_segments: int) -> Tensor:
    """``out[i, h] = sum over edges e with dst[e] == i of weights[e, h] * values[src[e], h]``.

    One block-sparse matrix over (node, head) rows, so no per-edge copy of ``values`` is formed.
    """
    w, v = _t(weights), _t(values)
    dst = np.asarray(dst, dtype=np.int64)
    src = np.asarray(src, dtype=np.int64)
    if v.ndim != 3 or w.shape != (len(dst), v.shape[1]) or src.shape != dst.shape:
        raise ShapeError(f"segment_attend: weights {w.shape}, values {v.shape}, {len(dst)} edges")
    mat = _head_matrix(w.data, dst, src, n_segments, v.shape[0])

    def back(g):
        gw = np.einsum("ehk,ehk->eh", g[dst], v.data[src]) if w.requires_grad else None
        gv = _per_head(mat, g, transpose=True) if v.requires_grad else None
        return gw, gv

    return _record(_per_head(mat, v.data), (w, v), back)


# --- normalisation and norms ----------------------------------------------------


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis, then apply the affine ``gamma``/``beta``."""
    x, gamma, beta = _t(x), _t(gamma), _t(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}, {beta.shape} vs feature dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def back(g):
        gh = g * gamma.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        flat = g.reshape(-1, d)
        return gx, (flat * xhat.reshape(-1, d)).sum(axis=0), flat.sum(axis=0)

    return _record(out, (x, gamma, beta), back)


def l2_norm(x, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along ``axis``; the subgradient at zero is taken as zero."""
    x = _t(x)
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    out = n if keepdims else np.squeeze(n, axis=axis)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(n > 0, n, 1.0)
        return (np.where(n > 0, g * x.data / safe, 0.0),)

    return _record(out, (x,), back)


# --- losses ------------------------------------------------------------------------


def cross_entropy_with_logits(logits, targets) -> Tensor:
    """Mean softmax cross-entropy; ``targets`` are class indices."""
    logits = _t(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy_with_logits: logits {logits.shape} vs targets {targets.shape}")
    n = max(len(targets), 1)
    x = logits.data
    m = x.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=1))
    loss = (lse - x[np.arange(len(targets)), targets]).sum() / n

    def back(g):
        p = np.exp(x - lse[:, None])
        p[np.arange(len(targets)), targets] -= 1.0
        return (g * p / n,)

    return _record(np.asarray(loss, dtype=x.dtype), (logits,), back)


def bce_with_logits(logits, labels) -> Tensor:
    """Mean binary cross-entropy on raw logits (numerically stable form)."""
    logits = _t(logits)
    y = np.asarray(labels, dtype=logits.dtype)
    if y.shape != logits.shape:
        raise ShapeError(f"bce_with_logits: logits {logits.shape} vs labels {y.shape}")
    x = logits.data
    n = max(x.size, 1)
    loss = (np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))).sum() / n

    def back(g):
        p = 0.5 * (1.0 + np.tanh(0.5 * x))
        return (g * (p - y) / n,)

    return _record(np.asarray(loss, dtype=x.dtype), (logits,), back)


def l1_loss(pred, target) -> Tensor:
    pred, target = _t(pred), _t(target)
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss: shapes {pred.shape} and {target.shape}")
    return mean(abs_(sub(pred, target)))


def l2_loss(pred, target) -> Tensor:
    pred, target = _t(pred), _t(target)
    if pred.shape != target.shape:
        raise ShapeError(f"l2_loss: shapes {pred.shape} and {target.shape}")
    return mean(square(sub(pred, target)))


# --- gradient checking ---------------------------------------------------------------


def _relative_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def grad_check(f: Callable, point, epsilon: float = 1e-5) -> float:
    """Largest component-wise relative error between reverse-mode and central differences.

    ``point`` is an array or a sequence of arrays; ``f`` receives one Tensor per
    array and must return a scalar Tensor.
    """
    single = isinstance(point, (np.ndarray, float, int)) or (
        isinstance(point, (list, tuple)) and not any(isinstance(p, (np.ndarray, list, tuple)) for p in point)
    )
    arrays = [np.array(point, dtype=np.float64)] if single else [np.array(p, dtype=np.float64) for p in point]

    def evaluate(arrs) -> float:
        out = f(*[Tensor(a) for a in arrs])
        if _t(out).data.size != 1:
            raise ContractError(f"grad_check needs a scalar-valued function, got shape {_t(out).shape}")
        return float(_t(out).data)

    inputs = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = f(*inputs)
    if _t(out).data.size != 1:
        raise ContractError(f"grad_check needs a scalar-valued function, got shape {_t(out).shape}")
    tape.backward(out)
    worst = 0.0
    for k, arr in enumerate(arrays):
        analytic = inputs[k].grad if inputs[k].grad is not None else np.zeros_like(arr)
        numeric = np.zeros_like(arr)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = evaluate(arrays)
            flat[i] = orig - epsilon
            down = evaluate(arrays)
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2 * epsilon)
        if arr.size:
            worst = max(worst, float(_relative_error(analytic, numeric).max()))
    return worst


def grad_check_params(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    n_samples: int | None = None,
    epsilon: float = 1e-5,
    rng: np.random.Generator | None = None,
) -> tuple[float, dict[str, float]]:
    """Gradient check over entries of named parameter tensors, perturbed in place.

    With ``n_samples`` set, that many entries per parameter are drawn at random;
    otherwise every entry is checked. Returns the overall maximum relative
    error and the per-parameter maxima.
    """
    rng = rng or np.random.default_rng(0)
    for p in params.values():
        p.grad = None
        p.requires_grad = True
    with Tape() as tape:
        out = loss_fn()
    if out.data.size != 1:
        raise ContractError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    tape.backward(out)
    per_param = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        analytic = (p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1)
        picks = np.arange(flat.size)
        if n_samples is not None and flat.size > n_samples:
            picks = rng.choice(flat.size, n_samples, replace=False)
        errs = []
        for i in picks:
            orig = flat[i]
            flat[i] = orig + epsilon
            up = float(loss_fn().data)
            flat[i] = orig - epsilon
            down = float(loss_fn().data)
            flat[i] = orig
            errs.append(float(_relative_error(np.array(analytic[i]), np.array((up - down) / (2 * epsilon)))))
        per_param[name] = max(errs) if errs else 0.0
    return max(per_param.values(), default=0.0), per_param
