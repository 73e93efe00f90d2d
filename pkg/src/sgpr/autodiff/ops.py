"""Differentiable primitives.

Every function accepts :class:`Tensor` or array-like inputs and returns a
:class:`Tensor`. Backward closures return one gradient per parent, already
reduced to the parent's shape.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import ContractError, ShapeError
from .tensor import Tensor, as_tensor, make_result, unbroadcast


def _broadcast_shape(a: Tensor, b: Tensor, name: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return make_result(
        a.data + b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return make_result(
        a.data - b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_result(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return make_result(
        a.data * b.data,
        (a, b),
        lambda g: (
            unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        ),
    )


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible") from None

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return make_result(out, (a, b), backward)


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise ShapeError(f"transpose: need at least 2 axes, got shape {a.shape}")
    return make_result(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return make_result(out, (a,), lambda g: (g.reshape(a.shape),))


def getitem(a, index) -> Tensor:
    """numpy indexing; repeated fancy indices accumulate their gradients."""
    a = as_tensor(a)
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return make_result(out, (a,), backward)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    ax = axis % ts[0].ndim
    ref = ts[0].shape
    for t in ts[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    sizes = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=ax))

    return make_result(np.concatenate([t.data for t in ts], axis=ax), ts, backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return make_result(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return make_result(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return make_result(out, (a,), lambda g: (g * out * (1.0 - out),))


def log(a) -> Tensor:
    a = as_tensor(a)
    return make_result(np.log(a.data), (a,), lambda g: (g / a.data,))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient is zero where the clamp is active."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return make_result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_result(out, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def _mask_for(x: Tensor, mask, axis: int, name: str) -> tuple[np.ndarray, int]:
    ax = axis % x.ndim
    m = np.asarray(mask, dtype=bool)
    if m.shape != x.shape[: ax + 1]:
        raise ShapeError(
            f"{name}: mask shape {m.shape} must equal leading shape {x.shape[: ax + 1]} of {x.shape}"
        )
    return m.reshape(m.shape + (1,) * (x.ndim - ax - 1)), ax


def masked_mean(x, mask, axis: int) -> Tensor:
    """Mean over ``axis`` counting only entries where ``mask`` is true.

    ``mask`` has the shape of ``x`` up to and including ``axis``. Every
    reduced slice needs at least one true entry.
    """
    x = as_tensor(x)
    m, ax = _mask_for(x, mask, axis, "masked_mean")
    count = m.sum(axis=ax, keepdims=True)
    if np.any(count == 0):
        raise ContractError("masked_mean: a reduced slice has no unmasked entries")
    total = np.where(m, x.data, 0.0).sum(axis=ax, keepdims=True)
    out = np.squeeze(total / count, axis=ax)

    def backward(g):
        return (np.where(m, np.expand_dims(g, ax) / count, 0.0),)

    return make_result(out, (x,), backward)


def masked_max(x, mask, axis: int) -> Tensor:
    """Max over ``axis`` ignoring masked-out entries.

    Fully masked slices yield 0 and pass no gradient. Ties send the gradient
    to the lowest index.
    """
    x = as_tensor(x)
    m, ax = _mask_for(x, mask, axis, "masked_max")
    filled = x.data if m.all() else np.where(m, x.data, -np.inf)
    best = filled.max(axis=ax, keepdims=True)
    empty = np.isneginf(best)
    out = np.squeeze(np.where(empty, 0.0, best), axis=ax)

    def backward(g):
        arg = np.argmax(filled, axis=ax)
        full = np.zeros_like(x.data)
        g = np.where(np.squeeze(empty, axis=ax), 0.0, g)
        np.put_along_axis(full, np.expand_dims(arg, ax), np.expand_dims(g, ax), axis=ax)
        return (full,)

    return make_result(out, (x,), backward)


def gather_rows(x, index) -> Tensor:
    """Per-batch row selection.

    ``x`` has shape ``(B, N, F)`` and ``index`` integer shape ``(B, ...)``
    with values in ``[0, N)``; the result has shape ``(B, ..., F)`` with
    ``out[b, ...] = x[b, index[b, ...]]``.
    """
    x = as_tensor(x)
    idx = np.asarray(index)
    if x.ndim != 3 or idx.ndim < 1 or idx.shape[0] != x.shape[0]:
        raise ShapeError(f"gather_rows: x {x.shape} and index {idx.shape} are incompatible")
    B, N, F = x.shape
    if idx.size and (idx.min() < 0 or idx.max() >= N):
        raise ShapeError(f"gather_rows: index out of range for {N} rows")
    offset = (np.arange(B) * N).reshape((B,) + (1,) * (idx.ndim - 1))
    flat = (idx + offset).reshape(-1)
    out = x.data.reshape(B * N, F)[flat].reshape(idx.shape + (F,))

    def backward(g):
        gx = np.zeros((B * N, F))
        np.add.at(gx, flat, g.reshape(-1, F))
        return (gx.reshape(B, N, F),)

    return make_result(out, (x,), backward)


def bilinear_form(e1, weight, e2) -> Tensor:
    """``e1ᵀ W e2`` per batch row, for one or several weight slices.

    ``e1`` is ``(B, D1)`` (or ``(D1,)``), ``e2`` is ``(B, D2)``; ``weight`` is
    ``(D1, D2)`` giving shape ``(B,)``, or ``(D1, D2, S)`` giving ``(B, S)``.
    """
    e1, w, e2 = as_tensor(e1), as_tensor(weight), as_tensor(e2)
    if w.ndim not in (2, 3):
        raise ShapeError(f"bilinear_form: weight must be 2-D or 3-D, got {w.shape}")
    if e1.shape[-1] != w.shape[0] or e2.shape[-1] != w.shape[1] or e1.shape[:-1] != e2.shape[:-1]:
        raise ShapeError(
            f"bilinear_form: e1 {e1.shape}, weight {w.shape}, e2 {e2.shape} are incompatible"
        )
    squeeze = w.ndim == 2
    W = w.data[..., None] if squeeze else w.data
    D1, D2, S = W.shape
    x1 = e1.data.reshape(-1, D1)
    x2 = e2.data.reshape(-1, D2)
    proj = (x1 @ W.reshape(D1, D2 * S)).reshape(-1, D2, S)
    out = np.einsum("bes,be->bs", proj, x2)
    lead = e1.shape[:-1]

    def backward(g):
        g = g.reshape(-1, S)
        ge1 = gw = ge2 = None
        outer = (x2[:, :, None] * g[:, None, :]).reshape(-1, D2 * S)
        if e1.requires_grad:
            ge1 = (outer @ W.reshape(D1, D2 * S).T).reshape(e1.shape)
        if w.requires_grad:
            gw = (x1.T @ outer).reshape(w.shape)
        if e2.requires_grad:
            ge2 = np.einsum("bes,bs->be", proj, g).reshape(e2.shape)
        return ge1, gw, ge2

    shape = lead if squeeze else lead + (S,)
    return make_result(out.reshape(shape), (e1, w, e2), backward)


def gather_max(x, index) -> Tensor:
    """``max_j x[b, index[b, n, j]]`` elementwise over the last index axis.

    Same value as ``masked_max(gather_rows(x, index), all_true, axis=2)``
    without materialising the ``(B, N, k, F)`` intermediate. Ties send the
    gradient to the first neighbour slot holding the max.
    """
    x = as_tensor(x)
    idx = np.asarray(index)
    if x.ndim != 3 or idx.ndim != 3 or idx.shape[0] != x.shape[0] or idx.shape[2] < 1:
        raise ShapeError(f"gather_max: x {x.shape} and index {idx.shape} are incompatible")
    B, N, F = x.shape
    if idx.size and (idx.min() < 0 or idx.max() >= N):
        raise ShapeError(f"gather_max: index out of range for {N} rows")
    flat_x = x.data.reshape(B * N, F)
    rows = (idx + (np.arange(B) * N)[:, None, None]).reshape(-1, idx.shape[2])
    best = flat_x[rows[:, 0]].copy()
    for j in range(1, rows.shape[1]):
        np.maximum(best, flat_x[rows[:, j]], out=best)
    out = best.reshape(idx.shape[:2] + (F,))

    def backward(g):
        # recover the first slot attaining the max, scanning slots in reverse
        arg = np.empty(best.shape, dtype=np.intp)
        arg[...] = rows[:, -1:]
        hit = np.empty(best.shape, dtype=bool)
        for j in range(rows.shape[1] - 2, -1, -1):
            np.equal(flat_x[rows[:, j]], best, out=hit)
            np.copyto(arg, rows[:, j:j + 1], where=hit)
        pos = (arg * F + np.arange(F)).reshape(-1)
        gx = np.bincount(pos, weights=g.reshape(-1), minlength=B * N * F)
        return (gx.reshape(B, N, F),)

    return make_result(out, (x,), backward)
