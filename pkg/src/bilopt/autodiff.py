"""Tape-based reverse-mode automatic differentiation on numpy arrays.

Every primitive records a node on the active :class:`Tape`.  Reverse rules are
written in terms of the same primitives, so when the tape is opened with
``retain_for_higher_order=True`` a backward pass records differentiable nodes
of its own and gradients can be differentiated again (Hessian-vector
products, mixed partials).

All values are float64.  Every op output is checked for non-finite entries.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "TapeError",
    "tensor",
    "constant",
    "no_record",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "matmul",
    "transpose",
    "reshape",
    "broadcast_to",
    "sum",
    "mean",
    "gather",
    "scatter_add",
    "segment_mean",
    "concat",
    "tanh",
    "exp",
    "log",
    "softmax",
    "log_softmax",
    "pick",
    "contract_last",
    "straight_through_select",
    "grad",
    "backward",
    "hvp",
    "mixed_second_derivative",
    "flatten",
    "unflatten",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for a primitive."""


class NonFiniteError(FloatingPointError):
    """A NaN or infinity appeared at an op boundary."""


class TapeError(RuntimeError):
    """Differentiation requested without the tape state it needs."""


_local = threading.local()


def _tapes() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
        _local.recording = True
    return _local.tapes


def _active_tape() -> "Tape | None":
    tapes = _tapes()
    if tapes and _local.recording:
        return tapes[-1]
    return None


@contextmanager
def no_record():
    """Suspend recording on the current thread's tape."""
    _tapes()
    prev = _local.recording
    _local.recording = False
    try:
        yield
    finally:
        _local.recording = prev


class Node:
    __slots__ = ("op", "inputs", "output", "backward", "index")

    def __init__(self, op, inputs, output, backward, index):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward
        self.index = index


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager.  Nodes are appended in execution order, so the
    list is always topologically sorted.
    """

    def __init__(self, retain_for_higher_order: bool = False):
        self.nodes: list[Node] = []
        self.retain_for_higher_order = retain_for_higher_order

    def __enter__(self) -> "Tape":
        _tapes().append(self)
        return self

    def __exit__(self, *exc) -> None:
        tapes = _tapes()
        if not tapes or tapes[-1] is not self:
            raise TapeError("tapes must be exited in LIFO order")
        tapes.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def _record(self, op, inputs, output, backward) -> Node:
        node = Node(op, inputs, output, backward, len(self.nodes))
        self.nodes.append(node)
        return node


class Tensor:
    """Dense float64 array that participates in the active tape."""

    __slots__ = ("data", "requires_grad", "node", "tape", "grad", "name", "__weakref__")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite value in tensor input {name or ''}".strip())
        self.data = arr
        self.requires_grad = requires_grad
        self.node = None
        self.tape = None
        self.grad = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)
    __pow__ = lambda self, p: power(self, p)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None) -> "Tensor":
        return mean(self, axis=axis)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def constant(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite output from {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.node = None
    out.tape = None
    out.grad = None
    out.name = None
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.tape = tape
        out.node = tape._record(op, tuple(inputs), out, backward)
    return out


def _unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    axes = tuple(range(extra)) + tuple(
        i + extra for i, n in enumerate(shape) if n == 1 and g.shape[i + extra] != 1
    )
    if axes:
        g = sum(g, axis=axes, keepdims=True)
    return reshape(g, shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ----------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _check_broadcast("add", a, b)

    def bw(g, need):
        return (
            _unbroadcast(g, a.shape) if need[0] else None,
            _unbroadcast(g, b.shape) if need[1] else None,
        )

    return _result("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _check_broadcast("sub", a, b)

    def bw(g, need):
        return (
            _unbroadcast(g, a.shape) if need[0] else None,
            _unbroadcast(neg(g), b.shape) if need[1] else None,
        )

    return _result("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _check_broadcast("mul", a, b)

    def bw(g, need):
        return (
            _unbroadcast(mul(g, b), a.shape) if need[0] else None,
            _unbroadcast(mul(g, a), b.shape) if need[1] else None,
        )

    return _result("mul", a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _check_broadcast("div", a, b)
    if np.any(b.data == 0):
        raise NonFiniteError("div: zero denominator")

    def bw(g, need):
        ga = _unbroadcast(div(g, b), a.shape) if need[0] else None
        gb = None
        if need[1]:
            gb = _unbroadcast(neg(div(mul(g, a), mul(b, b))), b.shape)
        return ga, gb

    return _result("div", a.data / b.data, (a, b), bw)


def neg(a) -> Tensor:
    a = constant(a)
    return _result("neg", -a.data, (a,), lambda g, need: (neg(g),))


def power(a, p: float) -> Tensor:
    """Elementwise ``a ** p`` for a constant real exponent."""
    a = constant(a)
    p = float(p)

    def bw(g, need):
        if p == 1.0:
            return (g,)
        return (mul(g, mul(p, power(a, p - 1.0))),)

    return _result("power", a.data**p, (a,), bw)


def tanh(a) -> Tensor:
    a = constant(a)
    out_data = np.tanh(a.data)
    holder = []

    def bw(g, need):
        out = holder[0]
        return (mul(g, sub(1.0, mul(out, out))),)

    out = _result("tanh", out_data, (a,), bw)
    holder.append(out)
    return out


def exp(a) -> Tensor:
    a = constant(a)
    holder = []

    def bw(g, need):
        return (mul(g, holder[0]),)

    with np.errstate(over="ignore"):
        data = np.exp(a.data)
    out = _result("exp", data, (a,), bw)
    holder.append(out)
    return out


def log(a) -> Tensor:
    a = constant(a)
    if np.any(a.data <= 0):
        raise NonFiniteError("log: non-positive input")
    return _result("log", np.log(a.data), (a,), lambda g, need: (div(g, a),))


# ----------------------------------------------------------------- shape ops


def reshape(a, shape) -> Tensor:
    a = constant(a)
    shape = tuple(int(s) for s in shape)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from None
    return _result("reshape", data, (a,), lambda g, need: (reshape(g, a.shape),))


def transpose(a) -> Tensor:
    a = constant(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return _result("transpose", a.data.T.copy(), (a,), lambda g, need: (transpose(g),))


def broadcast_to(a, shape) -> Tensor:
    a = constant(a)
    shape = tuple(shape)
    try:
        data = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: {a.shape} -> {shape}") from None
    return _result("broadcast_to", data, (a,), lambda g, need: (_unbroadcast(g, a.shape),))


def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = constant(a)
    axes = _norm_axes(axis, a.ndim)
    data = np.sum(a.data, axis=axes, keepdims=keepdims)
    kept = tuple(1 if i in axes else n for i, n in enumerate(a.shape))

    def bw(g, need):
        return (broadcast_to(reshape(g, kept), a.shape),)

    return _result("sum", np.asarray(data, dtype=np.float64), (a,), bw)


def mean(a, axis=None) -> Tensor:
    """Mean over ``axis``.

    The forward value sums each reduced slice in sorted order, so it does not
    depend on the order of the reduced elements.
    """
    a = constant(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    if count == 0:
        raise ShapeError(f"mean: empty reduction over shape {a.shape}")
    moved = np.moveaxis(a.data, axes, tuple(range(len(axes))))
    flat = moved.reshape((count,) + moved.shape[len(axes):])
    data = np.sort(flat, axis=0).sum(axis=0) / count
    kept = tuple(1 if i in axes else n for i, n in enumerate(a.shape))

    def bw(g, need):
        return (broadcast_to(reshape(div(g, float(count)), kept), a.shape),)

    return _result("mean", np.asarray(data, dtype=np.float64), (a,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [constant(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no operands")
    ndim = ts[0].ndim
    ax = axis % ndim
    for t in ts:
        other = [n for i, n in enumerate(t.shape) if i != ax]
        ref = [n for i, n in enumerate(ts[0].shape) if i != ax]
        if t.ndim != ndim or other != ref:
            raise ShapeError(f"concat: shapes {[t.shape for t in ts]} differ off axis {axis}")
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def bw(g, need):
        out = []
        for i, t in enumerate(ts):
            if not need[i]:
                out.append(None)
                continue
            out.append(_slice(g, ax, int(bounds[i]), int(bounds[i + 1])))
        return tuple(out)

    return _result("concat", np.concatenate([t.data for t in ts], axis=ax), ts, bw)


def _slice(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape = a.shape

    def bw(g, need):
        return (_pad(g, axis, start, stop, shape),)

    return _result("slice", a.data[idx].copy(), (a,), bw)


def _pad(g: Tensor, axis: int, start: int, stop: int, shape) -> Tensor:
    idx = [slice(None)] * len(shape)
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    data = np.zeros(shape)
    data[idx] = g.data

    def bw(gg, need):
        return (_slice(gg, axis, start, stop),)

    return _result("pad", data, (g,), bw)


# ----------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product for 1-D/2-D operands (vectors are promoted and squeezed)."""
    a, b = constant(a), constant(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError(f"matmul: operands must be 1-D or 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} @ {b.shape}")
    if a.ndim == 1 or b.ndim == 1:
        a2 = reshape(a, (1, -1)) if a.ndim == 1 else a
        b2 = reshape(b, (-1, 1)) if b.ndim == 1 else b
        out_shape = np.matmul(a.data, b.data).shape
        return reshape(_matmul2d(a2, b2), out_shape)
    return _matmul2d(a, b)


def _matmul2d(a: Tensor, b: Tensor) -> Tensor:
    def bw(g, need):
        return (
            _matmul2d(g, transpose(b)) if need[0] else None,
            _matmul2d(transpose(a), g) if need[1] else None,
        )

    return _result("matmul", a.data @ b.data, (a, b), bw)


def contract_last(a, b) -> Tensor:
    """Contract the last axis of ``a`` against the last axis of ``b``.

    ``a`` has shape ``(*s, k)``; ``b`` is ``(k,)`` or ``(B, k)``.  The result is
    ``s`` or ``(B, *s)`` respectively.
    """
    a, b = constant(a), constant(b)
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"contract_last: last axes differ for {a.shape} and {b.shape}")
    lead = a.shape[:-1]
    a2 = reshape(a, (-1, a.shape[-1]))
    if b.ndim == 1:
        return reshape(matmul(a2, b), lead)
    if b.ndim != 2:
        raise ShapeError(f"contract_last: b must be 1-D or 2-D, got {b.shape}")
    out = transpose(matmul(a2, transpose(b)))
    return reshape(out, (b.shape[0],) + lead)


# ----------------------------------------------------------------- indexing


def gather(table, idx) -> Tensor:
    """Row lookup ``table[idx]`` along axis 0 (embedding lookup)."""
    table = constant(table)
    idx = np.asarray(idx, dtype=np.int64)
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather: index out of range for table with {n} rows")

    def bw(g, need):
        return (scatter_add(g, idx, n),)

    return _result("gather", table.data[idx], (table,), bw)


def scatter_add(src, idx, n: int) -> Tensor:
    """Adjoint of :func:`gather`: sum rows of ``src`` into ``n`` output rows."""
    src = constant(src)
    idx = np.asarray(idx, dtype=np.int64)
    tail = src.shape[idx.ndim:]
    if src.shape[: idx.ndim] != idx.shape:
        raise ShapeError(f"scatter_add: src {src.shape} does not match index {idx.shape}")
    data = np.zeros((n,) + tail)
    np.add.at(data, idx, src.data)

    def bw(g, need):
        return (gather(g, idx),)

    return _result("scatter_add", data, (src,), bw)


def segment_mean(rows, seg, n: int) -> Tensor:
    """Per-segment mean of ``rows`` (shape ``(R, d)``) grouped by ``seg``.

    Each segment is summed in sorted order so the result is independent of the
    order of rows within a segment.
    """
    rows = constant(rows)
    seg = np.asarray(seg, dtype=np.int64)
    if rows.ndim != 2 or seg.shape != (rows.shape[0],):
        raise ShapeError(f"segment_mean: rows {rows.shape} vs segments {seg.shape}")
    counts = np.bincount(seg, minlength=n).astype(np.float64)
    if np.any(counts == 0):
        raise ShapeError("segment_mean: empty segment")
    order = np.argsort(seg, kind="stable")
    sorted_seg = seg[order]
    starts = np.searchsorted(sorted_seg, np.arange(n))
    data = np.empty((n, rows.shape[1]))
    block = rows.data[order]
    for i in range(n):
        lo = starts[i]
        hi = lo + int(counts[i])
        data[i] = np.sort(block[lo:hi], axis=0).sum(axis=0)
    data /= counts[:, None]
    inv = Tensor(1.0 / counts[:, None])

    def bw(g, need):
        return (gather(mul(g, inv), seg),)

    return _result("segment_mean", data, (rows,), bw)


def pick(x, idx) -> Tensor:
    """Select ``x[i, idx[i]]`` for each row of a matrix."""
    x = constant(x)
    idx = np.asarray(idx, dtype=np.int64)
    if x.ndim != 2 or idx.shape != (x.shape[0],):
        raise ShapeError(f"pick: x {x.shape} vs index {idx.shape}")
    flat = np.arange(x.shape[0]) * x.shape[1] + idx
    return gather(reshape(x, (-1,)), flat)


# ----------------------------------------------------------------- normalizers


def softmax(a, axis: int = -1) -> Tensor:
    a = constant(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    holder = []

    def bw(g, need):
        s = holder[0]
        inner = sum(mul(g, s), axis=axis, keepdims=True)
        return (mul(s, sub(g, inner)),)

    out = _result("softmax", e / e.sum(axis=axis, keepdims=True), (a,), bw)
    holder.append(out)
    return out


def log_softmax(a, axis: int = -1) -> Tensor:
    a = constant(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    data = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    holder = []

    def bw(g, need):
        s = exp(holder[0])
        return (sub(g, mul(s, sum(g, axis=axis, keepdims=True))),)

    out = _result("log_softmax", data, (a,), bw)
    holder.append(out)
    return out


# ----------------------------------------------------------------- straight-through


def straight_through_select(probs, candidates) -> Tensor:
    """Hard argmax selection with a soft-mixture backward pass.

    ``probs`` has shape ``(..., N)`` and ``candidates`` ``(..., N, l, d)``.  The
    forward value is the candidate block at ``argmax(probs)`` (lowest index on
    ties), copied bit-for-bit.  The backward pass differentiates
    ``sum_j probs_j * candidates_j`` instead.
    """
    probs, candidates = constant(probs), constant(candidates)
    if probs.shape[-1] == 0:
        raise ValueError("straight_through_select: empty candidate set")
    if candidates.ndim != probs.ndim + 2 or candidates.shape[: probs.ndim] != probs.shape:
        raise ShapeError(
            f"straight_through_select: probs {probs.shape} vs candidates {candidates.shape}"
        )
    if np.any(probs.data < 0) or not np.allclose(probs.data.sum(axis=-1), 1.0, rtol=0, atol=1e-9):
        raise ValueError("straight_through_select: probs must lie on the simplex")
    choice = np.argmax(probs.data, axis=-1)
    data = np.take_along_axis(
        candidates.data, choice[..., None, None, None], axis=probs.ndim - 1
    ).squeeze(probs.ndim - 1)
    n = probs.shape[-1]

    def bw(g, need):
        g_exp = reshape(g, g.shape[:-2] + (1,) + g.shape[-2:])
        gp = sum(mul(candidates, g_exp), axis=(-2, -1)) if need[0] else None
        gc = None
        if need[1]:
            p_exp = reshape(probs, probs.shape + (1, 1))
            gc = mul(p_exp, broadcast_to(g_exp, g.shape[:-2] + (n,) + g.shape[-2:]))
        return gp, gc

    return _result("straight_through_select", data.copy(), (probs, candidates), bw)


# ----------------------------------------------------------------- differentiation


def grad(
    loss: Tensor,
    wrt: Sequence[Tensor],
    create_graph: bool = False,
    seed: Tensor | None = None,
) -> list[Tensor]:
    """Gradients of ``loss`` with respect to each tensor in ``wrt``.

    Tensors that ``loss`` does not depend on get a zero gradient.  With
    ``create_graph`` the backward computation is itself recorded so the
    returned gradients can be differentiated again; this needs a tape opened
    with ``retain_for_higher_order=True``.
    """
    if seed is None and loss.size != 1:
        raise ShapeError(f"grad: loss must be scalar, got shape {loss.shape}")
    zeros = [Tensor(np.zeros(w.shape)) for w in wrt]
    if loss.node is None:
        return zeros
    tape = loss.tape
    if create_graph and not tape.retain_for_higher_order:
        raise TapeError("create_graph requires a tape with retain_for_higher_order=True")
    grads: dict[int, Tensor] = {id(loss): seed if seed is not None else Tensor(np.ones(loss.shape))}

    def run():
        for node in reversed(tape.nodes[: loss.node.index + 1]):
            g = grads.get(id(node.output))
            if g is None:
                continue
            need = tuple(t.requires_grad for t in node.inputs)
            parts = node.backward(g, need)
            for t, gi, nd in zip(node.inputs, parts, need):
                if not nd or gi is None:
                    continue
                prev = grads.get(id(t))
                grads[id(t)] = gi if prev is None else add(prev, gi)

    if create_graph:
        prev = [_local.recording]
        tapes = _tapes()
        tapes.append(tape)
        _local.recording = True
        try:
            run()
        finally:
            tapes.pop()
            _local.recording = prev[0]
    else:
        with no_record():
            run()
    return [grads.get(id(w), z) for w, z in zip(wrt, zeros)]


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, Tensor]:
    """Populate ``.grad`` on leaves and return a map leaf -> gradient.

    Without ``wrt`` every requires-grad leaf recorded before ``loss`` is
    included.  Existing ``.grad`` values are accumulated into.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if wrt is None:
        leaves: dict[int, Tensor] = {}
        if loss.node is not None:
            for node in loss.tape.nodes[: loss.node.index + 1]:
                for t in node.inputs:
                    if t.requires_grad and t.node is None:
                        leaves[id(t)] = t
        wrt = list(leaves.values())
    else:
        wrt = list(wrt)
    gs = grad(loss, wrt)
    out = {}
    for w, g in zip(wrt, gs):
        w.grad = g.data.copy() if w.grad is None else w.grad + g.data
        out[w] = g
    return out


def _dot_all(xs: Sequence[Tensor], vs: Sequence[np.ndarray]) -> Tensor:
    total = None
    for x, v in zip(xs, vs):
        term = sum(mul(x, Tensor(v)))
        total = term if total is None else add(total, term)
    return total


def _as_parts(v, like: Sequence[Tensor]) -> list[np.ndarray]:
    if isinstance(v, (list, tuple)):
        if len(v) != len(like):
            raise ShapeError(f"expected {len(like)} vector parts, got {len(v)}")
        return [np.asarray(x, dtype=np.float64).reshape(t.shape) for x, t in zip(v, like)]
    return unflatten(np.asarray(v, dtype=np.float64).reshape(-1), like)


def _require_retained(loss: Tensor) -> None:
    if loss.tape is not None and not loss.tape.retain_for_higher_order:
        raise TapeError("second-order derivatives need retain_for_higher_order=True")
    if loss.tape is None:
        active = _active_tape()
        if active is None or not active.retain_for_higher_order:
            raise TapeError("second-order derivatives need retain_for_higher_order=True")


def hvp(
    loss: Tensor,
    wrt: Sequence[Tensor],
    v: Sequence[np.ndarray] | np.ndarray,
    first: Sequence[Tensor] | None = None,
) -> list[np.ndarray]:
    """Hessian-vector product ``(d2 loss / d wrt2) v`` by reverse-over-reverse.

    ``v`` is a flat vector or one array per tensor in ``wrt``.  Passing the
    already-built differentiable gradient as ``first`` avoids rebuilding it.
    """
    _require_retained(loss)
    vs = _as_parts(v, wrt)
    if first is None:
        first = grad(loss, wrt, create_graph=True)
    s = _dot_all(first, vs)
    if s.node is None:
        return [np.zeros(w.shape) for w in wrt]
    return [g.data for g in grad(s, wrt)]


def mixed_second_derivative(
    loss: Tensor,
    first: Sequence[Tensor],
    second: Sequence[Tensor],
    v: Sequence[np.ndarray] | np.ndarray,
    first_grads: Sequence[Tensor] | None = None,
) -> list[np.ndarray]:
    """``v^T (d2 loss / d first d second)``: gradient w.r.t. ``second`` of ``grad_first(loss) . v``."""
    _require_retained(loss)
    vs = _as_parts(v, first)
    if first_grads is None:
        first_grads = grad(loss, first, create_graph=True)
    s = _dot_all(first_grads, vs)
    if s.node is None:
        return [np.zeros(w.shape) for w in second]
    return [g.data for g in grad(s, second)]


def flatten(arrays: Sequence) -> np.ndarray:
    parts = [a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64) for a in arrays]
    if not parts:
        return np.zeros(0)
    return np.concatenate([p.reshape(-1) for p in parts])


def unflatten(vec: np.ndarray, like: Sequence) -> list[np.ndarray]:
    sizes = [int(np.prod(t.shape)) if t.shape else 1 for t in like]
    total = int(np.sum(sizes, dtype=np.int64))
    if total != len(vec):
        raise ShapeError(f"unflatten: vector of length {len(vec)} does not match {total} entries")
    out = []
    pos = 0
    for t, n in zip(like, sizes):
        out.append(np.asarray(vec[pos : pos + n], dtype=np.float64).reshape(t.shape))
        pos += n
    return out
