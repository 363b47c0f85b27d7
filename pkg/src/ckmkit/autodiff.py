"""Reverse-mode automatic differentiation over float64 numpy arrays.

A minimal tape: each Tensor remembers its parents and a closure that
accumulates gradients into them. Only the operations the gain estimator
needs are provided. Constants (needs_grad=False) terminate the tape, so
large input matrices cost nothing at backward time.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "needs_grad", "_parents", "_backward")

    def __init__(self, data, needs_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.needs_grad = needs_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, needs_grad={self.needs_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents, backward_fn) -> Tensor:
    out = Tensor(data, needs_grad=any(p.needs_grad for p in parents))
    if out.needs_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.needs_grad:
        return
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a gradient back to the shape it was broadcast from."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data @ b.data

    def backward(out):
        _accum(a, out.grad @ b.data.T)
        _accum(b, a.data.T @ out.grad)

    out = _make(out_data, (a, b), None)
    out._backward = lambda: backward(out)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(out):
        _accum(a, _unbroadcast(out.grad, a.data.shape))
        _accum(b, _unbroadcast(out.grad, b.data.shape))

    out = _make(out_data, (a, b), None)
    out._backward = lambda: backward(out)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def backward(out):
        _accum(a, _unbroadcast(out.grad, a.data.shape))
        _accum(b, -_unbroadcast(out.grad, b.data.shape))

    out = _make(out_data, (a, b), None)
    out._backward = lambda: backward(out)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(out):
        _accum(a, _unbroadcast(out.grad * b.data, a.data.shape))
        _accum(b, _unbroadcast(out.grad * a.data, b.data.shape))

    out = _make(out_data, (a, b), None)
    out._backward = lambda: backward(out)
    return out


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out_data = np.maximum(a.data, 0.0)

    def backward(out):
        _accum(a, out.grad * (a.data > 0.0))

    out = _make(out_data, (a,), None)
    out._backward = lambda: backward(out)
    return out


def gather_rows(a: Tensor, idx) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    out_data = a.data[idx]

    def backward(out):
        if a.needs_grad:
            g = np.zeros_like(a.data)
            np.add.at(g, idx, out.grad)
            _accum(a, g)

    out = _make(out_data, (a,), None)
    out._backward = lambda: backward(out)
    return out


def concat_rows(tensors) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=0)
    sizes = [t.data.shape[0] for t in tensors]

    def backward(out):
        off = 0
        for t, n in zip(tensors, sizes):
            _accum(t, out.grad[off : off + n])
            off += n

    out = _make(out_data, tensors, None)
    out._backward = lambda: backward(out)
    return out


def concat_cols(tensors) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=1)
    widths = [t.data.shape[1] for t in tensors]

    def backward(out):
        off = 0
        for t, w in zip(tensors, widths):
            _accum(t, out.grad[:, off : off + w])
            off += w

    out = _make(out_data, tensors, None)
    out._backward = lambda: backward(out)
    return out


def segment_max(a: Tensor, starts) -> Tensor:
    """Per-column max over contiguous non-empty row segments.

    starts holds each segment's first row; segment i spans
    [starts[i], starts[i+1]) and the last runs to the end. Gradients route
    to the first row attaining the max in each segment (deterministic under
    ties regardless of accumulation order).
    """
    a = as_tensor(a)
    starts = np.asarray(starts, dtype=np.int64)
    m = a.data.shape[0]
    if starts.size == 0 or m == 0:
        raise ValueError("segment_max needs at least one non-empty segment")
    if starts[0] != 0 or np.any(np.diff(starts) <= 0) or starts[-1] >= m:
        raise ValueError("segments must be non-empty, contiguous, and start at 0")
    out_data = np.maximum.reduceat(a.data, starts, axis=0)

    def backward(out):
        if not a.needs_grad:
            return
        lens = np.diff(np.concatenate([starts, [m]]))
        seg_ids = np.repeat(np.arange(len(starts)), lens)
        is_max = a.data == out_data[seg_ids]
        rows = np.where(is_max, np.arange(m)[:, None], m)
        first = np.minimum.reduceat(rows, starts, axis=0)
        g = np.zeros_like(a.data)
        cols = np.broadcast_to(np.arange(a.data.shape[1]), first.shape)
        np.add.at(g, (first, cols), out.grad)
        _accum(a, g)

    out = _make(out_data, (a,), None)
    out._backward = lambda: backward(out)
    return out


def sum_all(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out_data = np.array(a.data.sum())

    def backward(out):
        _accum(a, np.full_like(a.data, float(out.grad)))

    out = _make(out_data, (a,), None)
    out._backward = lambda: backward(out)
    return out


def mean_all(a: Tensor) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    out_data = np.array(a.data.mean())

    def backward(out):
        _accum(a, np.full_like(a.data, float(out.grad) / n))

    out = _make(out_data, (a,), None)
    out._backward = lambda: backward(out)
    return out


def backward(out: Tensor) -> None:
    """Backpropagate from a scalar tensor through the tape."""
    if out.data.size != 1:
        raise ValueError("backward expects a scalar tensor")
    if not out.needs_grad:
        return
    topo = []
    visited = set()
    stack = [(out, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited or not node.needs_grad:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    out.grad = np.ones_like(out.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward()
