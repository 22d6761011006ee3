"""Minimal reverse-mode autodiff over numpy arrays.

A Tensor wraps a float64 ndarray plus the closure that routes its output
gradient to its parents. Graphs are built eagerly by the op functions below
and torn down by backward(); there is no tape object. Ops cover exactly what
the descriptor network and losses need — dense affine maps, gathers,
reductions, softmax-family nonlinearities and L2 geometry.

Conventions:
  * all op outputs are float64, C-contiguous where it matters;
  * gradients accumulate (+=) into .grad, supporting shared subgraphs;
  * broadcasting in add/sub/mul/div follows numpy; gradients are summed
    back down to each parent's shape.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from poco.diagnostics import DIAGNOSTICS
from poco.errors import ContractViolation

Array = np.ndarray


class Tensor:
    """Node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data: Array = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[Array], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Constant view of this tensor's value (shares the buffer)."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; the functional forms below are the real API.
    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, as_tensor(other))

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __neg__(self):
        return mul(self, as_tensor(-1.0))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: Array, parents: tuple[Tensor, ...], backward: Callable[[Array], None]) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _accum(t: Tensor, g: Array, own: bool = False) -> None:
    """Add g into t.grad. own=True promises g is a fresh writable array the
    caller will not reuse, letting the first accumulation adopt it copy-free."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g if own else np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ContractViolation(msg)


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def bwd(g: Array) -> None:
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def bwd(g: Array) -> None:
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def bwd(g: Array) -> None:
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape), own=True)
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape), own=True)

    return _make(data, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data

    def bwd(g: Array) -> None:
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.data.shape), own=True)
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape), own=True)

    return _make(data, (a, b), bwd)


def _mm(x: Array, y: Array) -> Array:
    """Stacked matmul; outer products (contracted extent 1) go through a
    broadcast multiply, which beats looped tiny GEMMs."""
    if x.shape[-1] == 1 and y.shape[-2] == 1:
        return x * y
    return np.matmul(x, y)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; operands of ndim > 2 are treated as stacks of matrices
    (numpy matmul broadcasting over the leading dimensions)."""
    _check(a.ndim >= 2 and b.ndim >= 2, f"matmul expects >=2-D operands, got {a.shape} @ {b.shape}")
    _check(a.shape[-1] == b.shape[-2], f"matmul inner dims differ: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def bwd(g: Array) -> None:
        if a.requires_grad:
            ga = _mm(g, b.data.swapaxes(-1, -2))
            _accum(a, _unbroadcast(ga, a.data.shape), own=True)
        if b.requires_grad:
            gb = _mm(a.data.swapaxes(-1, -2), g)
            _accum(b, _unbroadcast(gb, b.data.shape), own=True)

    return _make(data, (a, b), bwd)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused x @ w + b for 2-D x (n, d_in), w (d_in, d_out), bias b (d_out,)."""
    _check(x.ndim == 2 and w.ndim == 2 and b.ndim == 1,
           f"affine expects (n,d_in) @ (d_in,d_out) + (d_out,), got {x.shape}, {w.shape}, {b.shape}")
    _check(x.shape[1] == w.shape[0] and w.shape[1] == b.shape[0],
           f"affine dims differ: {x.shape} @ {w.shape} + {b.shape}")
    data = x.data @ w.data + b.data

    def bwd(g: Array) -> None:
        if x.requires_grad:
            _accum(x, g @ w.data.T, own=True)
        if w.requires_grad:
            _accum(w, x.data.T @ g, own=True)
        if b.requires_grad:
            _accum(b, g.sum(axis=0), own=True)

    return _make(data, (x, w, b), bwd)


def transpose(t: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    data = np.transpose(t.data, axes)
    if axes is None:
        inv: tuple[int, ...] | None = None
    else:
        inv = tuple(int(i) for i in np.argsort(axes))

    def bwd(g: Array) -> None:
        _accum(t, np.transpose(g, inv))

    return _make(data, (t,), bwd)


# ---------------------------------------------------------------------------
# shape ops


def reshape(t: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    data = t.data.reshape(shape)

    def bwd(g: Array) -> None:
        _accum(t, g.reshape(t.data.shape))

    return _make(data, (t,), bwd)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    _check(len(parts) > 0, "concat of zero tensors")
    parts = [as_tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g: Array) -> None:
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(int(lo), int(hi))
                _accum(p, g[tuple(idx)])

    return _make(data, tuple(parts), bwd)


def slice_axis(t: Tensor, axis: int, start: int, stop: int) -> Tensor:
    n = t.data.shape[axis]
    _check(0 <= start <= stop <= n, f"slice [{start}:{stop}] out of range for axis {axis} of {t.shape}")
    sel = [slice(None)] * t.ndim
    sel[axis] = slice(start, stop)
    data = t.data[tuple(sel)]

    def bwd(g: Array) -> None:
        full = np.zeros_like(t.data)
        full[tuple(sel)] = g
        _accum(t, full, own=True)

    return _make(data, (t,), bwd)


class ScatterSpec:
    """Precomputed flat bincount targets for the backward of gather_rows.

    Gathers inside the network reuse the same index arrays every step (they
    come from per-frame plans), so the expanded element-index array can be
    built once via make_scatter and passed back in.
    """

    __slots__ = ("rows", "width", "targets")

    def __init__(self, rows: int, width: int, targets: Array):
        self.rows = rows
        self.width = width
        self.targets = targets


def make_scatter(idx, rows: int, width: int) -> ScatterSpec:
    flat = np.asarray(idx, dtype=np.int64).ravel()
    targets = (flat[:, None] * width + np.arange(width, dtype=np.int64)).ravel()
    return ScatterSpec(rows, width, targets)


def gather_rows(t: Tensor, idx, scatter: ScatterSpec | None = None) -> Tensor:
    """out[..., :] = t[idx[...], :] for integer index array idx.

    t is (n, ...); idx may have any shape; result is idx.shape + t.shape[1:].
    The backward is a scatter-add implemented as one flat bincount (much
    faster than np.add.at for duplicate-heavy indexes); `scatter` optionally
    supplies its precomputed targets (see make_scatter).
    """
    idx = np.asarray(idx)
    _check(np.issubdtype(idx.dtype, np.integer), "gather_rows index must be integer")
    n = t.data.shape[0]
    _check(idx.size == 0 or (idx.min() >= 0 and idx.max() < n),
           f"gather_rows index out of range for {n} rows")
    data = t.data[idx]
    shape = t.data.shape
    width = int(np.prod(shape[1:], dtype=np.int64)) if len(shape) > 1 else 1
    if scatter is not None and (scatter.rows != n or scatter.width != width):
        scatter = None  # stale spec: fall back to on-the-fly targets
    idx_flat = idx.astype(np.int64).ravel()

    def bwd(g: Array) -> None:
        spec = scatter if scatter is not None else make_scatter(idx_flat, n, width)
        acc = np.bincount(spec.targets, weights=g.ravel(), minlength=n * width)
        _accum(t, acc.reshape(shape), own=True)

    return _make(data, (t,), bwd)


# ---------------------------------------------------------------------------
# reductions


def tsum(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = t.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g: Array) -> None:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(t, np.broadcast_to(g, t.data.shape))

    return _make(data, (t,), bwd)


def tmean(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = t.data.size if axis is None else t.data.shape[axis] if isinstance(axis, int) else int(
        np.prod([t.data.shape[a] for a in axis]))
    data = t.data.mean(axis=axis, keepdims=keepdims)

    def bwd(g: Array) -> None:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(t, np.broadcast_to(g, t.data.shape) / count, own=True)

    return _make(data, (t,), bwd)


# ---------------------------------------------------------------------------
# nonlinearities


def clamp_min(t: Tensor, floor: float) -> Tensor:
    data = np.maximum(t.data, floor)
    mask = t.data > floor

    def bwd(g: Array) -> None:
        _accum(t, g * mask, own=True)

    return _make(data, (t,), bwd)


def _sigmoid_values(x: Array) -> Array:
    # Stable: never exponentiates a large positive value.
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(t: Tensor) -> Tensor:
    data = _sigmoid_values(t.data)

    def bwd(g: Array) -> None:
        _accum(t, g * data * (1.0 - data), own=True)

    return _make(data, (t,), bwd)


def softplus(t: Tensor) -> Tensor:
    data = np.logaddexp(0.0, t.data)

    def bwd(g: Array) -> None:
        _accum(t, g * _sigmoid_values(t.data), own=True)

    return _make(data, (t,), bwd)


def logsumexp(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = t.data
    xmax = np.max(x, axis=axis, keepdims=True)
    xmax = np.where(np.isfinite(xmax), xmax, 0.0)
    ex = np.exp(x - xmax)
    sums = ex.sum(axis=axis, keepdims=True)
    out = np.log(sums) + xmax
    soft = ex / sums  # softmax, reused for the gradient
    data = out if keepdims or axis is None else np.squeeze(out, axis=axis)
    if axis is None and not keepdims:
        data = out.reshape(())

    def bwd(g: Array) -> None:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(t, g * soft, own=True)

    return _make(data, (t,), bwd)


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    x = t.data
    ex = np.exp(x - np.max(x, axis=axis, keepdims=True))
    data = ex / ex.sum(axis=axis, keepdims=True)

    def bwd(g: Array) -> None:
        dot = (g * data).sum(axis=axis, keepdims=True)
        _accum(t, data * (g - dot), own=True)

    return _make(data, (t,), bwd)


def l2_normalize(t: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    x = t.data
    norms = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    floored = norms < eps
    if floored.any():
        DIAGNOSTICS.incr("autodiff.l2_normalize_zero", int(floored.sum()))
    denom = np.where(floored, eps, norms)
    data = x / denom

    def bwd(g: Array) -> None:
        # d(x/||x||)/dx = (I - y y^T)/||x||; on the floored branch the denom
        # is the constant eps so the Jacobian is just 1/eps.
        dot = (g * data).sum(axis=axis, keepdims=True)
        gx = np.where(floored, g / eps, (g - data * dot) / denom)
        _accum(t, gx, own=True)

    return _make(data, (t,), bwd)


def cosine_similarity(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Composite: sum of elementwise product of L2-normalized inputs."""
    return tsum(mul(l2_normalize(a, axis=axis), l2_normalize(b, axis=axis)), axis=axis)


def dot(a: Tensor, b: Tensor) -> Tensor:
    _check(a.ndim == 1 and b.ndim == 1 and a.shape == b.shape,
           f"dot expects equal-length vectors, got {a.shape} and {b.shape}")
    return tsum(mul(a, b))


# ---------------------------------------------------------------------------
# backward


def backward(root: Tensor) -> None:
    """Run reverse-mode accumulation from a scalar root.

    Populates .grad on every reachable tensor with requires_grad, then frees
    the graph edges so buffers can be collected. Raises ContractViolation if
    root is not a scalar.
    """
    _check(root.data.size == 1, f"backward root must be scalar, got shape {root.data.shape}")
    if not root.requires_grad:
        return

    # Iterative topo sort (graphs can exceed the recursion limit).
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    root.grad = np.ones_like(root.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    # Drop edges: keeps leaf grads, lets intermediate buffers go.
    for node in topo:
        node._parents = ()
        node._backward = None
