"""Minimal reverse-mode autodiff over dense float64 numpy buffers.

Only 1-D and 2-D tensors are supported, which is all the model needs.
Gradients accumulate with ``+=`` across multiple uses of a tensor; the
caller is responsible for zeroing between optimizer steps.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

LEAKY_SLOPE = 0.2
LOG_CLAMP = 1e-12


class ShapeError(ValueError):
    """Raised when operand shapes are not conformable for an op."""


class Tensor:
    """Node in the recorded computation graph.

    Parent links plus per-node backward closures form the computation
    record; ``backward`` replays them in reverse topological order.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        if self.data.ndim > 2:
            raise ShapeError(f"tensors are 1-D or 2-D, got shape {self.data.shape}")
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    # operator sugar; scalars are the only implicit broadcast
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def parameter(data, rng: np.random.Generator | None = None) -> Tensor:
    return Tensor(data, requires_grad=True)


def _needs_grad(*ts: Tensor) -> bool:
    return any(t.requires_grad or t._backward is not None for t in ts)


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if any(t.requires_grad or t._backward is not None for t in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray):
    if t.requires_grad:
        t.grad += g
    elif t._backward is not None:
        # non-leaf intermediates hold their incoming grad in a transient slot
        if t.grad is None:
            t.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            t.grad += g


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.data.shape != b.data.shape and a.data.size != 1 and b.data.size != 1:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    """Collapse a gradient onto a scalar operand."""
    if g.shape == tuple(shape):
        return g
    return np.sum(g).reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")

    def bwd(g):
        _accum(a, _reduce_to(g, a.data.shape))
        _accum(b, _reduce_to(g, b.data.shape))

    return _make(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")

    def bwd(g):
        _accum(a, _reduce_to(g, a.data.shape))
        _accum(b, _reduce_to(-g, b.data.shape))

    return _make(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")

    def bwd(g):
        _accum(a, _reduce_to(g * b.data, a.data.shape))
        _accum(b, _reduce_to(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "div")

    def bwd(g):
        _accum(a, _reduce_to(g / b.data, a.data.shape))
        _accum(b, _reduce_to(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(a.data / b.data, (a, b), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix-matrix, matrix-vector or vector-matrix product."""
    try:
        out = a.data @ b.data
    except ValueError as e:
        raise ShapeError(f"matmul: {a.data.shape} @ {b.data.shape}: {e}") from None

    def bwd(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1 and bd.ndim == 1:
            raise ShapeError("use dot() for vector-vector products")
        if ad.ndim == 2 and bd.ndim == 2:
            _accum(a, g @ bd.T)
            _accum(b, ad.T @ g)
        elif ad.ndim == 2 and bd.ndim == 1:
            _accum(a, np.outer(g, bd))
            _accum(b, ad.T @ g)
        else:  # vec @ mat
            _accum(a, g @ bd.T)
            _accum(b, np.outer(ad, g))

    return _make(out, (a, b), bwd)


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 1 or b.data.ndim != 1 or a.data.shape != b.data.shape:
        raise ShapeError(f"dot: need equal-length vectors, got {a.data.shape}, {b.data.shape}")

    def bwd(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(np.dot(a.data, b.data), (a, b), bwd)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("transpose: 2-D only")

    def bwd(g):
        _accum(a, g.T)

    return _make(a.data.T.copy(), (a,), bwd)


def concat(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the last axis."""
    if a.data.ndim != b.data.ndim:
        raise ShapeError(f"concat: rank mismatch {a.data.shape} vs {b.data.shape}")
    if a.data.ndim == 2 and a.data.shape[0] != b.data.shape[0]:
        raise ShapeError(f"concat: leading dims differ {a.data.shape} vs {b.data.shape}")
    n = a.data.shape[-1]

    def bwd(g):
        _accum(a, g[..., :n])
        _accum(b, g[..., n:])

    return _make(np.concatenate([a.data, b.data], axis=-1), (a, b), bwd)


def leaky_relu(a: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    mask = a.data > 0

    def bwd(g):
        _accum(a, g * np.where(mask, 1.0, slope))

    return _make(np.where(mask, a.data, slope * a.data), (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        _accum(a, g * out * (1.0 - out))

    return _make(out, (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bwd(g):
        _accum(a, g * (1.0 - out * out))

    return _make(out, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bwd(g):
        _accum(a, g * out)

    return _make(out, (a,), bwd)


def log(a: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, g / a.data)

    return _make(np.log(a.data), (a,), bwd)


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """Clamp from below; gradient is blocked on clamped entries."""
    mask = a.data >= floor

    def bwd(g):
        _accum(a, g * mask)

    return _make(np.maximum(a.data, floor), (a,), bwd)


def softmax(a: Tensor) -> Tensor:
    """Stable softmax over a 1-D vector."""
    if a.data.ndim != 1:
        raise ShapeError("softmax: 1-D input expected; use softmax_rows for matrices")
    z = a.data - np.max(a.data)
    e = np.exp(z)
    out = e / np.sum(e)

    def bwd(g):
        _accum(a, out * (g - np.dot(g, out)))

    return _make(out, (a,), bwd)


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise stable softmax over a 2-D matrix."""
    if a.data.ndim != 2:
        raise ShapeError("softmax_rows: 2-D input expected")
    z = a.data - np.max(a.data, axis=1, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=1, keepdims=True)

    def bwd(g):
        _accum(a, out * (g - np.sum(g * out, axis=1, keepdims=True)))

    return _make(out, (a,), bwd)


def sum_all(a: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, np.full_like(a.data, float(g)))

    return _make(np.sum(a.data), (a,), bwd)


def sum_rows(a: Tensor) -> Tensor:
    """Sum a 2-D matrix over its rows, yielding a 1-D vector."""
    if a.data.ndim != 2:
        raise ShapeError("sum_rows: 2-D input expected")

    def bwd(g):
        _accum(a, np.broadcast_to(g, a.data.shape).copy())

    return _make(np.sum(a.data, axis=0), (a,), bwd)


def add_bias(a: Tensor, b: Tensor) -> Tensor:
    """Add a length-d bias vector to each row of an (n, d) matrix."""
    if a.data.ndim == 1:
        return add(a, b)
    if b.data.ndim != 1 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"add_bias: {a.data.shape} + bias {b.data.shape}")

    def bwd(g):
        _accum(a, g)
        _accum(b, np.sum(g, axis=0))

    return _make(a.data + b.data, (a, b), bwd)


def scale_rows(a: Tensor, v: Tensor) -> Tensor:
    """Multiply row i of an (n, d) matrix by v[i]."""
    if a.data.ndim != 2 or v.data.ndim != 1 or a.data.shape[0] != v.data.shape[0]:
        raise ShapeError(f"scale_rows: {a.data.shape} rows vs weights {v.data.shape}")

    def bwd(g):
        _accum(a, g * v.data[:, None])
        _accum(v, np.sum(g * a.data, axis=1))

    return _make(a.data * v.data[:, None], (a, v), bwd)


def gather(a: Tensor, idx: Sequence[int]) -> Tensor:
    """Select rows (2-D) or elements (1-D); backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.intp)
    distinct = idx.ndim == 0 or len(np.unique(idx)) == idx.shape[0]

    def bwd(g):
        if not (a.requires_grad or a._backward is not None):
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        if distinct:
            a.grad[idx] += g
        else:
            np.add.at(a.grad, idx, g)

    return _make(a.data[idx], (a,), bwd)


def segment_sum(a: Tensor, seg: Sequence[int], n: int) -> Tensor:
    """Sum elements (1-D) or rows (2-D) of ``a`` into ``n`` segments."""
    seg = np.asarray(seg, dtype=np.intp)
    if seg.shape[0] != a.data.shape[0]:
        raise ShapeError(f"segment_sum: {a.data.shape[0]} entries vs "
                         f"{seg.shape[0]} segment ids")
    out = np.zeros((n,) + a.data.shape[1:])
    np.add.at(out, seg, a.data)

    def bwd(g):
        _accum(a, g[seg])

    return _make(out, (a,), bwd)


def segment_softmax(a: Tensor, seg: Sequence[int], n: int) -> Tensor:
    """Independent stable softmax over each segment of a 1-D vector."""
    if a.data.ndim != 1:
        raise ShapeError("segment_softmax: 1-D input expected")
    seg = np.asarray(seg, dtype=np.intp)
    if seg.shape[0] != a.data.shape[0]:
        raise ShapeError(f"segment_softmax: {a.data.shape[0]} entries vs "
                         f"{seg.shape[0]} segment ids")
    mx = np.full(n, -np.inf)
    np.maximum.at(mx, seg, a.data)
    e = np.exp(a.data - mx[seg])
    denom = np.zeros(n)
    np.add.at(denom, seg, e)
    out = e / denom[seg]

    def bwd(g):
        dots = np.zeros(n)
        np.add.at(dots, seg, g * out)
        _accum(a, out * (g - dots[seg]))

    return _make(out, (a,), bwd)


def stack_rows(rows: Iterable[Tensor]) -> Tensor:
    """Stack 1-D tensors of equal length into a matrix."""
    rows = list(rows)
    if not rows:
        raise ShapeError("stack_rows: empty input")
    n = rows[0].data.shape
    for r in rows:
        if r.data.ndim != 1 or r.data.shape != n:
            raise ShapeError("stack_rows: rows must be equal-length vectors")

    def bwd(g):
        for i, r in enumerate(rows):
            _accum(r, g[i])

    return _make(np.stack([r.data for r in rows]), tuple(rows), bwd)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Accumulate dLoss/dT into every requires-grad tensor reachable from loss.

    The recorded graph below ``loss`` is released afterwards.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    order = _toposort(loss)
    if loss.grad is None:
        loss.grad = np.zeros_like(loss.data)
    loss.grad += 1.0
    for node in reversed(order):
        if node._backward is not None:
            node._backward(np.asarray(node.grad))
    for node in order:
        if node._backward is not None:
            node._parents = ()
            node._backward = None
            if not node.requires_grad and node is not loss:
                node.grad = None


def finite_difference_check(
    f: Callable[[list[Tensor]], Tensor],
    points: list[Tensor],
    eps: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be deterministic (any internal randomness fixed by seed).
    Coordinates where both gradients are near zero are compared absolutely.
    """
    for p in points:
        p.zero_grad()
    loss = f(points)
    backward(loss)
    analytic = [p.grad.copy() for p in points]

    worst = 0.0
    for pi, p in enumerate(points):
        flat = p.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up = f(points).item()
            flat[j] = orig - eps
            dn = f(points).item()
            flat[j] = orig
            numeric = (up - dn) / (2.0 * eps)
            a = analytic[pi].reshape(-1)[j]
            denom = max(1.0, abs(a))
            worst = max(worst, abs(a - numeric) / denom)
    return worst
