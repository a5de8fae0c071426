"""Dense float tensors with tape-based reverse-mode differentiation.

Covers exactly the operation set the encoder model needs: elementwise
arithmetic with broadcasting, (batched) matmul, row softmax, reductions,
cumulative sums, row L2 normalization, gather/scatter for embeddings,
plus GELU/ELU activations. Values are float32 by default; float64 is
used for oracle and gradient-check runs.

Tensors are immutable once produced by an operation. Gradient tapes are
per-call chains of parent links; ``backward``/``grad`` walk them in
reverse topological order. A finite-difference oracle
(`finite_difference_gradient`) provides an independent check of every
analytic gradient.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

DEFAULT_DTYPE = np.float32

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


# ---------------------------------------------------------------------------
# Allocation tracking (test hook for memory-complexity assertions)
# ---------------------------------------------------------------------------

class AllocationTracker:
    """Records element counts of arrays materialized by tensor ops."""

    def __init__(self) -> None:
        self.peak_elements = 0
        self.total_elements = 0
        self.num_allocations = 0

    def record(self, n: int) -> None:
        self.num_allocations += 1
        self.total_elements += n
        if n > self.peak_elements:
            self.peak_elements = n


_tracker: AllocationTracker | None = None


@contextmanager
def track_allocations():
    """Context manager yielding an AllocationTracker for the enclosed ops.

    Only newly materialized result buffers are counted; pure views
    (reshape/transpose) are free.
    """
    global _tracker
    prev = _tracker
    _tracker = tracker = AllocationTracker()
    try:
        yield tracker
    finally:
        _tracker = prev


def _record_alloc(arr: np.ndarray) -> None:
    if _tracker is not None:
        _tracker.record(int(arr.size))


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------

class Tensor:
    """A dense n-d float array, optionally tracked on the gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._backward: Callable[[np.ndarray], None] | None = None
        self._parents: tuple[Tensor, ...] = ()

    # -- construction helpers ------------------------------------------------

    @staticmethod
    def _make(data: np.ndarray, parents: tuple["Tensor", ...],
              backward: Callable[[np.ndarray], None] | None,
              record: bool = True) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._backward = backward
            out._parents = tuple(p for p in parents if p.requires_grad or p._parents)
        else:
            out._backward = None
            out._parents = ()
        if record:
            _record_alloc(data)
        return out

    # -- basic introspection ---------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._scalar_error()

    def _scalar_error(self):
        raise ShapeError(f"item() requires a scalar tensor, got shape {self.shape}")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, dtype=dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, *shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, *axes)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return reduce_mean(self, axis, keepdims)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    """Wrap ``x`` as a constant Tensor, matching ``like``'s dtype if given."""
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g


# ---------------------------------------------------------------------------
# Elementwise binary ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.shape))

    return Tensor._make(data, (a, b), backward)


def subtract(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.shape))

    return Tensor._make(data, (a, b), backward)


def multiply(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return Tensor._make(data, (a, b), backward)


def divide(a, b, eps: float | None = None) -> Tensor:
    """Elementwise a / b.

    A zero element in the denominator raises NumericError unless ``eps``
    is given, in which case denominators are clamped away from zero
    (magnitude at least ``eps``, sign preserved, exact zeros become +eps).
    """
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    denom = b.data
    guarded = None
    if eps is not None:
        guarded = np.abs(denom) < eps
        sign = np.where(denom < 0, -1.0, 1.0).astype(denom.dtype)
        denom = np.where(guarded, sign * eps, denom)
    elif np.any(denom == 0):
        raise NumericError("division by zero denominator element (pass eps= to guard)")
    data = a.data / denom

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / denom, a.shape))
        if b.requires_grad:
            gb = -g * a.data / (denom * denom)
            if guarded is not None:
                gb = np.where(guarded, 0.0, gb)  # clamped denominators are constants
            _accumulate(b, _unbroadcast(gb, b.shape))

    return Tensor._make(data, (a, b), backward)


def negate(a) -> Tensor:
    a = as_tensor(a)
    data = -a.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, -g)

    return Tensor._make(data, (a,), backward)


# ---------------------------------------------------------------------------
# Elementwise unary ops
# ---------------------------------------------------------------------------

def exp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * data)

    return Tensor._make(data, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g / a.data)

    return Tensor._make(data, (a,), backward)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    data = np.sqrt(a.data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * (0.5 / data))

    return Tensor._make(data, (a,), backward)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    data = np.tanh(a.data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * (1.0 - data * data))

    return Tensor._make(data, (a,), backward)


def gelu(a) -> Tensor:
    """GELU, tanh approximation: 0.5*x*(1 + tanh(c*(x + 0.044715*x^3)))."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(inner)
    data = 0.5 * x * (1.0 + t)

    def backward(g):
        if a.requires_grad:
            dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
            local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
            _accumulate(a, g * local)

    return Tensor._make(data, (a,), backward)


def elu(a) -> Tensor:
    """ELU with alpha=1: x for x>0, exp(x)-1 otherwise."""
    a = as_tensor(a)
    x = a.data
    neg_exp = np.exp(np.minimum(x, 0.0))
    data = np.where(x > 0, x, neg_exp - 1.0)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * np.where(x > 0, 1.0, neg_exp).astype(x.dtype))

    return Tensor._make(data, (a,), backward)


def scale(a, factor: float) -> Tensor:
    """Multiply by a python scalar (cheap special case of multiply)."""
    a = as_tensor(a)
    data = a.data * factor

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * factor)

    return Tensor._make(data, (a,), backward)


def clip_max(a, limit: float) -> Tensor:
    """Clamp values above ``limit`` (zero subgradient in the clipped region)."""
    a = as_tensor(a)
    data = np.minimum(a.data, limit)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * (a.data <= limit).astype(a.data.dtype))

    return Tensor._make(data, (a,), backward)


# ---------------------------------------------------------------------------
# Matmul
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product with numpy-style broadcasting over leading dims."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _accumulate(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accumulate(b, _unbroadcast(gb, b.shape))

    return Tensor._make(data, (a, b), backward)


# ---------------------------------------------------------------------------
# Softmax family
# ---------------------------------------------------------------------------

def softmax_rows(a) -> Tensor:
    """Numerically stable softmax along the last axis."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if a.requires_grad:
            dot = (g * data).sum(axis=-1, keepdims=True)
            _accumulate(a, (g - dot) * data)

    return Tensor._make(data, (a,), backward)


def log_softmax_rows(a) -> Tensor:
    """log(softmax) along the last axis, computed stably."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    data = shifted - lse
    soft = np.exp(data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g - soft * g.sum(axis=-1, keepdims=True))

    return Tensor._make(data, (a,), backward)


# ---------------------------------------------------------------------------
# Reductions and scans
# ---------------------------------------------------------------------------

def _check_axis(axis, ndim: int) -> None:
    if axis is None:
        return
    axes = axis if isinstance(axis, tuple) else (axis,)
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for ndim {ndim}")


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    _check_axis(axis, a.ndim)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if a.requires_grad:
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            _accumulate(a, np.broadcast_to(gg, a.shape).astype(a.data.dtype))

    return Tensor._make(np.asarray(data), (a,), backward)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    _check_axis(axis, a.ndim)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.data.shape[ax] for ax in axis]))
    else:
        count = a.data.shape[axis]

    def backward(g):
        if a.requires_grad:
            gg = g / count
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            _accumulate(a, np.broadcast_to(gg, a.shape).astype(a.data.dtype))

    return Tensor._make(np.asarray(data), (a,), backward)


def reduce_max(a, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction over one axis (or all); ties route the gradient to the first maximum."""
    a = as_tensor(a)
    if isinstance(axis, tuple):
        raise ShapeError("reduce_max supports a single axis or None")
    _check_axis(axis, a.ndim)
    data = a.data.max(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            flat = a.data.reshape(-1)
            mask = np.zeros_like(flat)
            mask[int(flat.argmax())] = 1.0
            _accumulate(a, (mask * g).reshape(a.shape))
            return
        expanded = data if keepdims else np.expand_dims(data, axis)
        hits = (a.data == expanded)
        first = hits.cumsum(axis=axis) == 1
        mask = (hits & first).astype(a.data.dtype)
        gg = g if keepdims else np.expand_dims(g, axis)
        _accumulate(a, mask * gg)

    return Tensor._make(np.asarray(data), (a,), backward)


def cumsum(a, axis: int) -> Tensor:
    """Inclusive prefix sum along ``axis``."""
    a = as_tensor(a)
    _check_axis(axis, a.ndim)
    data = np.cumsum(a.data, axis=axis)

    def backward(g):
        if a.requires_grad:
            rev = np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis)
            _accumulate(a, rev)

    return Tensor._make(data, (a,), backward)


# ---------------------------------------------------------------------------
# Row normalization
# ---------------------------------------------------------------------------

def l2_normalize_rows(a, eps: float = 1e-12) -> Tensor:
    """Divide each row (last axis) by max(||row||_2, eps)."""
    if eps <= 0:
        raise NumericError(f"l2_normalize_rows requires eps > 0, got {eps}")
    a = as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    clipped = np.maximum(norm, eps)
    data = a.data / clipped

    def backward(g):
        if a.requires_grad:
            live = (norm >= eps)
            dot = (g * data).sum(axis=-1, keepdims=True)
            grad_live = (g - data * dot) / clipped
            grad_dead = g / eps
            _accumulate(a, np.where(live, grad_live, grad_dead))

    return Tensor._make(data, (a,), backward)


# ---------------------------------------------------------------------------
# Shape ops (views; not counted as allocations)
# ---------------------------------------------------------------------------

def reshape(a, *shape) -> Tensor:
    a = as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g.reshape(a.shape))

    return Tensor._make(data, (a,), backward, record=False)


def transpose(a, *axes) -> Tensor:
    a = as_tensor(a)
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    if not axes:
        axes = tuple(reversed(range(a.ndim)))
    data = a.data.transpose(axes)
    inverse = np.argsort(axes)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g.transpose(inverse))

    return Tensor._make(data, (a,), backward, record=False)


def swap_last_two(a) -> Tensor:
    axes = list(range(as_tensor(a).ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, *axes)


# ---------------------------------------------------------------------------
# Gather / scatter / concat
# ---------------------------------------------------------------------------

def take_rows(a, indices: np.ndarray) -> Tensor:
    """Gather rows (axis 0) by integer index array; grads scatter-add back."""
    a = as_tensor(a)
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"row index out of range [0, {a.shape[0]}) in take_rows")
    data = a.data[idx]

    def backward(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            np.add.at(ga, idx, g)
            _accumulate(a, ga)

    return Tensor._make(data, (a,), backward)


def take_per_row(a, col_indices: np.ndarray) -> Tensor:
    """From a 2-d tensor, pick one column per row: out[i] = a[i, col[i]]."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"take_per_row requires a 2-d tensor, got {a.shape}")
    cols = np.asarray(col_indices)
    rows = np.arange(a.shape[0])
    data = a.data[rows, cols]

    def backward(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            np.add.at(ga, (rows, cols), g)
            _accumulate(a, ga)

    return Tensor._make(data, (a,), backward)


def slice_along_axis(a, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice [start:stop) along one axis (a view; zero-alloc)."""
    a = as_tensor(a)
    _check_axis(axis, a.ndim)
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    data = a.data[sl]

    def backward(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            ga[sl] = g
            _accumulate(a, ga)

    return Tensor._make(data, (a,), backward, record=False)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(sl)])

    return Tensor._make(data, tuple(tensors), backward)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate .grad on every tensor reachable from ``loss``."""
    if loss.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(_topo_order(loss)):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def grad(loss: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
    """Reverse-mode gradients of a scalar loss w.r.t. ``params``.

    Parameters not on the computation path get zero gradients.
    """
    params = list(params)
    for p in params:
        p.grad = None
    backward(loss)
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------

def finite_difference_gradient(loss_fn: Callable[[], float], param: Tensor,
                               coords: Iterable[tuple[int, ...]] | None = None,
                               step: float = 1e-3) -> dict[tuple[int, ...], float]:
    """Central-difference gradient of ``loss_fn`` w.r.t. entries of ``param``.

    ``loss_fn`` must recompute the loss from the current contents of
    ``param.data``; entries are perturbed in place and restored. Intended
    for float64 parameters (use small models). Returns {coord: dloss/dx}.
    """
    flat = param.data.reshape(-1)
    if coords is None:
        coords = [np.unravel_index(i, param.shape) for i in range(flat.size)]
    out: dict[tuple[int, ...], float] = {}
    for c in coords:
        c = tuple(int(x) for x in np.atleast_1d(c)) if not isinstance(c, tuple) else c
        orig = param.data[c]
        param.data[c] = orig + step
        up = loss_fn()
        param.data[c] = orig - step
        down = loss_fn()
        param.data[c] = orig
        out[c] = (up - down) / (2.0 * step)
    return out
