"""
Numeric Substrate Module

Dense float64 tensors with a reverse-mode gradient tape. Every other module
computes on these tensors.

Design Decisions:
=================

1. Precision:
   - All tensor data is float64; float32 only appears in checkpoint storage
   - Gradient oracles (central differences) stay tight at eps=1e-5

2. Tape:
   - Each operation records its parents and a closure that accumulates
     parent gradients from the output gradient
   - backward() walks the graph in reverse topological order, then frees it
     (parents, closures and intermediate gradients are dropped)
   - The tape is single-writer; the recording switch is thread-local so
     independent threads can evaluate under no_grad() safely

3. Fused operations:
   - softmax, log_softmax and layer_norm have hand-written backward passes
     for numerical stability; everything else is composed from primitives
"""

import threading
from contextlib import contextmanager
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


_grad_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_state, 'enabled', True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block (current thread only)."""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


class Tensor:
    """
    A dense float64 array that can take part in the gradient tape.

    Attributes:
        data: The underlying row-major ndarray
        grad: Accumulated gradient (same shape as data) or None
        requires_grad: Whether gradients flow into this tensor
        name: Optional parameter name, used in error messages
    """

    __slots__ = ('data', 'grad', 'requires_grad', 'name', '_parents', '_backward')
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str = ''):
        if isinstance(data, np.ndarray) and data.dtype == np.float64:
            self.data = data
        else:
            self.data = np.array(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: Tuple['Tensor', ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence['Tensor'],
                backward: Callable[[np.ndarray], None]) -> 'Tensor':
        """Create the output of an operation and record it on the tape."""
        requires = is_grad_enabled() and any(p.requires_grad for p in parents)
        out = cls(data, requires_grad=requires)
        if requires:
            out._parents = tuple(parents)
            out._backward = backward
        return out

    # Introspection

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        label = f' {self.name!r}' if self.name else ''
        return f'<Tensor{label} shape={self.shape} requires_grad={self.requires_grad}>'

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f'item() needs a single element, got shape {self.shape}')
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, grad: np.ndarray) -> None:
        """Add `grad` into this tensor's gradient if it participates in the tape."""
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + grad

    # Reverse pass

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """
        Propagate gradients from this tensor to every leaf that requires them.

        The graph is freed afterwards: intermediate tensors lose their parents,
        closures and gradients, leaves keep their accumulated `.grad`.
        """
        if grad is None:
            if self.size != 1:
                raise ShapeError(f'backward() without a gradient needs a scalar, got {self.shape}')
            grad = np.ones_like(self.data)
        elif grad.shape != self.shape:
            raise ShapeError(f'gradient shape {grad.shape} does not match {self.shape}')

        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

        self.grad = np.array(grad, dtype=np.float64, copy=True) if self.grad is None else self.grad + grad
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

        for node in order:
            if node._backward is not None:
                node.grad = None
                node._parents = ()
                node._backward = None

    # Arithmetic

    def __add__(self, other) -> 'Tensor':
        other = as_tensor(other)

        def _bw(g):
            self.accumulate(_unbroadcast(g, self.shape))
            other.accumulate(_unbroadcast(g, other.shape))
        return Tensor.from_op(self.data + other.data, (self, other), _bw)

    __radd__ = __add__

    def __sub__(self, other) -> 'Tensor':
        other = as_tensor(other)

        def _bw(g):
            self.accumulate(_unbroadcast(g, self.shape))
            other.accumulate(_unbroadcast(-g, other.shape))
        return Tensor.from_op(self.data - other.data, (self, other), _bw)

    def __rsub__(self, other) -> 'Tensor':
        return as_tensor(other) - self

    def __mul__(self, other) -> 'Tensor':
        other = as_tensor(other)

        def _bw(g):
            self.accumulate(_unbroadcast(g * other.data, self.shape))
            other.accumulate(_unbroadcast(g * self.data, other.shape))
        return Tensor.from_op(self.data * other.data, (self, other), _bw)

    __rmul__ = __mul__

    def __truediv__(self, other) -> 'Tensor':
        other = as_tensor(other)

        def _bw(g):
            self.accumulate(_unbroadcast(g / other.data, self.shape))
            other.accumulate(_unbroadcast(-g * self.data / (other.data ** 2), other.shape))
        return Tensor.from_op(self.data / other.data, (self, other), _bw)

    def __rtruediv__(self, other) -> 'Tensor':
        return as_tensor(other) / self

    def __neg__(self) -> 'Tensor':
        def _bw(g):
            self.accumulate(-g)
        return Tensor.from_op(-self.data, (self,), _bw)

    def __pow__(self, exponent: float) -> 'Tensor':
        if isinstance(exponent, Tensor):
            raise TypeError('only scalar exponents are supported')

        def _bw(g):
            self.accumulate(g * exponent * self.data ** (exponent - 1))
        return Tensor.from_op(self.data ** exponent, (self,), _bw)

    def __matmul__(self, other) -> 'Tensor':
        return matmul(self, other)

    def __getitem__(self, index) -> 'Tensor':
        out = self.data[index]
        basic = _is_basic_index(index)

        def _bw(g):
            full = np.zeros_like(self.data)
            if basic:
                full[index] += g
            else:
                np.add.at(full, index, g)
            self.accumulate(full)
        return Tensor.from_op(np.array(out, dtype=np.float64), (self,), _bw)

    # Reductions

    def sum(self, axis=None, keepdims: bool = False) -> 'Tensor':
        def _bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self.accumulate(np.broadcast_to(g, self.shape))
        return Tensor.from_op(np.sum(self.data, axis=axis, keepdims=keepdims), (self,), _bw)

    def mean(self, axis=None, keepdims: bool = False) -> 'Tensor':
        if axis is None:
            count = self.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def max(self, axis: int, keepdims: bool = False) -> 'Tensor':
        """Maximum along one axis; the gradient goes to the first maximal entry."""
        axis = axis % self.ndim
        index = np.expand_dims(np.argmax(self.data, axis=axis), axis)
        out = np.take_along_axis(self.data, index, axis=axis)
        if not keepdims:
            out = np.squeeze(out, axis=axis)

        def _bw(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            full = np.zeros_like(self.data)
            np.put_along_axis(full, index, g, axis=axis)
            self.accumulate(full)
        return Tensor.from_op(out, (self,), _bw)

    def min(self, axis: int, keepdims: bool = False) -> 'Tensor':
        return -((-self).max(axis=axis, keepdims=keepdims))

    # Shape manipulation

    def reshape(self, *shape) -> 'Tensor':
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        original = self.shape

        def _bw(g):
            self.accumulate(g.reshape(original))
        return Tensor.from_op(self.data.reshape(shape), (self,), _bw)

    def transpose(self, *axes) -> 'Tensor':
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))

        def _bw(g):
            self.accumulate(g.transpose(inverse))
        return Tensor.from_op(self.data.transpose(axes), (self,), _bw)

    def swapaxes(self, a: int, b: int) -> 'Tensor':
        def _bw(g):
            self.accumulate(np.swapaxes(g, a, b))
        return Tensor.from_op(np.swapaxes(self.data, a, b), (self,), _bw)

    def flip(self, axis: int) -> 'Tensor':
        def _bw(g):
            self.accumulate(np.flip(g, axis=axis))
        return Tensor.from_op(np.flip(self.data, axis=axis).copy(), (self,), _bw)

    # Elementwise nonlinearities

    def exp(self) -> 'Tensor':
        out = np.exp(self.data)

        def _bw(g):
            self.accumulate(g * out)
        return Tensor.from_op(out, (self,), _bw)

    def log(self) -> 'Tensor':
        def _bw(g):
            self.accumulate(g / self.data)
        return Tensor.from_op(np.log(self.data), (self,), _bw)

    def tanh(self) -> 'Tensor':
        out = np.tanh(self.data)

        def _bw(g):
            self.accumulate(g * (1.0 - out * out))
        return Tensor.from_op(out, (self,), _bw)

    def relu(self) -> 'Tensor':
        mask = self.data > 0

        def _bw(g):
            self.accumulate(g * mask)
        return Tensor.from_op(self.data * mask, (self,), _bw)

    def silu(self) -> 'Tensor':
        s = _sigmoid(self.data)

        def _bw(g):
            self.accumulate(g * s * (1.0 + self.data * (1.0 - s)))
        return Tensor.from_op(self.data * s, (self,), _bw)

    def gelu(self) -> 'Tensor':
        """GELU, tanh approximation."""
        x = self.data
        c = np.sqrt(2.0 / np.pi)
        t = np.tanh(c * (x + 0.044715 * x ** 3))

        def _bw(g):
            dt = (1.0 - t * t) * c * (1.0 + 3 * 0.044715 * x * x)
            self.accumulate(g * (0.5 * (1.0 + t) + 0.5 * x * dt))
        return Tensor.from_op(0.5 * x * (1.0 + t), (self,), _bw)

    def softplus(self) -> 'Tensor':
        def _bw(g):
            self.accumulate(g * _sigmoid(self.data))
        return Tensor.from_op(np.logaddexp(0.0, self.data), (self,), _bw)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


TensorLike = Union[Tensor, np.ndarray, float, int]


def as_tensor(value: TensorLike) -> Tensor:
    """Wrap constants; tensors pass through unchanged."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def parameter(data, name: str = '') -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f'matmul needs rank >= 2 operands, got {a.shape} and {b.shape}')
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f'matmul inner dimensions differ: {a.shape} @ {b.shape}')

    def _bw(g):
        a.accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        b.accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))
    return Tensor.from_op(a.data @ b.data, (a, b), _bw)


def concat(tensors: Sequence[TensorLike], axis: int = -1) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def _bw(g):
        for part, piece in zip(parts, np.split(g, splits, axis=axis)):
            part.accumulate(piece)
    return Tensor.from_op(np.concatenate([p.data for p in parts], axis=axis), parts, _bw)


def stack(tensors: Sequence[TensorLike], axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]

    def _bw(g):
        for i, part in enumerate(parts):
            part.accumulate(np.take(g, i, axis=axis))
    return Tensor.from_op(np.stack([p.data for p in parts], axis=axis), parts, _bw)


def pad(x: Tensor, widths: Sequence[Tuple[int, int]]) -> Tensor:
    """Zero padding; `widths` follows numpy.pad."""
    window = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, x.shape))

    def _bw(g):
        x.accumulate(g[window])
    return Tensor.from_op(np.pad(x.data, widths), (x,), _bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        x.accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))
    return Tensor.from_op(out, (x,), _bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def _bw(g):
        x.accumulate(g - np.exp(out) * g.sum(axis=axis, keepdims=True))
    return Tensor.from_op(out, (x,), _bw)


def softmax_rows(m: Tensor) -> Tensor:
    """
    Row-wise softmax of a rank-2 tensor.

    Raises:
        ShapeError: if m is not rank 2
        ValueError: if m has a non-finite entry (the index is named)
    """
    m = as_tensor(m)
    if m.ndim != 2:
        raise ShapeError(f'softmax_rows expects a rank-2 tensor, got shape {m.shape}')
    bad = np.argwhere(~np.isfinite(m.data))
    if len(bad):
        row, col = (int(i) for i in bad[0])
        raise ValueError(f'non-finite entry {m.data[row, col]} at index ({row}, {col})')
    return softmax(m, axis=-1)


def layer_norm(x: Tensor, gain: Optional[Tensor] = None, bias: Optional[Tensor] = None,
               eps: float = 1e-5) -> Tensor:
    """
    Normalise over the last axis, then apply the optional affine map.

    A constant row has zero variance; eps keeps the scale finite and the
    normalised row is exactly zero.
    """
    if x.ndim < 1 or x.shape[-1] < 1:
        raise ShapeError(f'layer_norm needs a non-empty last axis, got {x.shape}')
    for label, p in (('gain', gain), ('bias', bias)):
        if p is not None and p.shape != x.shape[-1:]:
            raise ShapeError(f'layer_norm {label} shape {p.shape} != {x.shape[-1:]}')

    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = xhat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data
    parents = [t for t in (x, gain, bias) if t is not None]
    lead_axes = tuple(range(x.ndim - 1))

    def _bw(g):
        if gain is not None:
            gain.accumulate((g * xhat).sum(axis=lead_axes))
            g_hat = g * gain.data
        else:
            g_hat = g
        if bias is not None:
            bias.accumulate(g.sum(axis=lead_axes))
        x.accumulate(inv_std * (g_hat - g_hat.mean(axis=-1, keepdims=True)
                                - xhat * (g_hat * xhat).mean(axis=-1, keepdims=True)))
    return Tensor.from_op(out, parents, _bw)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer `labels` under row-wise softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f'cross_entropy expects (B, K) logits and (B,) labels, '
                         f'got {logits.shape} and {labels.shape}')
    picked = log_softmax(logits, axis=-1)[np.arange(len(labels)), labels]
    return -picked.mean()


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ValueError('dropout in training mode needs an rng')
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * keep
