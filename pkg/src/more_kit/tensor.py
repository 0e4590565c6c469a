"""Minimal reverse-mode autodiff over dense float64 numpy arrays.

The graph is dynamic: every op records its parents and a backward closure on
the output tensor, and ``Tensor.backward`` walks the recorded nodes once in
reverse topological order, accumulating gradients additively across fan-out.
Only the operations the rank-expert computation graph needs are provided.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class NumericsError(ArithmeticError):
    """Raised when an op would produce NaN/Inf from finite inputs."""


# log is clamped at this floor instead of returning -inf on zero inputs
_LOG_FLOOR = 1e-300


def _as_f64(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    return arr


class Tensor:
    """Dense float64 array plus optional gradient and graph linkage."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_f64(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op: str = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Backpropagate from this node; gradients sum across fan-out."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without grad requires a scalar output")
            grad = np.ones_like(self.data)
        grad = _as_f64(grad)
        if grad.shape != self.data.shape:
            raise ValueError(f"seed gradient shape {grad.shape} != tensor shape {self.data.shape}")

        order = _toposort(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and node._parents == ():
                node._accumulate(g)
            if node._backward is not None:
                for parent, pg in node._backward(g):
                    if not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg

    # -- operator sugar ---------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _toposort(root: Tensor) -> list[Tensor]:
    """Iterative post-order DFS, reversed; each node visited at most once."""
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
    order.reverse()
    return order


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _make(data: np.ndarray, op: str, parents: tuple[Tensor, ...],
          backward: Callable[[np.ndarray], Sequence[tuple[Tensor, np.ndarray]]]) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericsError(f"op '{op}' produced a non-finite value")
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape`, undoing numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- arithmetic ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data

    def backward(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

    return _make(data, "add", (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data - b.data

    def backward(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape)))

    return _make(data, "sub", (a, b), backward)


def mul(a, b) -> Tensor:
    """Elementwise (broadcasting) product; scalars are constant multipliers."""
    a, b = _wrap(a), _wrap(b)
    data = a.data * b.data

    def backward(g):
        return ((a, _unbroadcast(g * b.data, a.shape)),
                (b, _unbroadcast(g * a.data, b.shape)))

    return _make(data, "mul", (a, b), backward)


def matmul(a, b) -> Tensor:
    """Matrix product with numpy semantics: 1-D operands are promoted, leading
    batch dimensions broadcast."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ValueError("matmul does not accept 0-d operands")
    a_inner = a.shape[-1]
    b_inner = b.shape[-2] if b.ndim > 1 else b.shape[0]
    if a_inner != b_inner:
        raise ValueError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    data = np.matmul(a.data, b.data)

    a2 = a.data[None, :] if a.ndim == 1 else a.data
    b2 = b.data[:, None] if b.ndim == 1 else b.data

    def backward(g):
        g2 = g
        if b.ndim == 1:
            g2 = np.expand_dims(g2, axis=-1)
        if a.ndim == 1:
            g2 = np.expand_dims(g2, axis=-2)
        ga = _unbroadcast(np.matmul(g2, np.swapaxes(b2, -1, -2)), a2.shape).reshape(a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a2, -1, -2), g2), b2.shape).reshape(b.shape)
        return ((a, ga), (b, gb))

    return _make(data, "matmul", (a, b), backward)


def power(a, exponent: float) -> Tensor:
    """Elementwise power with a constant exponent."""
    a = _wrap(a)
    with np.errstate(all="ignore"):
        data = a.data ** exponent

    def backward(g):
        return ((a, g * exponent * a.data ** (exponent - 1.0)),)

    return _make(data, "power", (a,), backward)


def exp(a) -> Tensor:
    a = _wrap(a)
    data = np.exp(a.data)

    def backward(g):
        return ((a, g * data),)

    return _make(data, "exp", (a,), backward)


def log(a) -> Tensor:
    """Natural log, clamped at 1e-300 so zero inputs give a large negative
    value instead of -inf."""
    a = _wrap(a)
    clamped = np.maximum(a.data, _LOG_FLOOR)
    data = np.log(clamped)

    def backward(g):
        return ((a, g / clamped),)

    return _make(data, "log", (a,), backward)


def tanh(a) -> Tensor:
    a = _wrap(a)
    data = np.tanh(a.data)

    def backward(g):
        return ((a, g * (1.0 - data * data)),)

    return _make(data, "tanh", (a,), backward)


# -- reductions ------------------------------------------------------------

def tsum(a, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return ((a, np.broadcast_to(g, a.shape).copy()),)
        axes = (axis,) if isinstance(axis, int) else axis
        g_exp = g
        if not keepdims:
            for ax in sorted(ax % a.ndim for ax in axes):
                g_exp = np.expand_dims(g_exp, axis=ax)
        return ((a, np.broadcast_to(g_exp, a.shape).copy()),)

    return _make(data, "sum", (a,), backward)


def mean(a, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = 1
        for ax in axes:
            count *= a.shape[ax % a.ndim]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def softmax(v, temperature: float = 1.0) -> Tensor:
    """Stable softmax over the last axis: logits are divided by `temperature`
    after max-subtraction."""
    v = _wrap(v)
    if temperature <= 0.0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if v.ndim == 0:
        raise ValueError("softmax needs at least one axis")
    z = (v.data - v.data.max(axis=-1, keepdims=True)) / temperature
    e = np.exp(z)
    data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * data).sum(axis=-1, keepdims=True)
        return ((v, (g - inner) * data / temperature),)

    return _make(data, "softmax", (v,), backward)


# -- shape ops --------------------------------------------------------------

def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = _wrap(a)
    data = a.data.reshape(shape)

    def backward(g):
        return ((a, g.reshape(a.shape)),)

    return _make(data, "reshape", (a,), backward)


def transpose_last(a) -> Tensor:
    """Swap the last two axes."""
    a = _wrap(a)
    if a.ndim < 2:
        raise ValueError("transpose_last needs at least 2 axes")
    data = np.swapaxes(a.data, -1, -2)

    def backward(g):
        return ((a, np.swapaxes(g, -1, -2)),)

    return _make(data, "transpose", (a,), backward)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along `axis`; backward scatters
    the gradient into that slice and zeros elsewhere."""
    a = _wrap(a)
    ax = axis % a.ndim
    if start < 0 or length < 1 or start + length > a.shape[ax]:
        raise ValueError(f"narrow range [{start}, {start + length}) out of bounds "
                         f"for axis {axis} of shape {a.shape}")
    index = tuple(slice(None) if i != ax else slice(start, start + length) for i in range(a.ndim))
    data = a.data[index].copy()

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return ((a, full),)

    return _make(data, "narrow", (a,), backward)


def slice_rows(a, k: int) -> Tensor:
    """First k rows of a 2-D matrix."""
    a = _wrap(a)
    if a.ndim != 2:
        raise ValueError("slice_rows expects a 2-D tensor")
    return narrow(a, 0, 0, k)


def slice_cols(a, k: int) -> Tensor:
    """First k columns of a 2-D matrix."""
    a = _wrap(a)
    if a.ndim != 2:
        raise ValueError("slice_cols expects a 2-D tensor")
    return narrow(a, 1, 0, k)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of an empty sequence")
    ax = axis % tensors[0].ndim
    data = np.concatenate([t.data for t in tensors], axis=ax)
    sizes = [t.shape[ax] for t in tensors]

    def backward(g):
        outs = []
        offset = 0
        for t, size in zip(tensors, sizes):
            index = tuple(slice(None) if i != ax else slice(offset, offset + size)
                          for i in range(g.ndim))
            outs.append((t, g[index]))
            offset += size
        return tuple(outs)

    return _make(data, "concat", tuple(tensors), backward)


def take(a, index: int) -> Tensor:
    """Pick one entry of a 1-D tensor as a 0-d tensor; backward scatters."""
    a = _wrap(a)
    if a.ndim != 1:
        raise ValueError("take expects a 1-D tensor")
    if not 0 <= index < a.shape[0]:
        raise ValueError(f"index {index} out of range for length {a.shape[0]}")
    data = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return ((a, full),)

    return _make(np.asarray(data), "take", (a,), backward)


def take_row(a, index: int) -> Tensor:
    """Row `index` of a 2-D tensor as a 1-D tensor; backward scatters."""
    a = _wrap(a)
    if a.ndim != 2:
        raise ValueError("take_row expects a 2-D tensor")
    if not 0 <= index < a.shape[0]:
        raise ValueError(f"row {index} out of range for {a.shape[0]} rows")
    data = a.data[index].copy()

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return ((a, full),)

    return _make(data, "take_row", (a,), backward)


def one_hot(index: int, length: int) -> Tensor:
    """Constant one-hot vector."""
    if not 0 <= index < length:
        raise ValueError(f"one_hot index {index} out of range for length {length}")
    data = np.zeros(length)
    data[index] = 1.0
    return Tensor(data)


def stop_gradient(a) -> Tensor:
    """Forward identity; contributes no gradient to its input."""
    a = _wrap(a)
    return Tensor(a.data.copy())


def dot(a, b) -> Tensor:
    """Inner product of two 1-D tensors."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 1 or b.ndim != 1:
        raise ValueError("dot expects 1-D tensors")
    return tsum(mul(a, b))


def cosine_similarity(a, b, min_norm: float = 1e-12) -> Tensor:
    """Cosine similarity of two 1-D tensors; zero-norm inputs are an error."""
    a, b = _wrap(a), _wrap(b)
    na = float(np.linalg.norm(a.data))
    nb = float(np.linalg.norm(b.data))
    if na < min_norm or nb < min_norm:
        raise ValueError("cosine similarity of a zero-norm vector")
    inv_a = power(tsum(mul(a, a)), -0.5)
    inv_b = power(tsum(mul(b, b)), -0.5)
    return mul(mul(dot(a, b), inv_a), inv_b)


def cross_entropy(probs, targets) -> Tensor:
    """Mean over positions of -log(probs[target]).

    `probs` holds probability rows over the last axis; `targets` is an integer
    array matching the leading shape.
    """
    probs = _wrap(probs)
    targets = np.asarray(targets, dtype=np.int64)
    if probs.ndim < 1:
        raise ValueError("cross_entropy expects at least 1-D probabilities")
    vocab = probs.shape[-1]
    if targets.shape != probs.shape[:-1]:
        raise ValueError(f"target shape {targets.shape} does not match "
                         f"probability rows {probs.shape[:-1]}")
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise ValueError("target index out of vocabulary range")
    mask = np.zeros(probs.shape)
    np.put_along_axis(mask, targets[..., None], 1.0, axis=-1)
    picked = tsum(mul(probs, Tensor(mask)), axis=-1)
    return mean(mul(log(picked), -1.0))
