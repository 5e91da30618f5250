"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations only record when a :class:`Tape` is active and at least one input
is tracked (a ``requires_grad`` leaf or the output of a recorded op). Anything
computed outside a recording scope is a constant and never receives gradients.
"""
from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class ContractError(RuntimeError):
    pass


_local = threading.local()


def _stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def current_tape() -> Optional["Tape"]:
    stack = _stack()
    if stack and stack[-1].recording:
        return stack[-1]
    return None


class Node:
    __slots__ = ("index", "parents", "backward_fn")

    def __init__(self, index: int, parents: tuple, backward_fn: Callable):
        self.index = index
        self.parents = parents
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations executed inside it are appended in
    execution order, so every node's parents precede it.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.recording = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        self.recording = True
        return self

    def __exit__(self, *exc) -> None:
        self.recording = False
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()

    def record(self, out: "Tensor", parents: Sequence["Tensor"], backward_fn: Callable) -> None:
        node = Node(len(self.nodes), tuple(parents), backward_fn)
        self.nodes.append(node)
        out._node = node
        out._tape = self

    def backward(self, loss: "Tensor") -> None:
        if loss._tape is not self or loss._node is None:
            raise ContractError("loss was not produced under this tape")
        if loss.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss._node.index: np.ones_like(loss.data)}
        for node in reversed(self.nodes[: loss._node.index + 1]):
            g = grads.pop(node.index, None)
            if g is None:
                continue
            parent_grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None:
                    continue
                if parent._tape is self and parent._node is not None:
                    i = parent._node.index
                    if i in grads:
                        grads[i] = grads[i] + pg
                    else:
                        grads[i] = pg
                elif parent.requires_grad:
                    if parent.grad is None:
                        parent.grad = np.zeros_like(parent.data)
                    parent.grad += pg


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_node", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._node: Optional[Node] = None
        self._tape: Optional[Tape] = None

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def tape_id(self) -> Optional[int]:
        return None if self._node is None else self._node.index

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self._node is not None

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self._tape is None:
            raise ContractError("tensor was not produced under a recording tape")
        self._tape.backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by scalars")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _recorder(*inputs: Tensor) -> Optional[Tape]:
    tape = current_tape()
    if tape is None:
        return None
    return tape if any(t.tracked for t in inputs) else None


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)
    tape = _recorder(a, b)
    if tape is not None:
        tape.record(out, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    tape = _recorder(a)
    if tape is not None:
        tape.record(out, (a,), lambda g: (-g,))
    return out


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)
    tape = _recorder(a, b)
    if tape is not None:
        def backward(g):
            ga = unbroadcast(g * b.data, a.shape) if a.tracked else None
            gb = unbroadcast(g * a.data, b.shape) if b.tracked else None
            return ga, gb

        tape.record(out, (a, b), backward)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over ``[..., m, k] @ [..., k, n]``.

    Leading batch dimensions broadcast. The backward rule is
    ``dA = dC @ B^T`` and ``dB = A^T @ dC``, each summed back to its input
    shape.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch dimensions not broadcastable: {a.shape} @ {b.shape}") from None
    out = Tensor(np.matmul(a.data, b.data))
    tape = _recorder(a, b)
    if tape is not None:
        def backward(g):
            ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.tracked else None
            gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.tracked else None
            return ga, gb

        tape.record(out, (a, b), backward)
    return out


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = Tensor(np.transpose(a.data, axes))
    tape = _recorder(a)
    if tape is not None:
        tape.record(out, (a,), lambda g: (np.transpose(g, inverse),))
    return out


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    tape = _recorder(a)
    if tape is not None:
        tape.record(out, (a,), lambda g: (g.reshape(a.shape),))
    return out


def getitem(a: Tensor, idx) -> Tensor:
    out = Tensor(a.data[idx])
    tape = _recorder(a)
    if tape is not None:
        def backward(g):
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            return (full,)

        tape.record(out, (a,), backward)
    return out


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(np.sum(a.data, axis=axis, keepdims=keepdims))
    tape = _recorder(a)
    if tape is not None:
        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        tape.record(out, (a,), backward)
    return out


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / count)


def softmax_lastdim(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max.

    Large finite negatives (additive masks) are fine; NaN is rejected.
    """
    if x.shape[-1] < 1:
        raise ShapeError(f"softmax needs a non-empty last dimension, got {x.shape}")
    if np.isnan(x.data).any():
        raise NumericError("NaN in softmax input")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)
    tape = _recorder(x)
    if tape is not None:
        tape.record(out, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias {gain.shape}/{bias.shape} do not match last dim of {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = Tensor(xhat * gain.data + bias.data)
    tape = _recorder(x, gain, bias)
    if tape is not None:
        def backward(g):
            lead = tuple(range(g.ndim - 1))
            dgain = (g * xhat).sum(axis=lead) if gain.tracked else None
            dbias = g.sum(axis=lead) if bias.tracked else None
            dx = None
            if x.tracked:
                dxhat = g * gain.data
                dx = rstd * (
                    dxhat
                    - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
                )
            return dx, dgain, dbias

        tape.record(out, (x, gain, bias), backward)
    return out


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    # tanh approximation
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    out = Tensor(0.5 * xd * (1.0 + t))
    tape = _recorder(x)
    if tape is not None:
        def backward(g):
            du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
            return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)

        tape.record(out, (x,), backward)
    return out


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    vocab = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"token id out of range for vocabulary of {vocab}")
    out = Tensor(weight.data[ids])
    tape = _recorder(weight)
    if tape is not None:
        def backward(g):
            full = np.zeros_like(weight.data)
            np.add.at(full, ids, g)
            return (full,)

        tape.record(out, (weight,), backward)
    return out


def cross_entropy(logits: Tensor, targets, ignore_index: Optional[int] = None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under ``softmax(logits)``.

    Rows whose target equals ``ignore_index`` contribute neither loss nor
    gradient; the mean is taken over the remaining rows.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [batch, classes] logits, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    n, classes = logits.shape
    if targets.shape != (n,):
        raise ShapeError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    keep = np.ones(n, dtype=bool) if ignore_index is None else targets != ignore_index
    if keep.any() and (targets[keep].min() < 0 or targets[keep].max() >= classes):
        raise IndexError(f"target index out of range for {classes} classes")
    count = int(keep.sum())
    if count == 0:
        raise ContractError("cross_entropy received no countable targets")
    safe = np.where(keep, targets, 0)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    picked = logp[np.arange(n), safe]
    out = Tensor(-(picked * keep).sum() / count)
    tape = _recorder(logits)
    if tape is not None:
        def backward(g):
            grad = np.exp(logp)
            grad[np.arange(n), safe] -= 1.0
            grad *= keep[:, None] / count
            return (grad * g,)

        tape.record(out, (logits,), backward)
    return out
