"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers its
inputs and a closure mapping the output gradient to input gradients. The tape
is rebuilt on every forward pass; :func:`backward` walks it once in reverse
topological order.

Broadcasting is deliberately narrow: :func:`add` accepts a 1-D right operand
matching the trailing dimension (bias addition) and nothing else.
"""

from __future__ import annotations

import contextlib
import math
import threading
import warnings
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ComputeGraph",
    "ShapeError",
    "EmptyTargetWarning",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "add",
    "sub",
    "multiply",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "softmax",
    "layer_norm",
    "gelu",
    "relu",
    "embedding_lookup",
    "concat",
    "slice_axis",
    "masked_fill",
    "sum_all",
    "dropout",
    "cross_entropy",
    "backward",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class EmptyTargetWarning(UserWarning):
    """Every target position was ignored; the loss is an empty sum."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference)."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    """A float64 array with an optional gradient buffer.

    Parameters
    ----------
    data : array_like
        Values; copied into a C-contiguous float64 array.
    requires_grad : bool, default False
        Whether gradients should be accumulated into ``grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op: str = "leaf"):
        arr = np.array(data, dtype=np.float64, copy=True, order="C")
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], None] | None = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return multiply(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self) -> Tensor:
        return sum_all(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], grad_fn, op: str) -> Tensor:
    """Wrap an op output; attach the tape entry only when someone needs it."""
    track = is_grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data if data.dtype == np.float64 else data.astype(np.float64)
    out.grad = None
    out.requires_grad = track
    out.op = op
    if track:
        out._parents = tuple(parents)
        out._backward = grad_fn
    else:
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------------------
# graph traversal


@dataclass
class ComputeGraph:
    """Tape reachable from an output, in topological order (inputs first)."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> ComputeGraph:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf]


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every leaf reachable from a scalar ``loss``.

    Leaf gradients accumulate across calls; interior buffers are reset so the
    same graph can be differentiated again.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    graph = ComputeGraph.from_output(loss)
    for node in graph.nodes:
        if not node.is_leaf:
            node.grad = None
    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(graph.nodes):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape == b.shape:
        def grad_fn(g):
            if a.requires_grad:
                a._accumulate(g)
            if b.requires_grad:
                b._accumulate(g)
        return _result(a.data + b.data, (a, b), grad_fn, "add")
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        def grad_fn(g):
            if a.requires_grad:
                a._accumulate(g)
            if b.requires_grad:
                b._accumulate(g.reshape(-1, b.shape[0]).sum(axis=0))
        return _result(a.data + b.data, (a, b), grad_fn, "add_bias")
    raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"cannot subtract shapes {a.shape} and {b.shape}")

    def grad_fn(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)
    return _result(a.data - b.data, (a, b), grad_fn, "sub")


def multiply(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")

    def grad_fn(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)
    return _result(a.data * b.data, (a, b), grad_fn, "multiply")


def scale(a: Tensor, c: float) -> Tensor:
    def grad_fn(g):
        a._accumulate(g * c)
    return _result(a.data * c, (a,), grad_fn, "scale")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd ** 3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def grad_fn(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * xd ** 2)
        x._accumulate(g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * d_inner))
    return _result(out, (x,), grad_fn, "gelu")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def grad_fn(g):
        x._accumulate(g * mask)
    return _result(np.where(mask, x.data, 0.0), (x,), grad_fn, "relu")


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true; they receive no gradient.

    ``mask`` must broadcast to ``x.shape`` (it is a constant, not a tensor).
    """
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)

    def grad_fn(g):
        x._accumulate(np.where(mask, 0.0, g))
    return _result(np.where(mask, value, x.data), (x,), grad_fn, "masked_fill")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def grad_fn(g):
        x._accumulate(g * keep)
    return _result(x.data * keep, (x,), grad_fn, "dropout")


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either 2-D (shared across any leading axes of ``a``) or has the
    same leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch mismatch: {a.shape} @ {b.shape}")

    def grad_fn(g):
        if a.requires_grad:
            a._accumulate(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if shared:
                k = a.shape[-1]
                b._accumulate(a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1]))
            else:
                b._accumulate(np.swapaxes(a.data, -1, -2) @ g)
    return _result(a.data @ b.data, (a, b), grad_fn, "matmul")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))

    def grad_fn(g):
        x._accumulate(np.transpose(g, inverse))
    return _result(np.ascontiguousarray(np.transpose(x.data, axes)), (x,), grad_fn, "transpose")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from exc

    def grad_fn(g):
        x._accumulate(g.reshape(x.shape))
    return _result(out, (x,), grad_fn, "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    axis = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != axis
        ):
            raise ShapeError(f"cannot concat shapes {tensors[0].shape} and {t.shape} on axis {axis}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def grad_fn(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                t._accumulate(g[tuple(index)])
    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, grad_fn, "concat")


def slice_axis(x: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    axis = axis % x.ndim
    if not 0 <= start <= stop <= x.shape[axis]:
        raise ShapeError(f"slice [{start}:{stop}] out of bounds for axis {axis} of {x.shape}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def grad_fn(g):
        full = np.zeros_like(x.data)
        full[index] = g
        x._accumulate(full)
    return _result(np.ascontiguousarray(x.data[index]), (x,), grad_fn, "slice")


def sum_all(x: Tensor) -> Tensor:
    def grad_fn(g):
        x._accumulate(np.full_like(x.data, float(g)))
    return _result(np.array(x.data.sum()), (x,), grad_fn, "sum")


def embedding_lookup(table: Tensor, ids: Sequence[int] | np.ndarray) -> Tensor:
    """Gather rows of ``table``; the backward pass scatter-adds into them."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError(f"ids must be 1-D, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range for embedding table with {table.shape[0]} rows")

    def grad_fn(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        table._accumulate(full)
    return _result(table.data[ids], (table,), grad_fn, "embedding")


# ---------------------------------------------------------------------------
# normalisation and losses


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        x._accumulate(y * (g - (g * y).sum(axis=axis, keepdims=True)))
    return _result(y, (x,), grad_fn, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias {gain.shape}/{bias.shape} do not match width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mu
    var = (centred * centred).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centred * inv_std

    def grad_fn(g):
        if gain.requires_grad:
            gain._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            x._accumulate(
                inv_std
                * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            )
    return _result(xhat * gain.data + bias.data, (x, gain, bias), grad_fn, "layer_norm")


def cross_entropy(
    logits: Tensor,
    targets: Sequence[int] | np.ndarray,
    ignore_index: int = -100,
    reduction: str = "sum",
) -> Tensor:
    """Negative log-likelihood of ``targets`` under ``softmax(logits)``.

    Parameters
    ----------
    logits : Tensor
        Shape ``(T, V)``.
    targets : sequence of int
        Length ``T``; entries equal to ``ignore_index`` contribute nothing.
    reduction : {"sum", "mean"}
        ``"mean"`` divides by the number of non-ignored positions.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (T, V) logits, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    n_pos, vocab = logits.shape
    if targets.shape != (n_pos,):
        raise ShapeError(f"targets of length {targets.shape} do not match logits {logits.shape}")
    keep = targets != ignore_index
    bad = keep & ((targets < 0) | (targets >= vocab))
    if bad.any():
        raise IndexError(f"target {int(targets[bad][0])} outside [0, {vocab})")
    count = int(keep.sum())
    if count == 0:
        warnings.warn("all target positions ignored; loss is 0", EmptyTargetWarning, stacklevel=2)

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    rows = np.nonzero(keep)[0]
    total = -log_p[rows, targets[rows]].sum()
    factor = 1.0 if reduction == "sum" else 1.0 / max(count, 1)
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")

    def grad_fn(g):
        grad = np.exp(log_p)
        grad[rows, targets[rows]] -= 1.0
        grad[~keep] = 0.0
        logits._accumulate(grad * (float(g) * factor))
    return _result(np.array(total * factor), (logits,), grad_fn, "cross_entropy")

