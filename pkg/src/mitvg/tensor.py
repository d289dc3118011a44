"""Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array (float32 for training, float64 for
verification).  Primitive operations are plain functions; while a ``Tape``
is active, any primitive touching a tensor that requires gradients records
a node with its backward rule, and ``backward`` replays the nodes in
reverse execution order, summing gradients into ``Tensor.grad``.

Broadcasting is deliberately restricted: ``add`` accepts a 1-D bias over
the rows of a 2-D matrix, everything else requires exact shape agreement.
Silent shape coercion is the main source of bugs in small numeric code,
so mismatches raise ``ShapeError`` naming both shapes.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, ShapeError

DEFAULT_DTYPE = np.float32


class Tensor:
    """N-dimensional real array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}{flag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return subtract(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return hadamard(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


class _Node:
    __slots__ = ("out", "inputs", "backward_rule")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor], backward_rule: Callable):
        self.out = out
        self.inputs = inputs
        self.backward_rule = backward_rule


class Tape:
    """Execution-ordered record of primitive operations.

    Use as a context manager around a forward pass; ``backward`` then
    replays the recorded rules in reverse.  Tapes nest (the innermost
    active tape records); a tape and its tensors belong to one thread.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _TAPE_STACK.pop()

    def __len__(self) -> int:
        return len(self.nodes)


_TAPE_STACK: list[Tape] = []


def _active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _maybe_record(out: Tensor, inputs: Sequence[Tensor], backward_rule: Callable) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(out, inputs, backward_rule))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``grad`` for every tensor the loss depends on.

    Gradients sum across multiple uses of a tensor and across repeated
    ``backward`` calls; callers zero parameter grads between steps.
    """
    if loss.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {tuple(loss.shape)}")
    if tape.nodes and not any(node.out is loss for node in tape.nodes):
        raise ContractError("loss tensor was not produced on this tape")
    if loss.grad is None:
        loss.grad = np.zeros_like(loss.data)
    loss.grad = loss.grad + np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        out_grad = node.out.grad
        if out_grad is None:
            continue
        input_grads = node.backward_rule(out_grad)
        for tensor, grad in zip(node.inputs, input_grads):
            if grad is None or not tensor.requires_grad:
                continue
            if tensor.grad is None:
                tensor.grad = np.zeros_like(tensor.data)
            tensor.grad += grad


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {tuple(a.shape)} and {tuple(b.shape)}")
    out = Tensor(a.data @ b.data)

    def rule(g):
        return (g @ b.data.T, a.data.T @ g)

    return _maybe_record(out, (a, b), rule)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape == b.shape:
        out = Tensor(a.data + b.data)

        def rule(g):
            return (g, g)

    elif a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        # bias vector broadcast over the rows of a matrix
        out = Tensor(a.data + b.data)

        def rule(g):
            return (g, g.sum(axis=0))

    else:
        raise ShapeError(f"add: incompatible shapes {tuple(a.shape)} and {tuple(b.shape)}")
    return _maybe_record(out, (a, b), rule)


def subtract(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"subtract: incompatible shapes {tuple(a.shape)} and {tuple(b.shape)}")
    out = Tensor(a.data - b.data)

    def rule(g):
        return (g, -g)

    return _maybe_record(out, (a, b), rule)


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"hadamard: incompatible shapes {tuple(a.shape)} and {tuple(b.shape)}")
    out = Tensor(a.data * b.data)

    def rule(g):
        return (g * b.data, g * a.data)

    return _maybe_record(out, (a, b), rule)


def scale(a: Tensor, k: float) -> Tensor:
    out = Tensor(a.data * a.data.dtype.type(k))

    def rule(g):
        return (g * a.data.dtype.type(k),)

    return _maybe_record(out, (a,), rule)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {tuple(a.shape)}")
    out = Tensor(a.data.T.copy())

    def rule(g):
        return (g.T,)

    return _maybe_record(out, (a,), rule)


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape).copy())

    def rule(g):
        return (g.reshape(a.shape),)

    return _maybe_record(out, (a,), rule)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    if not parts:
        raise ShapeError("concat of zero tensors")
    if axis not in (0, 1):
        raise ShapeError(f"concat: axis must be 0 or 1, got {axis}")
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def rule(g):
        if axis == 0:
            return tuple(g[offsets[i]:offsets[i + 1], ...] for i in range(len(parts)))
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _maybe_record(out, tuple(parts), rule)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.ndim != 2 or not (0 <= start < stop <= a.shape[1]):
        raise ShapeError(f"slice_cols[{start}:{stop}] invalid for shape {tuple(a.shape)}")
    out = Tensor(a.data[:, start:stop].copy())

    def rule(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return _maybe_record(out, (a,), rule)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = Tensor(y)

    def rule(g):
        return (g * y * (1.0 - y),)

    return _maybe_record(out, (a,), rule)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = Tensor(np.where(mask, a.data, a.data.dtype.type(0)))

    def rule(g):
        return (g * mask,)

    return _maybe_record(out, (a,), rule)


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(np.asarray(a.data.sum(), dtype=a.data.dtype))

    def rule(g):
        return (np.full_like(a.data, g),)

    return _maybe_record(out, (a,), rule)


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    out = Tensor(np.asarray(a.data.mean(), dtype=a.data.dtype))

    def rule(g):
        return (np.full_like(a.data, g / n),)

    return _maybe_record(out, (a,), rule)


def _check_axis(a: Tensor, axis: int) -> int:
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {tuple(a.shape)}")
    axis = axis % a.ndim
    if a.shape[axis] == 0:
        raise ShapeError(f"empty axis {axis} for shape {tuple(a.shape)}")
    return axis


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis``, stabilized by max subtraction."""
    axis = _check_axis(a, axis)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    y = ex / ex.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def rule(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _maybe_record(out, (a,), rule)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Log-probabilities computed directly, never as log(softmax(x))."""
    axis = _check_axis(a, axis)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = Tensor(logp)

    def rule(g):
        return (g - np.exp(logp) * g.sum(axis=axis, keepdims=True),)

    return _maybe_record(out, (a,), rule)


def embedding(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows of ``table``; gradients scatter-add back."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1 or idx.size == 0:
        raise ContractError("embedding expects a non-empty 1-D id list")
    if idx.min() < 0 or idx.max() >= table.shape[0]:
        raise ContractError(
            f"embedding id out of range [0, {table.shape[0]}): {int(idx.min())}..{int(idx.max())}"
        )
    out = Tensor(table.data[idx].copy())

    def rule(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return _maybe_record(out, (table,), rule)


def pick(a: Tensor, ids: Sequence[int]) -> Tensor:
    """Per-row element gather: out[i] = a[i, ids[i]]."""
    idx = np.asarray(ids, dtype=np.int64)
    if a.ndim != 2 or idx.shape != (a.shape[0],):
        raise ShapeError(f"pick: need one index per row of {tuple(a.shape)}")
    if idx.min() < 0 or idx.max() >= a.shape[1]:
        raise ContractError(f"pick index out of range for {a.shape[1]} columns")
    rows = np.arange(a.shape[0])
    out = Tensor(a.data[rows, idx].copy())

    def rule(g):
        full = np.zeros_like(a.data)
        full[rows, idx] = g
        return (full,)

    return _maybe_record(out, (a,), rule)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise layer normalization over the last axis."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = centered * inv
    out = Tensor(xhat * gain.data + bias.data)

    def rule(g):
        reduce_axes = tuple(range(x.ndim - 1))
        dgain = (g * xhat).sum(axis=reduce_axes)
        dbias = g.sum(axis=reduce_axes)
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return (dx, dgain, dbias)

    return _maybe_record(out, (x, gain, bias), rule)


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` evaluates the scalar objective from the current parameter values
    and must be deterministic (checked by comparing two forward passes).
    Run at float64; finite differences are unreliable at float32.
    """
    first = f().item()
    second = f().item()
    if first != second:
        raise ContractError("grad_check requires a deterministic objective")

    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    backward(loss, tape)
    analytic = []
    for p in params:
        if p.grad is None:
            analytic.append(np.zeros_like(p.data))
        else:
            analytic.append(p.grad.copy())

    worst = 0.0
    for p, g_ad in zip(params, analytic):
        flat = p.data.reshape(-1)
        g_flat = g_ad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = f().item()
            flat[i] = orig - h
            f_minus = f().item()
            flat[i] = orig
            g_fd = (f_plus - f_minus) / (2.0 * h)
            denom = max(1.0, abs(g_flat[i]), abs(g_fd))
            worst = max(worst, abs(g_flat[i] - g_fd) / denom)
    return worst
