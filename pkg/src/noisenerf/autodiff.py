"""Dense float32 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`GradTape` only
when at least one input requires a gradient, so evaluation outside a tape
runs as plain numpy. Broadcasting is limited to scalar-with-tensor; the two
structured cases the renderer needs (bias add, per-sample weighting) are
their own primitives (:func:`linear`, :func:`weighted_sum`).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "GradTape",
    "AdamState",
    "adam_step",
    "backward",
    "add",
    "sub",
    "mul",
    "neg",
    "exp",
    "sin",
    "cos",
    "relu",
    "sigmoid",
    "softplus",
    "squareplus",
    "square",
    "elementwise",
    "matmul",
    "linear",
    "sum",
    "mean",
    "reshape",
    "concat",
    "take",
    "exclusive_cumsum",
    "weighted_sum",
    "mse",
]

_F32 = np.float32
_local = threading.local()


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class Tensor:
    """Row-major float32 array, optionally a differentiation leaf."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=_F32)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor data must be finite")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        # internal results skip the copy and the finiteness scan
        obj = object.__new__(cls)
        arr = np.asarray(arr, dtype=_F32)
        if arr.flags.writeable and arr.flags.owndata:
            arr.flags.writeable = False
        obj.data = arr
        obj.requires_grad = requires_grad
        return obj

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar()

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _not_scalar():
    raise ShapeError("item() requires a single-element tensor")


@dataclass
class _Node:
    out: Tensor
    inputs: tuple
    vjp: Callable[[np.ndarray], tuple]


class GradTape:
    """Ordered record of primitive operations, consumed by :meth:`backward`.

    Use as a context manager; operations executed inside the ``with`` block
    on tensors that require gradients are appended in execution order, which
    is a valid topological order. A tape has a single writer.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._ids: set[int] = set()

    def __enter__(self) -> "GradTape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def _record(self, out: Tensor, inputs: tuple, vjp) -> None:
        self.nodes.append(_Node(out, inputs, vjp))
        self._ids.add(id(out))

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._ids

    def backward(self, root: Tensor) -> dict:
        """Gradients of scalar ``root`` with respect to every requires-grad leaf.

        Returns a dict keyed by leaf :class:`Tensor` (identity) holding numpy
        arrays of the leaf's shape. Leaves that feed the tape but not the
        root receive zeros.
        """
        if root.data.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
        if id(root) not in self._ids and not root.requires_grad:
            raise ValueError("root tensor was not produced on this tape")

        grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape, dtype=_F32)}
        leaves: dict[int, Tensor] = {}
        if root.requires_grad and id(root) not in self._ids:
            leaves[id(root)] = root

        for node in reversed(self.nodes):
            for t in node.inputs:
                if isinstance(t, Tensor) and t.requires_grad and id(t) not in self._ids:
                    leaves[id(t)] = t
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for t, gt in zip(node.inputs, node.vjp(g)):
                if gt is None or not (isinstance(t, Tensor) and t.requires_grad):
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gt
                else:
                    grads[key] = np.asarray(gt, dtype=_F32)

        return {
            t: grads.get(key, np.zeros(t.shape, dtype=_F32)).astype(_F32, copy=False)
            for key, t in leaves.items()
        }

    def gradient(self, root: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        gmap = self.backward(root)
        return [gmap.get(s, np.zeros(s.shape, dtype=_F32)) for s in sources]


def backward(root: Tensor, tape: GradTape) -> dict:
    return tape.backward(root)


def _active_tape() -> GradTape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _emit(arr: np.ndarray, inputs: tuple, vjp) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    if needs:
        tape = _active_tape()
        if tape is None:
            return Tensor._wrap(arr)
        out = Tensor._wrap(arr, True)
        tape._record(out, inputs, vjp)
        return out
    return Tensor._wrap(arr)


# ---------------------------------------------------------------- elementwise


def _is_scalar(t: Tensor) -> bool:
    return t.data.size == 1 and t.data.ndim <= 1


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> tuple:
    if a.shape == b.shape:
        return a.shape
    if _is_scalar(b):
        return a.shape
    if _is_scalar(a):
        return b.shape
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not match")


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum(), dtype=_F32).reshape(t.shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "add")
    out = a.data + b.data
    return _emit(out, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(g, b)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "sub")
    out = a.data - b.data
    return _emit(out, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(-g, b)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "mul")
    out = a.data * b.data
    return _emit(
        out, (a, b), lambda g: (_reduce_to(g * b.data, a), _reduce_to(g * a.data, b))
    )


def neg(x) -> Tensor:
    x = _as_tensor(x)
    return _emit(-x.data, (x,), lambda g: (-g,))


def exp(x) -> Tensor:
    x = _as_tensor(x)
    out = np.exp(x.data)
    return _emit(out, (x,), lambda g: (g * out,))


def sin(x) -> Tensor:
    x = _as_tensor(x)
    return _emit(np.sin(x.data), (x,), lambda g: (g * np.cos(x.data),))


def cos(x) -> Tensor:
    x = _as_tensor(x)
    return _emit(np.cos(x.data), (x,), lambda g: (-g * np.sin(x.data),))


def relu(x) -> Tensor:
    x = _as_tensor(x)
    out = np.maximum(x.data, _F32(0))
    return _emit(out, (x,), lambda g: (np.where(x.data > 0, g, _F32(0)),))


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    return (_F32(0.5) * (_F32(1) + np.tanh(_F32(0.5) * z))).astype(_F32, copy=False)


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    out = _sigmoid_np(x.data)
    return _emit(out, (x,), lambda g: (g * out * (_F32(1) - out),))


def softplus(x) -> Tensor:
    x = _as_tensor(x)
    out = np.logaddexp(_F32(0), x.data)
    return _emit(out, (x,), lambda g: (g * _sigmoid_np(x.data),))


def squareplus(x, b: float = 4.0) -> Tensor:
    """Smooth non-negative map ``(x + sqrt(x^2 + b)) / 2``; its slope decays only as 1/x^2."""
    x = _as_tensor(x)
    root = np.sqrt(x.data * x.data + _F32(b))
    out = _F32(0.5) * (x.data + root)
    return _emit(out, (x,), lambda g: (g * _F32(0.5) * (_F32(1) + x.data / root),))


def square(x) -> Tensor:
    x = _as_tensor(x)
    return _emit(x.data * x.data, (x,), lambda g: (_F32(2) * g * x.data,))


_UNARY = {
    "neg": neg,
    "exp": exp,
    "sin": sin,
    "cos": cos,
    "relu": relu,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "squareplus": squareplus,
    "square": square,
}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(kind: str, x, y=None) -> Tensor:
    """Dispatch by name; binary kinds require ``y``."""
    if kind in _BINARY:
        if y is None:
            raise ValueError(f"{kind} needs two operands")
        return _BINARY[kind](x, y)
    if kind in _UNARY:
        return _UNARY[kind](x)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        return (g @ b.data.T if a.requires_grad else None,
                a.data.T @ g if b.requires_grad else None)

    return _emit(out, (a, b), vjp)


def linear(x, w, b) -> Tensor:
    """``x @ w + b`` with ``b`` broadcast over rows."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: cannot multiply {x.shape} by {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias shape {b.shape} != ({w.shape[1]},)")
    out = x.data @ w.data
    out += b.data

    def vjp(g):
        # frozen weights are the common case when optimising inputs
        return (g @ w.data.T if x.requires_grad else None,
                x.data.T @ g if w.requires_grad else None,
                g.sum(axis=0) if b.requires_grad else None)

    return _emit(out, (x, w, b), vjp)


# ---------------------------------------------------------------- reductions and layout


def sum(x, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = _as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis), dtype=_F32)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).astype(_F32),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).astype(_F32),)

    return _emit(out, (x,), vjp)


def mean(x) -> Tensor:
    x = _as_tensor(x)
    n = _F32(x.data.size)
    out = np.asarray(x.data.mean(dtype=_F32), dtype=_F32)
    return _emit(out, (x,), lambda g: (np.full(x.shape, g / n, dtype=_F32),))


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    out = x.data.reshape(shape)
    return _emit(out, (x,), lambda g: (g.reshape(x.shape),))


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = tuple(_as_tensor(t) for t in xs)
    out = np.concatenate([t.data for t in xs], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in xs])[:-1]
    return _emit(out, xs, lambda g: tuple(np.split(g, splits, axis=axis)))


def take(x, index, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in the backward pass."""
    x = _as_tensor(x)
    index = np.asarray(index, dtype=np.intp)
    out = np.take(x.data, index, axis=axis)

    def vjp(g):
        full = np.zeros(x.shape, dtype=_F32)
        if axis == 0:
            np.add.at(full, index, g)
        else:
            np.add.at(np.moveaxis(full, axis, 0), index, np.moveaxis(g, axis, 0))
        return (full,)

    return _emit(out, (x,), vjp)


def exclusive_cumsum(x) -> Tensor:
    """Running sum along the last axis, excluding the current element."""
    x = _as_tensor(x)
    # shift-then-sum; inclusive-minus-self cancels catastrophically next to huge entries
    out = np.zeros_like(x.data)
    np.cumsum(x.data[..., :-1], axis=-1, dtype=_F32, out=out[..., 1:])

    def vjp(g):
        gx = np.zeros_like(g)
        rev = np.cumsum(np.flip(g[..., 1:], -1), axis=-1, dtype=_F32)
        gx[..., :-1] = np.flip(rev, -1)
        return (gx,)

    return _emit(out, (x,), vjp)


def weighted_sum(weights, values) -> Tensor:
    """Contract ``weights[..., n]`` against ``values[..., n, c]`` to ``[..., c]``."""
    w, v = _as_tensor(weights), _as_tensor(values)
    if v.data.ndim != w.data.ndim + 1 or v.shape[:-1] != w.shape:
        raise ShapeError(f"weighted_sum: weights {w.shape} vs values {v.shape}")
    out = np.einsum("...n,...nc->...c", w.data, v.data).astype(_F32, copy=False)
    return _emit(
        out,
        (w, v),
        lambda g: (
            np.einsum("...c,...nc->...n", g, v.data).astype(_F32, copy=False),
            (w.data[..., None] * g[..., None, :]).astype(_F32, copy=False),
        ),
    )


def mse(pred, target) -> Tensor:
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: shapes {pred.shape} and {target.shape} differ")
    return mean(square(sub(pred, target)))


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    """Moment estimates for one parameter tensor.

    ``row_steps`` is only populated by row-sparse updates; it holds a per-row
    step count so rows first touched late still get a full bias correction.
    """

    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    row_steps: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def zeros_like(cls, param: Tensor, **kw) -> "AdamState":
        return cls(
            np.zeros(param.shape, dtype=_F32), np.zeros(param.shape, dtype=_F32), **kw
        )


def adam_step(param: Tensor, grad, state: AdamState, lr: float, rows=None) -> Tensor:
    """One bias-corrected Adam descent step; returns the new parameter tensor.

    ``state`` is updated in place. With ``rows`` given, only those indices of
    the leading axis (and their moments) are touched.
    """
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    g = np.asarray(grad.data if isinstance(grad, Tensor) else grad, dtype=_F32)
    if g.shape != param.shape or state.first_moment.shape != param.shape:
        raise ShapeError(
            f"adam_step: param {param.shape}, grad {g.shape}, "
            f"moments {state.first_moment.shape}"
        )
    b1, b2, eps = state.beta1, state.beta2, state.epsilon
    state.step_count += 1
    p = param.data.copy()

    if rows is None:
        m = state.first_moment = b1 * state.first_moment + (1 - b1) * g
        v = state.second_moment = b2 * state.second_moment + (1 - b2) * g * g
        t = state.step_count
        m_hat = m / _F32(1 - b1**t)
        v_hat = v / _F32(1 - b2**t)
        p -= _F32(lr) * m_hat / (np.sqrt(v_hat) + _F32(eps))
    else:
        rows = np.unique(np.asarray(rows, dtype=np.intp))
        if state.row_steps is None:
            state.row_steps = np.zeros(param.shape[0], dtype=np.int64)
        state.row_steps[rows] += 1
        t = state.row_steps[rows].reshape((-1,) + (1,) * (param.data.ndim - 1))
        gr = g[rows]
        m = b1 * state.first_moment[rows] + (1 - b1) * gr
        v = b2 * state.second_moment[rows] + (1 - b2) * gr * gr
        state.first_moment[rows] = m
        state.second_moment[rows] = v
        m_hat = m / (1 - b1**t).astype(_F32)
        v_hat = v / (1 - b2**t).astype(_F32)
        p[rows] -= _F32(lr) * m_hat / (np.sqrt(v_hat) + _F32(eps))

    return Tensor._wrap(p.astype(_F32, copy=False), param.requires_grad)
