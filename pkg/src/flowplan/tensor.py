"""Dense f64 tensors with tape-based reverse-mode differentiation.

Ops record onto the active :class:`Tape` whenever one of their inputs
requires a gradient.  A training step looks like::

    tape = Tape()
    with tape:
        loss = fm_loss(model.forward(t, xt, cond), x0, x1)
    backward(loss, model.params)
    tape.reset()
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

_checked = True
_local = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an op."""

    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        joined = " vs ".join(str(list(s)) for s in shapes)
        super().__init__(f"{op}: shape mismatch {joined}")


class TapeError(RuntimeError):
    pass


def set_checked(flag: bool) -> None:
    """Toggle the finiteness check performed when tensors are built."""
    global _checked
    _checked = bool(flag)


def is_checked() -> bool:
    return _checked


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if _checked and not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite value in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {list(self.shape)}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={list(self.shape)}{tag})"

    __add__ = lambda self, other: add(self, other)  # noqa: E731
    __sub__ = lambda self, other: sub(self, other)  # noqa: E731
    __mul__ = lambda self, other: mul(self, other)  # noqa: E731
    __matmul__ = lambda self, other: matmul(self, other)  # noqa: E731
    __neg__ = lambda self: scale(self, -1.0)  # noqa: E731

    def __getitem__(self, index) -> Tensor:
        return slice_(self, index)

    def reshape(self, *shape) -> Tensor:
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


class Tape:
    """Ordered record of differentiable ops; single-threaded use only."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.spent = False

    def __enter__(self) -> Tape:
        stack = _stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def reset(self) -> None:
        for out, _, _ in self.nodes:
            out._tape = None
        self.nodes = []
        self.spent = False

    def __len__(self) -> int:
        return len(self.nodes)


def _stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], grad_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._tape = None
    tape = active_tape()
    out.requires_grad = tape is not None and any(p.requires_grad for p in parents)
    if out.requires_grad:
        tape.nodes.append((out, parents, grad_fn))
        out._tape = tape
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def add_bias(x, b) -> Tensor:
    """x[..., n] + b[n], broadcasting the bias over leading axes."""
    x, b = as_tensor(x), as_tensor(b)
    if b.data.ndim != 1 or x.shape[-1:] != b.shape:
        raise ShapeError("add_bias", x.shape, b.shape)
    lead = tuple(range(x.data.ndim - 1))
    return _result(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)))


def silu(x) -> Tensor:
    x = as_tensor(x)
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig

    def grad_fn(g):
        return (g * (sig * (1.0 + x.data * (1.0 - sig))),)

    return _result(out, (x,), grad_fn)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return _result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


# ---------------------------------------------------------------- structure

def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ValueError("concat: need at least one tensor")
    nd = ts[0].data.ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.data.ndim != nd or any(
            t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax
        ):
            raise ShapeError("concat", ts[0].shape, t.shape)
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]
    out = np.concatenate([t.data for t in ts], axis=ax)
    return _result(out, ts, lambda g: tuple(np.split(g, bounds, axis=ax)))


def slice_(x, index) -> Tensor:
    x = as_tensor(x)
    out = np.ascontiguousarray(x.data[index])

    def grad_fn(g):
        full = np.zeros_like(x.data)
        full[index] += g
        return (full,)

    return _result(out, (x,), grad_fn)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, tuple(shape)) from None
    src = x.shape
    return _result(out, (x,), lambda g: (g.reshape(src),))


# ---------------------------------------------------------------- reductions

def mean(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.data.size
        return _result(np.asarray(x.data.mean()), (x,), lambda g: (np.full(x.shape, g / n),))
    ax = axis % x.data.ndim
    n = x.shape[ax]
    return _result(
        x.data.mean(axis=ax),
        (x,),
        lambda g: (np.broadcast_to(np.expand_dims(g, ax) / n, x.shape).copy(),),
    )


def sum_(x) -> Tensor:
    x = as_tensor(x)
    return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.full(x.shape, float(g)),))


# ---------------------------------------------------------------- backward

def backward(loss: Tensor, params=None) -> dict[int, np.ndarray]:
    """Propagate d(loss) back through its tape.

    Leaf tensors that require grad get ``.grad`` populated.  When a
    ``ParamStore`` is given, its gradient slots are filled, with zeros for
    parameters the loss does not reach.
    """
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise TapeError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    tape = loss._tape
    if tape is None:
        raise TapeError("loss was not produced by a recorded op")
    if tape.spent:
        raise TapeError("backward already run on this tape; call tape.reset() first")
    tape.spent = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for out, parents, grad_fn in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for parent, pg in zip(parents, grad_fn(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
            if parent._tape is None:
                leaves[key] = parent

    for key, leaf in leaves.items():
        leaf.grad = grads[key]
    if params is not None:
        params.collect_grads(grads)
    return grads
