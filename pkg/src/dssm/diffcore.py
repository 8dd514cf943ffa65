"""Tape-based reverse-mode differentiation over dense float64 arrays.

A :class:`Tape` records every primitive applied while it is active; calling
:meth:`Tape.backward` walks the record in reverse and accumulates adjoints.
Parameters are long-lived leaf tensors; the graph itself is rebuilt on every
forward pass.

Broadcasting is deliberately limited to scalar-vs-tensor. Row-vector biases go
through the explicit :func:`add_row` / :func:`tile_rows` primitives.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "DomainError",
    "NonFiniteError",
    "UsageError",
    "tensor",
    "param",
    "backward",
    "set_debug",
    "matmul",
    "add",
    "subtract",
    "multiply",
    "divide",
    "scale",
    "add_row",
    "tile_rows",
    "concat",
    "stack_rows",
    "slice_cols",
    "slice_rows",
    "reshape",
    "sum",
    "mean",
    "exp",
    "log",
    "sqrt",
    "sigmoid",
    "tanh",
    "softplus",
    "square",
    "clip",
    "numerical_gradient",
    "max_relative_error",
]


class ShapeError(ValueError):
    """Operand shapes do not conform to the primitive."""


class DomainError(ValueError):
    """Input outside the mathematical domain (log of <= 0, divide by 0)."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf was produced while debug checks were enabled."""


class UsageError(RuntimeError):
    """API misuse, e.g. backward from a non-scalar."""


_state = threading.local()
_debug = {"check_finite": False}


def set_debug(check_finite: bool) -> None:
    """Toggle the NaN/Inf check performed after every primitive."""
    _debug["check_finite"] = bool(check_finite)


def _active_tape() -> "Tape | None":
    return getattr(_state, "tape", None)


class Tensor:
    """Immutable float64 array, optionally a trainable leaf."""

    __slots__ = ("data", "trainable", "name", "_tape")

    def __init__(self, values, trainable: bool = False, name: str | None = None):
        data = np.array(values, dtype=np.float64)
        data.setflags(write=False)
        self.data = data
        self.trainable = trainable
        self.name = name
        self._tape = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, trainable={self.trainable})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(values, name: str | None = None) -> Tensor:
    """Constant (non-trainable) tensor."""
    return Tensor(values, trainable=False, name=name)


def param(values, name: str | None = None) -> Tensor:
    """Trainable leaf tensor."""
    return Tensor(values, trainable=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    grad_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of primitives; use as a context manager.

    Tapes nest: entering a tape shadows the previous one until exit.
    """

    nodes: list[_Node] = field(default_factory=list)
    _prev: "Tape | None" = None

    def __enter__(self) -> "Tape":
        self._prev = _active_tape()
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = self._prev
        self._prev = None

    def __len__(self) -> int:
        return len(self.nodes)

    def leaves(self) -> list[Tensor]:
        """Trainable leaves referenced by recorded nodes, first-use order."""
        seen: dict[int, Tensor] = {}
        for node in self.nodes:
            for t in node.inputs:
                if t.trainable and id(t) not in seen:
                    seen[id(t)] = t
        return list(seen.values())

    def backward(self, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[int, Tensor]:
        """Gradients of scalar ``loss`` keyed by ``id(leaf)``.

        ``wrt`` defaults to every trainable leaf on this tape; requested
        leaves the loss does not reach receive exact zeros.
        """
        if loss.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
        targets = self.leaves() if wrt is None else list(wrt)
        adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = adj.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.grad_fn(g)):
                if gi is None:
                    continue
                key = id(inp)
                if key in adj:
                    adj[key] = adj[key] + gi
                else:
                    adj[key] = gi
        out = {}
        for leaf in targets:
            g = adj.get(id(leaf))
            out[id(leaf)] = Tensor(np.zeros_like(leaf.data) if g is None else g)
        return out


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[int, Tensor]:
    """Backward pass on the tape that produced ``loss``."""
    tape = loss._tape
    if tape is None:
        raise UsageError("loss was not recorded on any tape")
    return tape.backward(loss, wrt)


def _record(value: np.ndarray, inputs: tuple[Tensor, ...], grad_fn) -> Tensor:
    if _debug["check_finite"] and not np.all(np.isfinite(value)):
        raise NonFiniteError("non-finite value produced")
    out = Tensor.__new__(Tensor)
    value.setflags(write=False)
    out.data = value
    out.trainable = False
    out.name = None
    out._tape = None
    tape = _active_tape()
    if tape is not None:
        tape.nodes.append(_Node(out, inputs, grad_fn))
        out._tape = tape
    return out


def _is_scalar(t: Tensor) -> bool:
    return t.data.ndim == 0 or t.data.size == 1


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum()).reshape(t.shape)


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not match")


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _record(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "add")
    return _record(a.data + b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(g, b)))


def subtract(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "subtract")
    return _record(a.data - b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(-g, b)))


def multiply(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "multiply")
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (_reduce_to(g * bd, a), _reduce_to(g * ad, b)))


def divide(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "divide")
    if np.any(b.data == 0.0):
        raise DomainError("divide: zero in denominator")
    ad, bd = a.data, b.data
    q = ad / bd
    return _record(q, (a, b), lambda g: (_reduce_to(g / bd, a), _reduce_to(-g * q / bd, b)))


def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)
    return _record(a.data * s, (a,), lambda g: (g * s,))


def add_row(x, row) -> Tensor:
    """``x[batch, n] + row[n]`` with the row repeated over the batch."""
    x, row = _as_tensor(x), _as_tensor(row)
    if x.data.ndim != 2 or row.data.ndim != 1 or x.shape[1] != row.shape[0]:
        raise ShapeError(f"add_row: cannot add row {row.shape} to {x.shape}")
    return _record(x.data + row.data, (x, row), lambda g: (g, g.sum(axis=0)))


def tile_rows(row, n: int) -> Tensor:
    """Repeat a vector ``n`` times into an ``[n, len]`` matrix."""
    row = _as_tensor(row)
    if row.data.ndim != 1:
        raise ShapeError(f"tile_rows: expected a vector, got {row.shape}")
    return _record(np.tile(row.data, (n, 1)), (row,), lambda g: (g.sum(axis=0),))


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    """Concatenate along the last axis (default) or axis 0."""
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat: nothing to concatenate")
    ndim = parts[0].data.ndim
    ax = axis % ndim if ndim else 0
    for p in parts[1:]:
        if p.data.ndim != ndim or any(
            p.shape[k] != parts[0].shape[k] for k in range(ndim) if k != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {[q.shape for q in parts]}")
    bounds = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _record(np.concatenate([p.data for p in parts], axis=ax), tuple(parts), grad_fn)


def stack_rows(parts: Sequence) -> Tensor:
    """Concatenate 2-D tensors along axis 0."""
    return concat(parts, axis=0)


def slice_cols(x, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    n = x.shape[-1]
    if not 0 <= start <= stop <= n:
        raise ShapeError(f"slice_cols: [{start}:{stop}] outside last axis of {x.shape}")

    def grad_fn(g):
        full = np.zeros_like(x.data)
        full[..., start:stop] = g
        return (full,)

    return _record(x.data[..., start:stop].copy(), (x,), grad_fn)


def slice_rows(x, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    n = x.shape[0]
    if not 0 <= start <= stop <= n:
        raise ShapeError(f"slice_rows: [{start}:{stop}] outside first axis of {x.shape}")

    def grad_fn(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        return (full,)

    return _record(x.data[start:stop].copy(), (x,), grad_fn)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    old = x.shape
    return _record(x.data.reshape(shape).copy(), (x,), lambda g: (g.reshape(old),))


def sum(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = _as_tensor(x)
    return _record(np.asarray(x.data.sum()), (x,), lambda g: (np.full_like(x.data, float(g)),))


def mean(x) -> Tensor:
    x = _as_tensor(x)
    n = max(x.size, 1)
    return _record(
        np.asarray(x.data.sum() / n), (x,), lambda g: (np.full_like(x.data, float(g) / n),)
    )


def exp(x) -> Tensor:
    x = _as_tensor(x)
    y = np.exp(x.data)
    return _record(y, (x,), lambda g: (g * y,))


def log(x) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data <= 0.0):
        raise DomainError("log: non-positive input")
    xd = x.data
    return _record(np.log(xd), (x,), lambda g: (g / xd,))


def sqrt(x) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data <= 0.0):
        raise DomainError("sqrt: non-positive input")
    y = np.sqrt(x.data)
    return _record(y, (x,), lambda g: (g * 0.5 / y,))


def _stable_sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    y = _stable_sigmoid(x.data)
    return _record(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    y = np.tanh(x.data)
    return _record(y, (x,), lambda g: (g * (1.0 - y * y),))


def softplus(x) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    y = np.logaddexp(0.0, xd)
    return _record(y, (x,), lambda g: (g * _stable_sigmoid(xd),))


def square(x) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    return _record(xd * xd, (x,), lambda g: (2.0 * g * xd,))


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp into ``[lo, hi]``; the gradient is passed only inside the range."""
    x = _as_tensor(x)
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return _record(np.clip(xd, lo, hi), (x,), lambda g: (g * inside,))


def numerical_gradient(f: Callable[[], float], leaf: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of ``f()`` w.r.t. every entry of ``leaf``.

    ``leaf.data`` is swapped in place for each probe and restored afterwards.
    """
    base = leaf.data.copy()
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)
    for k in range(base.size):
        probe = base.copy().reshape(-1)
        probe[k] += h
        leaf.data = probe.reshape(base.shape)
        fp = f()
        probe[k] -= 2 * h
        leaf.data = probe.reshape(base.shape)
        fm = f()
        flat[k] = (fp - fm) / (2 * h)
    base.setflags(write=False)
    leaf.data = base
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, atol: float = 1e-7) -> float:
    """Largest elementwise relative error, ignoring entries within ``atol``.

    Entries whose absolute difference is below ``atol`` count as exact; this
    keeps near-zero gradients from blowing up the ratio.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    diff = np.abs(a - n)
    denom = np.maximum(np.abs(a), np.abs(n))
    rel = np.where(diff <= atol, 0.0, diff / np.where(denom == 0, 1.0, denom))
    return float(rel.max(initial=0.0))
