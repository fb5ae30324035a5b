"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a contiguous numpy array.  Every differentiable op
returns a new tensor carrying a graph node (operands plus a backward rule);
:func:`backward` orders those nodes into a :class:`Tape` and sweeps it in
reverse.  Tensors are never mutated by ops.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

from .errors import (
    BackwardTwiceError,
    ContractError,
    InvalidShapeError,
    MissingTapeError,
    NonFiniteError,
    ShapeError,
)
from .rng import Rng

_DTYPES = {"f32": np.float32, "float32": np.float32, "f64": np.float64, "float64": np.float64}


class _State(threading.local):
    def __init__(self):
        self.dtype = np.float32
        self.grad_enabled = True
        self.check_finite = True


_state = _State()


def default_dtype():
    return _state.dtype


def resolve_dtype(name) -> type:
    if isinstance(name, str):
        try:
            return _DTYPES[name]
        except KeyError:
            raise ValueError(f"unknown precision {name!r}; use f32 or f64") from None
    return np.dtype(name).type


def set_default_dtype(name) -> None:
    _state.dtype = resolve_dtype(name)


@contextmanager
def precision(name):
    """Temporarily switch the default scalar type (``"f32"`` or ``"f64"``)."""
    old = _state.dtype
    _state.dtype = resolve_dtype(name)
    try:
        yield
    finally:
        _state.dtype = old


@contextmanager
def no_grad():
    old = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = old


def is_grad_enabled() -> bool:
    return _state.grad_enabled


class _Node:
    __slots__ = ("op", "parents", "backward", "released")

    def __init__(self, op, parents, backward):
        self.op = op
        self.parents = parents
        self.backward = backward
        self.released = False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "_retain", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if dtype is not None:
            arr = np.asarray(data, dtype=resolve_dtype(dtype))
        elif isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            arr = data
        else:
            arr = np.asarray(data, dtype=_state.dtype)
        if not arr.flags.c_contiguous:
            arr = arr.copy()  # ascontiguousarray would promote 0-d to 1-d
        if arr.ndim > 4:
            raise InvalidShapeError(f"rank {arr.ndim} exceeds the supported maximum of 4")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None
        self._retain = False
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def retain_grad(self) -> "Tensor":
        """Keep this non-leaf tensor's gradient after backward()."""
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


Operand = Union[Tensor, float, int]


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap an op's output and record its node when any operand needs gradients.

    ``backward(grad)`` must return one gradient (or None) per parent.
    """
    if _state.check_finite and not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(data)
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = _Node(op, tuple(parents), backward)
    return out


def _lift(x: Operand, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


# ---------------------------------------------------------------- creation

@dataclass(frozen=True)
class Zeros:
    pass


@dataclass(frozen=True)
class Constant:
    value: float


@dataclass(frozen=True)
class Uniform:
    seed: Union[int, Rng]
    lo: float = 0.0
    hi: float = 1.0


@dataclass(frozen=True)
class KaimingNormal:
    seed: Union[int, Rng]
    fan_in: int


def _as_rng(seed) -> Rng:
    return seed if isinstance(seed, Rng) else Rng(seed)


def create(shape, init=Zeros(), requires_grad: bool = False, dtype=None) -> Tensor:
    """Allocate a tensor of ``shape`` filled according to ``init``.

    >>> create([3], Constant(1.0)).data.tolist()
    [1.0, 1.0, 1.0]
    """
    shape = tuple(int(d) for d in shape)
    if not shape or any(d < 1 for d in shape):
        raise InvalidShapeError(f"invalid shape {list(shape)}: need at least one dimension, all >= 1")
    dt = resolve_dtype(dtype) if dtype is not None else _state.dtype
    n = int(np.prod(shape))
    if isinstance(init, Zeros):
        arr = np.zeros(shape, dt)
    elif isinstance(init, Constant):
        arr = np.full(shape, init.value, dt)
    elif isinstance(init, Uniform):
        arr = _as_rng(init.seed).uniform(n, init.lo, init.hi).reshape(shape).astype(dt)
    elif isinstance(init, KaimingNormal):
        if init.fan_in < 1:
            raise ContractError("kaiming fan_in must be >= 1")
        std = np.sqrt(2.0 / init.fan_in)
        arr = (_as_rng(init.seed).normal(n) * std).reshape(shape).astype(dt)
    else:
        raise ContractError(f"unknown initializer {init!r}")
    return Tensor(arr, requires_grad=requires_grad)


# ---------------------------------------------------------------- element-wise

def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: shape mismatch {list(a.shape)} vs {list(b.shape)}")


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    # scalar-tensor broadcasting is the only kind allowed
    if t.ndim == 0 and g.ndim != 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    return g


def add(a: Operand, b: Operand) -> Tensor:
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)
    _check_same(a, b, "add")

    def backward(g):
        return _reduce_to(g, a), _reduce_to(g, b)

    return make_result(a.data + b.data, (a, b), backward, "add")


def sub(a: Operand, b: Operand) -> Tensor:
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)
    _check_same(a, b, "sub")

    def backward(g):
        return _reduce_to(g, a), _reduce_to(-g, b)

    return make_result(a.data - b.data, (a, b), backward, "sub")


def mul(a: Operand, b: Operand) -> Tensor:
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)
    _check_same(a, b, "mul")

    def backward(g):
        ga = _reduce_to(g * b.data, a) if a.requires_grad else None
        gb = _reduce_to(g * a.data, b) if b.requires_grad else None
        return ga, gb

    return make_result(a.data * b.data, (a, b), backward, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {list(a.shape)} and {list(b.shape)}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {list(a.shape)} @ {list(b.shape)}")

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return make_result(a.data @ b.data, (a, b), backward, "matmul")


def tsum(x: Tensor) -> Tensor:
    def backward(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return make_result(np.asarray(x.data.sum(), dtype=x.dtype), (x,), backward, "sum")


def mean(x: Tensor) -> Tensor:
    n = x.size

    def backward(g):
        return (np.full(x.shape, g / n, dtype=x.dtype),)

    return make_result(np.asarray(x.data.mean(), dtype=x.dtype), (x,), backward, "mean")


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {list(x.shape)} to {list(shape)}") from exc

    def backward(g):
        return (g.reshape(x.shape),)

    return make_result(out, (x,), backward, "reshape")


def select(x: Tensor, index) -> Tensor:
    """Differentiable ``x[index]`` for basic (non-fancy) indexing."""
    out = np.ascontiguousarray(x.data[index])

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return make_result(out, (x,), backward, "select")


# ---------------------------------------------------------------- tape / backward

@dataclass
class Tape:
    """Recorded ops reachable from one output, in topological order."""

    tensors: list

    def __len__(self):
        return len(self.tensors)

    def is_topological(self) -> bool:
        pos = {id(t): i for i, t in enumerate(self.tensors)}
        for i, t in enumerate(self.tensors):
            if t._node is None:
                continue
            for p in t._node.parents:
                if p._node is not None and pos.get(id(p), len(self.tensors)) >= i:
                    return False
        return True


def build_tape(root: Tensor) -> Tape:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for p in t._node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return Tape(order)


def backward(loss: Tensor, retain_graph: bool = False) -> dict:
    """Reverse sweep from a scalar ``loss``.

    Leaf gradients accumulate into ``.grad``; the returned map holds the
    gradient contributed by this call for every leaf that requires one.
    """
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {list(loss.shape)}")
    if loss._node is None:
        raise MissingTapeError("loss was not produced by recorded ops (detached or grad disabled)")
    if loss._node.released:
        raise BackwardTwiceError("graph already consumed by a previous backward(); re-run the forward pass")
    tape = build_tape(loss)
    grads = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    leaves = {}
    for t in reversed(tape.tensors):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        node = t._node
        if node is None:
            leaves[id(t)] = (t, g)
            continue
        if t._retain:
            t.grad = g
        for p, pg in zip(node.parents, node.backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
        if not retain_graph:
            node.released = True
            node.backward = None
            node.parents = ()
    out = {}
    for t, g in leaves.values():
        g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
        t.grad = g.copy() if t.grad is None else t.grad + g
        out[t] = Tensor(g)
    return out
