"""Tensor, Parameter and Tape: the recording side of reverse-mode autodiff."""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

_state = threading.local()


class DimensionError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    """A kernel produced NaN or Inf."""


def get_default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _state.dtype = dtype


@contextmanager
def default_dtype(dtype) -> Iterator[None]:
    previous = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = previous


class Tensor:
    """Dense row-major array that can take part in a :class:`Tape`."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = get_default_dtype()
        arr = np.asarray(data, dtype=dtype)
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar; the kernels live in ops.py
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


class Parameter(Tensor):
    """Named trainable leaf. ``grad`` always has the value's shape."""

    def __init__(self, name: str, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


@dataclass
class TapeEntry:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; kernels executed inside the block append an
    entry whenever one of their inputs requires a gradient.
    """

    entries: list[TapeEntry] = field(default_factory=list)

    def __post_init__(self):
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        assert stack and stack[-1] is self, "tape stack corrupted"
        stack.pop()

    def record(self, op, inputs, output, backward_fn) -> None:
        key = id(output)
        assert key not in self._produced, f"{op}: output recorded twice (cycle)"
        self._produced.add(key)
        self.entries.append(TapeEntry(op, tuple(inputs), output, backward_fn))

    def __len__(self) -> int:
        return len(self.entries)


def _tape_stack() -> list[Tape]:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def current_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording (e.g. for evaluation inside a training tape)."""
    saved = list(_tape_stack())
    _state.tapes = []
    try:
        yield
    finally:
        _state.tapes = saved


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-accumulate ``d loss / d leaf`` for every leaf on ``tape``.

    Leaves are tensors with ``requires_grad`` that were consumed by a recorded
    op but not produced by one. Each leaf gets ``.grad`` assigned (zeros when
    the loss does not depend on it) and the mapping leaf -> gradient is
    returned.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(e.output) for e in tape.entries}
    if id(loss) not in produced:
        raise ValueError("loss was not produced on this tape")

    # Topological check: inputs are either leaves or outputs of earlier entries.
    seen: set[int] = set()
    for entry in tape.entries:
        for inp in entry.inputs:
            if id(inp) in produced:
                assert id(inp) in seen, f"{entry.op}: input produced later on the tape (cycle)"
        seen.add(id(entry.output))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for entry in reversed(tape.entries):
        g = grads.pop(id(entry.output), None)
        for inp in entry.inputs:
            if inp.requires_grad and id(inp) not in produced:
                leaves.setdefault(id(inp), inp)
        if g is None:
            continue
        input_grads = entry.backward(g)
        for inp, gi in zip(entry.inputs, input_grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi

    result: dict[Tensor, np.ndarray] = {}
    for key, leaf in leaves.items():
        g = grads.get(key)
        g = np.zeros_like(leaf.data) if g is None else g.astype(leaf.dtype, copy=False)
        leaf.grad = g
        result[leaf] = g
    return result
