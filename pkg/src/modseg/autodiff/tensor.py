"""Dense tensors and the operation tape used for reverse-mode differentiation.

Ops record themselves on the innermost active :class:`Tape` (entered with a
``with`` block) whenever at least one input requires a gradient.  Calling
:func:`backward` replays the tape in reverse.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import ContractError

_state = threading.local()


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


def set_default_dtype(dtype) -> None:
    _state.dtype = np.dtype(dtype)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the storage dtype of newly created tensors.

    ``precision(np.float64)`` is the 64-bit test mode.
    """
    old = default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


class Tensor:
    """A dense array plus optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=default_dtype(), order="C")
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag}, requires_grad={self.requires_grad})"

    # arithmetic sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def sum(self):
        from . import ops
        return ops.sum(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Record:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Tape:
    """Ordered log of executed ops.  Single-owner; do not share across threads."""

    records: list = field(default_factory=list)
    _outputs: set = field(default_factory=set, repr=False)

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def record(self, op: str, inputs: tuple, output: Tensor, backward) -> None:
        key = id(output)
        if key in self._outputs:
            raise ContractError(f"tensor already produced by a recorded op ({op})")
        self._outputs.add(key)
        self.records.append(Record(op, inputs, output, backward))

    def clear(self) -> None:
        self.records.clear()
        self._outputs.clear()

    def __len__(self) -> int:
        return len(self.records)


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def current_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def make_result(op: str, data: np.ndarray, inputs: tuple, backward) -> Tensor:
    """Wrap ``data`` as an op output and record it if any input needs a gradient.

    ``backward(g)`` must return one gradient array (or None) per input.
    """
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(op, inputs, out, backward)
    return out


def backward(loss: Tensor, tape: Optional[Tape] = None) -> dict:
    """Propagate d(loss)/d(.) through ``tape`` and clear it.

    Leaf tensors (not produced by a recorded op) accumulate into ``.grad``, so
    calling this once per sample implements gradient accumulation.  Returns a
    mapping ``id(tensor) -> gradient`` for every leaf that received one.
    """
    tape = tape if tape is not None else current_tape()
    if tape is None:
        raise ContractError("backward() needs a tape")
    if loss.data.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    if id(loss) not in tape._outputs:
        raise ContractError("loss was not produced on this tape")

    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        rec.output.grad = g
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if key not in tape._outputs:
                leaves[key] = inp

    out = {}
    for key, t in leaves.items():
        g = np.asarray(grads[key], dtype=t.data.dtype)
        if t.grad is None:
            t.grad = g.copy()
        else:
            t.grad = t.grad + g
        out[key] = t.grad
    tape.clear()
    return out
