"""Tensor type and tape-based reverse-mode differentiation.

Operations only record themselves while a :class:`Tape` is active::

    with Tape() as tape:
        loss = (x * x).sum()
    backward(loss, tape)

Outside a tape every op is a plain numpy computation, which is what
inference uses.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NonFiniteError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "precision",
    "default_dtype",
    "finite_checks",
    "as_tensor",
    "record",
]


class _State(threading.local):
    def __init__(self) -> None:
        self.tapes: list[Tape] = []
        self.dtype = np.dtype(np.float32)
        self.check_finite = False


_state = _State()


def default_dtype() -> np.dtype:
    return _state.dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default floating dtype (float64 for grad checks)."""
    prev = _state.dtype
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def finite_checks(enabled: bool = True):
    """Raise :class:`NonFiniteError` naming the first op producing NaN/Inf."""
    prev = _state.check_finite
    _state.check_finite = enabled
    try:
        yield
    finally:
        _state.check_finite = prev


class Node:
    __slots__ = ("name", "inputs", "out", "backward", "tape")

    def __init__(self, name, inputs, out, backward_fn, tape):
        self.name = name
        self.inputs = inputs
        self.out = out
        self.backward = backward_fn
        self.tape = tape


class Tape:
    """Ordered record of differentiable ops executed while active."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _state.tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.tapes.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        for node in self.nodes:
            node.out._node = None
        self.nodes.clear()


def _active_tape() -> Tape | None:
    return _state.tapes[-1] if _state.tapes else None


class Tensor:
    """Dense array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype.kind == "f":
                dtype = data.dtype
            else:
                dtype = _state.dtype
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None

    # -- basic properties -------------------------------------------------
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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operator sugar; implementations live in ops ------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __pow__(self, p):
        from . import ops
        return ops.power(self, p)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=dtype)


def recording(*inputs) -> bool:
    """True when an op on ``inputs`` would be put on the active tape."""
    return _active_tape() is not None and any(getattr(t, "requires_grad", False) for t in inputs)


def record(
    name: str,
    out_data: np.ndarray,
    inputs: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Wrap ``out_data`` and put the op on the active tape when needed.

    ``backward_fn`` maps the output cotangent to one cotangent (or None)
    per input.
    """
    if _state.check_finite and not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"non-finite values produced by op '{name}'")
    out = Tensor(out_data, dtype=out_data.dtype)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = Node(name, tuple(inputs), out, backward_fn, tape)
        out._node = node
        tape.nodes.append(node)
    return out


def backward(loss: Tensor, tape: Tape | None = None, retain: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad.

    Leaves are tensors with ``requires_grad`` that were not produced on the
    tape (parameters, inputs). The tape is reset afterwards unless
    ``retain`` is set.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape if tape is not None else _active_tape()
    if tape is None or loss._node is None or loss._node.tape is not tape:
        raise ContractError("loss was not recorded on the given tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if gi.shape != inp.shape:
                raise ContractError(
                    f"op '{node.name}' returned gradient of shape {gi.shape} "
                    f"for input of shape {inp.shape}"
                )
            if inp._node is None or inp._node.tape is not tape:
                inp.grad = gi.astype(inp.dtype, copy=True) if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
    if not retain:
        tape.reset()
