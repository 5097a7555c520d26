"""Dense tensors with a reverse-mode tape.

Storage is row-major numpy (float32 unless a float64 array is requested
explicitly, which the gradient checks use). Reductions accumulate in float64
and cast back to the storage dtype.

Gradients are only tracked while a :class:`Tape` is active::

    with Tape() as tape:
        loss = ops.sum(ops.mul(x, x))
    backward(loss)
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, NonFiniteError

_ACTIVE_TAPES: list["Tape"] = []
_DEBUG_FINITE = False


def set_debug_finite(enabled: bool) -> None:
    """Toggle NaN/Inf checking on every op output."""
    global _DEBUG_FINITE
    _DEBUG_FINITE = bool(enabled)


def debug_finite_enabled() -> bool:
    return _DEBUG_FINITE


def active_tape() -> Optional["Tape"]:
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if dtype is None:
            dtype = np.float32
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar; implementations live in ops
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

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, key):
        from . import ops
        return ops.index(self, key)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


class _Node:
    __slots__ = ("output", "inputs", "backward_fn", "op")

    def __init__(self, output, inputs, backward_fn, op):
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.op = op


class Tape:
    """Ordered record of differentiable operations for one forward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, output: Tensor, inputs: Sequence[Tensor], backward_fn: Callable, op: str) -> None:
        self.nodes.append(_Node(output, tuple(inputs), backward_fn, op))
        self._produced.add(id(output))
        output._tape = self

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ContractError("loss was not recorded on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data, dtype=np.float64)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            _accumulate(node.output, g)
            in_grads = node.backward_fn(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in self._produced:
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi
                else:
                    _accumulate(t, gi)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``."""
    if not isinstance(loss, Tensor):
        raise ContractError("backward() expects a Tensor")
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise ContractError("loss is not on a tape; run the forward pass inside `with Tape():`")
    loss._tape.backward(loss)


def make_result(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable, op: str,
                dtype=None) -> Tensor:
    """Wrap an op output and, when tracking, put it on the active tape."""
    out_dtype = dtype or (np.result_type(*[t.data.dtype for t in inputs]) if inputs else np.float32)
    out = Tensor(data, dtype=out_dtype)
    if _DEBUG_FINITE and not np.all(np.isfinite(out.data)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward_fn, op)
    return out
