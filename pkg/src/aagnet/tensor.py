"""Dense tensor value type and a reverse-mode tape.

A :class:`Tape` records every differentiable op executed while it is active::

    with Tape() as tape:
        loss = ops.sum(ops.mul(x, x))
    grads = tape.backward(loss)

Ops executed with no active tape are not recorded, which is how inference
avoids holding activations.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class ShapeError(ValueError):
    """Operand shapes do not conform to an op's contract."""


class NonFiniteError(FloatingPointError):
    """A forward or backward computation produced NaN or Inf."""


class TapeError(RuntimeError):
    """Misuse of the tape (non-scalar loss, foreign node, ...)."""


class Tensor:
    """Row-major float32/float64 array with optional gradient tracking.

    The wrapped array is treated as immutable; ops always allocate new
    outputs. Parameters are the only tensors whose ``data`` is replaced,
    and only by the optimizer between steps.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in DTYPES:
            arr = arr.astype(np.float32 if dtype is None else dtype)
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

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

    def detach(self) -> Tensor:
        return Tensor(self.data, name=self.name)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # Operator sugar; implementations live in aagnet.ops.
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


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    index: int = -1
    tape: Tape | None = field(default=None, repr=False)


_active: list[Tape] = []


def active_tape() -> Tape | None:
    return _active[-1] if _active else None


class Tape:
    """Ordered record of ops. Nodes are appended at creation time, so the
    list is already topologically sorted."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _active.append(self)
        return self

    def __exit__(self, *exc):
        popped = _active.pop()
        assert popped is self, "tapes must be exited in LIFO order"
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, node: Node) -> None:
        node.index = len(self.nodes)
        node.tape = self
        self.nodes.append(node)

    def backward(self, loss: Tensor, accumulate: bool = False) -> dict[Tensor, np.ndarray]:
        """Propagate d(loss)/d(.) to every leaf with ``requires_grad``.

        Returns a mapping leaf -> gradient array and also stores each gradient
        on ``leaf.grad`` (added to the existing value if ``accumulate``).
        """
        if loss.size != 1:
            raise TapeError(f"loss must be scalar, got shape {loss.shape}")
        node = loss._node
        if node is None or node.tape is not self:
            raise TapeError("loss tensor was not produced on this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for n in reversed(self.nodes[: node.index + 1]):
            g = grads.pop(id(n.output), None)
            if g is None:
                continue
            in_grads = n.backward_fn(g)
            for inp, ig in zip(n.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if ig.shape != inp.shape:
                    raise ShapeError(f"{n.op}: gradient shape {ig.shape} != input shape {inp.shape}")
                if not np.isfinite(ig).all():
                    raise NonFiniteError(f"non-finite gradient flowing out of {n.op}")
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
                if inp._node is None:
                    leaves[key] = inp

        out: dict[Tensor, np.ndarray] = {}
        for key, leaf in leaves.items():
            g = grads[key].astype(leaf.dtype, copy=False)
            if accumulate and leaf.grad is not None:
                leaf.grad = leaf.grad + g
            else:
                leaf.grad = g
            out[leaf] = leaf.grad
        return out


def record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn) -> Tensor:
    """Wrap ``out_data`` as a Tensor and record it on the active tape if any
    input requires grad. Non-finite outputs are rejected here."""
    if not np.isfinite(out_data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = Node(op, tuple(inputs), out, backward_fn)
        out._node = node
        tape.record(node)
    return out


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float32))
