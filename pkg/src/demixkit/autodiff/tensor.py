from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from demixkit.errors import BackwardError, NumericalError

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

_ACTIVE: list["Tape"] = []


class Tensor:
    """Dense float64 array, optionally tracked for reverse-mode gradients.

    Leaves are tensors created directly by the user (parameters, inputs).
    Non-leaf tensors are produced by an op while a :class:`Tape` is active and
    remember the node that created them.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        if not np.isfinite(arr).all():
            raise NumericalError(f"non-finite value in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        from demixkit.autodiff.ops import add

        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        from demixkit.autodiff.ops import sub

        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        from demixkit.autodiff.ops import mul

        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        from demixkit.autodiff.ops import matmul

        return matmul(self, other)


@dataclass(eq=False)
class Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn | None
    op: str


@dataclass
class Tape:
    """Ordered record of the ops executed while the tape is active.

    Use as a context manager::

        with Tape() as tape:
            loss = mae_loss(model(x), y)
        backward(loss, tape)

    A tape can be differentiated once; a second :func:`backward` call raises.
    """

    nodes: list[Node] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def make_result(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn: BackwardFn, op: str) -> Tensor:
    """Wrap an op's output and record it on the active tape if needed."""
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        node = Node(inputs, out, backward_fn, op)
        out._node = node
        tape.nodes.append(node)
    return out


def backward(loss: Tensor, tape: Tape, params: Sequence[Tensor] | None = None) -> list[np.ndarray]:
    """Reverse-mode sweep over ``tape`` seeded with d(loss)/d(loss) = 1.

    Gradients of every leaf that requires grad are reset and then written to
    ``.grad``. Leaves listed in ``params`` but not reached get zero gradients.
    Returns the gradients of ``params`` (or of all reached leaves, in tape
    order, when ``params`` is None).
    """
    if loss.data.size != 1:
        raise BackwardError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise BackwardError("tape already differentiated; record a fresh tape")
    on_tape = loss._node is not None and any(n is loss._node for n in tape.nodes)
    if not on_tape and not (loss.requires_grad and loss._node is None):
        raise BackwardError("loss is not on the tape")

    leaves: dict[int, Tensor] = {}
    for node in tape.nodes:
        for t in node.inputs:
            if t.requires_grad and t._node is None:
                leaves.setdefault(id(t), t)
    for p in params or ():
        leaves.setdefault(id(p), p)
    for leaf in leaves.values():
        leaf.grad = np.zeros_like(leaf.data)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if loss._node is None:
        loss.grad = grads[id(loss)]
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        input_grads = node.backward(g)
        for t, tg in zip(node.inputs, input_grads):
            if tg is None or not t.requires_grad:
                continue
            if t._node is None:
                t.grad += tg
            elif id(t) in grads:
                grads[id(t)] = grads[id(t)] + tg
            else:
                grads[id(t)] = tg
        # release saved activations as soon as the node is done, and break the
        # output <-> node cycle so refcounting frees the graph
        node.backward = None
        node.output = None
    tape.consumed = True

    if params is not None:
        return [p.grad for p in params]
    return [leaf.grad for leaf in leaves.values()]
