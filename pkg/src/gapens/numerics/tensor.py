"""Tape-based reverse-mode automatic differentiation over numpy float64 arrays.

Every differentiable op that touches a tensor with ``requires_grad`` appends
one node to the active :class:`Tape`.  Nodes are appended in creation order,
so walking the tape backwards from the loss is a valid reverse topological
order.  ``reset_tape()`` drops all nodes; tensors produced before the reset
become dead and cannot be differentiated through.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ..errors import DeadTape, NotScalar

DTYPE = np.float64


@dataclass
class _Node:
    kind: str
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    def __init__(self):
        self.nodes: list[_Node] = []
        self.generation = 0
        self.enabled = True

    def record(self, kind, inputs, backward) -> int:
        self.nodes.append(_Node(kind, tuple(inputs), backward))
        return len(self.nodes) - 1

    def reset(self) -> None:
        self.nodes.clear()
        self.generation += 1


_TAPE = Tape()


def get_tape() -> Tape:
    return _TAPE


def reset_tape() -> None:
    _TAPE.reset()


@contextlib.contextmanager
def no_grad():
    """Disable recording; ops inside return constant tensors."""
    prev = _TAPE.enabled
    _TAPE.enabled = False
    try:
        yield
    finally:
        _TAPE.enabled = prev


class Tensor:
    """Dense float64 array with optional gradient tracking.

    Leaf tensors (parameters) own a ``.grad`` slot filled by :func:`backward`.
    Intermediate tensors carry ``tape_id``, the index of the node that made them.
    """

    __slots__ = ("data", "requires_grad", "grad", "tape_id", "_generation", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.tape_id: int | None = None
        self._generation = -1
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.tape_id is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Operators delegate to the functional ops module.
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    def __neg__(self):
        from . import ops

        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(data: np.ndarray, kind: str, inputs: Sequence[Tensor], backward) -> Tensor:
    """Wrap an op result, recording a tape node when any input tracks gradients."""
    out = Tensor(data)
    if not _TAPE.enabled or not any(t.requires_grad for t in inputs):
        return out
    for t in inputs:
        if t.requires_grad and t.tape_id is not None and t._generation != _TAPE.generation:
            raise DeadTape(f"input to {kind} was produced before the last tape reset")
    out.requires_grad = True
    out.tape_id = _TAPE.record(kind, inputs, backward)
    out._generation = _TAPE.generation
    return out


def _propagate(loss: Tensor) -> dict[int, np.ndarray]:
    """Run the reverse sweep, returning leaf gradients keyed by ``id(leaf)``."""
    if loss.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    leaf_grads: dict[int, np.ndarray] = {}
    if not loss.requires_grad:
        return leaf_grads
    if loss.tape_id is None:
        leaf_grads[id(loss)] = np.ones_like(loss.data)
        return leaf_grads
    if loss._generation != _TAPE.generation:
        raise DeadTape("loss was produced before the last tape reset")

    pending: dict[int, np.ndarray] = {loss.tape_id: np.ones_like(loss.data)}
    nodes = _TAPE.nodes
    for idx in range(loss.tape_id, -1, -1):
        g = pending.pop(idx, None)
        if g is None:
            continue
        node = nodes[idx]
        for inp, ig in zip(node.inputs, node.backward(g)):
            if ig is None or not inp.requires_grad:
                continue
            key = inp.tape_id
            store, k = (leaf_grads, id(inp)) if key is None else (pending, key)
            if k in store:
                store[k] = store[k] + ig
            else:
                store[k] = ig
    return leaf_grads


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    grads = _propagate(loss)
    for leaf in _collect_leaves(loss):
        g = grads.get(id(leaf))
        if g is None:
            continue
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def grad(loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` for each of ``params``; zeros where unreachable."""
    grads = _propagate(loss)
    return [grads[id(p)] if id(p) in grads else np.zeros_like(p.data) for p in params]


def _collect_leaves(loss: Tensor) -> list[Tensor]:
    if loss.tape_id is None:
        return [loss] if loss.requires_grad else []
    leaves: dict[int, Tensor] = {}
    for node in _TAPE.nodes[: loss.tape_id + 1]:
        for t in node.inputs:
            if t.requires_grad and t.tape_id is None:
                leaves[id(t)] = t
    return list(leaves.values())
