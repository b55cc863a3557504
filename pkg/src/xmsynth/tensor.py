"""Dense tensors, the reverse-mode tape, and seeded random streams.

A :class:`Tensor` wraps a numpy array. Operations in :mod:`xmsynth.functional`
append a :class:`Node` to the active :class:`Tape` whenever one of their
inputs requires a gradient; :meth:`Tensor.backward` then replays the reachable
nodes in strict reverse append order.

Tapes are scoped per thread::

    with Tape():
        loss = F.loss_mse(model(x), y)
        loss.backward()

Outside any ``with Tape()`` block operations record onto a process-wide
default tape, which is convenient interactively but never freed; call
:meth:`Tape.reset` on it (``Tape.default().reset()``) in long loops.
"""

from __future__ import annotations

import contextlib
import threading
import zlib
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DetachedTapeError, ValidationError

_local = threading.local()


def _state():
    if not hasattr(_local, "dtype"):
        _local.dtype = np.dtype(np.float32)
        _local.grad_enabled = True
        _local.tapes = []
    return _local


def get_dtype() -> np.dtype:
    return _state().dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the storage dtype of newly created tensors."""
    st = _state()
    prev = st.dtype
    st.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        st.dtype = prev


def grad_enabled() -> bool:
    return _state().grad_enabled


@contextlib.contextmanager
def no_grad():
    st = _state()
    prev = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = prev


@dataclass(eq=False)
class Node:
    index: int
    op: str
    inputs: tuple
    backward: Callable
    tape: "Tape"


class Tape:
    """Append-only record of differentiable operations."""

    _default: Optional["Tape"] = None

    def __init__(self):
        self.nodes: list[Node] = []
        self.closed = False

    @classmethod
    def default(cls) -> "Tape":
        if cls._default is None:
            cls._default = cls()
        return cls._default

    @staticmethod
    def current() -> "Tape":
        tapes = _state().tapes
        return tapes[-1] if tapes else Tape.default()

    def append(self, op: str, inputs: tuple, backward: Callable) -> Node:
        if self.closed:
            raise DetachedTapeError("cannot record onto a closed tape")
        node = Node(len(self.nodes), op, inputs, backward, self)
        self.nodes.append(node)
        return node

    def reset(self):
        """Drop every recorded node. Tensors recorded earlier become detached."""
        for node in self.nodes:
            node.tape = _CLOSED
        self.nodes = []

    def __enter__(self):
        _state().tapes.append(self)
        return self

    def __exit__(self, *exc):
        _state().tapes.pop()
        self.reset()
        self.closed = True
        return False

    def __len__(self):
        return len(self.nodes)


_CLOSED = Tape()
_CLOSED.closed = True


class Tensor:
    """N-dimensional float array with an optional gradient slot."""

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = None):
        if isinstance(data, Tensor):
            data = data.data
        dtype = np.dtype(dtype) if dtype is not None else get_dtype()
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[Node] = None

    @classmethod
    def _result(cls, data: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = False
        out.grad = None
        out.name = None
        out._node = None
        return out

    # -- array protocol -------------------------------------------------
    @property
    def shape(self) -> tuple:
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

    @property
    def tape_id(self) -> Optional[int]:
        return None if self._node is None else self._node.index

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def detach(self) -> "Tensor":
        return Tensor._result(self.data)

    def zero_grad(self):
        self.grad = None

    # -- arithmetic (defined in functional, bound here) -------------------
    def __add__(self, other):
        return _F().add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return _F().sub(self, other)

    def __rsub__(self, other):
        return _F().sub(other, self)

    def __mul__(self, other):
        return _F().mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported")
        return _F().mul(self, 1.0 / other)

    def __neg__(self):
        return _F().mul(self, -1.0)

    def sum(self):
        return _F().sum(self)

    def mean(self):
        return _F().mean(self)

    def exp(self):
        return _F().exp(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _F().reshape(self, shape)

    def backward(self, grad: Optional[np.ndarray] = None):
        backward(self, grad)


def _F():
    from . import functional

    return functional


def record(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as the output of ``op`` and record it if any input needs grad.

    ``backward_fn(grad_out)`` returns one gradient (or None) per input.
    """
    out = Tensor._result(data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Tape.current().append(op, tuple(inputs), backward_fn)
    return out


def backward(loss: Tensor, grad: Optional[np.ndarray] = None):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.size != 1 and grad is None:
        raise ValidationError(f"backward needs a scalar loss, got shape {loss.shape}")
    seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.dtype)
    if loss._node is None:
        if not loss.requires_grad:
            raise DetachedTapeError("loss does not require grad and has no tape history")
        _accumulate_leaf(loss, seed)
        return
    if loss._node.tape.closed:
        raise DetachedTapeError("loss belongs to a closed tape")

    reachable: dict[int, Node] = {}
    stack = [loss._node]
    while stack:
        node = stack.pop()
        if node.index in reachable:
            continue
        reachable[node.index] = node
        for t in node.inputs:
            if t._node is not None and t._node.index not in reachable:
                stack.append(t._node)

    pending: dict[int, np.ndarray] = {loss._node.index: seed}
    for index in sorted(reachable, reverse=True):
        node = reachable[index]
        g = pending.pop(index, None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if t._node is not None:
                j = t._node.index
                pending[j] = gi if j not in pending else pending[j] + gi
            else:
                _accumulate_leaf(t, gi)


def _accumulate_leaf(t: Tensor, g: np.ndarray):
    g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


_STREAMS = {"weights": 0, "data": 1, "noise": 2}


@dataclass
class Rng:
    """Seeded source of independent numpy generators.

    Each named stream (``weights``, ``data``, ``noise`` or any other label)
    is derived from the seed alone, so drawing from one never perturbs
    another.
    """

    seed: int = 0
    _streams: dict = field(default_factory=dict, repr=False)

    def _key(self, name: str) -> int:
        return _STREAMS.get(name, zlib.crc32(name.encode()) + len(_STREAMS))

    def stream(self, name: str) -> np.random.Generator:
        if name not in self._streams:
            ss = np.random.SeedSequence(int(self.seed), spawn_key=(self._key(name),))
            self._streams[name] = np.random.Generator(np.random.PCG64(ss))
        return self._streams[name]

    def substream(self, name: str, index: int) -> np.random.Generator:
        """A fresh generator that depends only on (seed, name, index)."""
        ss = np.random.SeedSequence(int(self.seed), spawn_key=(self._key(name), int(index)))
        return np.random.Generator(np.random.PCG64(ss))

    def state(self) -> dict:
        return {name: g.bit_generator.state for name, g in sorted(self._streams.items())}
