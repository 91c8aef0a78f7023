"""Dense tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a contiguous numpy array. Every differentiable
operation is a :class:`Function` subclass; applying one to tensors that
require gradients records a :class:`Node` linking the output to its inputs.
:func:`backward` orders those nodes into a :class:`Graph` and accumulates
gradients in reverse.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Sequence

import numpy as np

DTYPES = (np.float32, np.float64)

_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "grad_enabled", default=True
)
_mac_counters: contextvars.ContextVar[tuple] = contextvars.ContextVar(
    "mac_counters", default=()
)


class ShapeError(ValueError):
    """Operand extents are incompatible."""


class AbsentGradientError(KeyError):
    """A gradient was requested for a tensor that does not take part in backward."""


class Tensor:
    """Row-major n-d array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in DTYPES:
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = arr if arr.flags.c_contiguous else arr.copy(order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: Tensor | None = None
        self._node: Node | None = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
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
        return self.data.item()

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def astype(self, dtype) -> Tensor:
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators (delegated to ops) ------------------------------------
    def __add__(self, other):
        return _ops.add(self, other)

    def __radd__(self, other):
        return _ops.add(other, self)

    def __sub__(self, other):
        return _ops.sub(self, other)

    def __rsub__(self, other):
        return _ops.sub(other, self)

    def __mul__(self, other):
        return _ops.mul(self, other)

    def __rmul__(self, other):
        return _ops.mul(other, self)

    def __truediv__(self, other):
        return _ops.div(self, other)

    def __neg__(self):
        return _ops.neg(self)

    def __matmul__(self, other):
        return _ops.matmul(self, other)

    def __getitem__(self, index):
        return _ops.getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return _ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return _ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _ops.reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return _ops.permute(self, axes)

    def backward(self) -> Gradients:
        return backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and np.isscalar(x):
        dtype = np.float64
    return Tensor(x, dtype=dtype)


def is_grad_enabled() -> bool:
    return _grad_enabled.get()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run forward ops without recording nodes."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


class MacCounter:
    """Collects multiply-accumulate counts reported by ops while active.

    Only dense products are counted (matmul, convolutions, scan products);
    elementwise ops, norms and activations report nothing.
    """

    def __init__(self) -> None:
        self.total = 0
        self.by_op: dict[str, int] = {}

    def add(self, op: str, macs: int) -> None:
        self.total += int(macs)
        self.by_op[op] = self.by_op.get(op, 0) + int(macs)

    def __enter__(self) -> MacCounter:
        self._token = _mac_counters.set(_mac_counters.get() + (self,))
        return self

    def __exit__(self, *exc) -> None:
        _mac_counters.reset(self._token)


def report_macs(op: str, macs: int) -> None:
    for counter in _mac_counters.get():
        counter.add(op, macs)


@dataclass(eq=False)
class Node:
    """One executed operation: the function instance, its inputs and output."""

    fn: Function
    inputs: tuple[Tensor, ...]
    output: Tensor
    kwargs: dict = field(default_factory=dict)

    @property
    def op(self) -> str:
        return type(self.fn).__name__


class Function:
    """Base class for differentiable operations.

    ``forward`` receives raw arrays and may stash whatever ``backward`` needs
    on ``self``. ``backward`` maps the output gradient to one gradient per
    input (``None`` where an input needs none).
    """

    differentiable = True

    def __init__(self, *tensors: Tensor):
        self.needs = tuple(t.requires_grad for t in tensors)

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray | None]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        tensors = tuple(as_tensor(t) for t in inputs)
        fn = cls(*tensors)
        out = Tensor(fn.forward(*(t.data for t in tensors), **kwargs))
        if cls.differentiable and _grad_enabled.get() and any(fn.needs):
            out.requires_grad = True
            out._node = Node(fn, tensors, out, kwargs)
        return out


class Graph:
    """Topologically ordered record of the nodes that produced a tensor."""

    def __init__(self, nodes: list[Node]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> Graph:
        order: list[Node] = []
        seen: set[int] = set()
        if out._node is None:
            return cls(order)
        # iterative post-order DFS; recursion depth would cap long scan chains
        stack: list[tuple[Node, bool]] = [(out._node, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for t in reversed(node.inputs):
                if t._node is not None and id(t._node) not in seen:
                    stack.append((t._node, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    def leaves(self) -> list[Tensor]:
        found: dict[int, Tensor] = {}
        for node in self.nodes:
            for t in node.inputs:
                if t._node is None and t.requires_grad:
                    found.setdefault(id(t), t)
        return list(found.values())

    def is_topological(self) -> bool:
        produced: set[int] = set()
        for node in self.nodes:
            for t in node.inputs:
                if t._node is not None and id(t) not in produced:
                    return False
            produced.add(id(node.output))
        return True

    def replay(self) -> list[np.ndarray]:
        """Re-run every node forward from the leaf values; returns outputs in order."""
        values: dict[int, np.ndarray] = {}
        outs = []
        for node in self.nodes:
            args = [values.get(id(t), t.data) if t._node is not None else t.data for t in node.inputs]
            fn = type(node.fn)(*node.inputs)
            with no_grad():
                res = fn.forward(*args, **node.kwargs)
            values[id(node.output)] = res
            outs.append(res)
        return outs


class Gradients(dict):
    """Mapping of tensor -> gradient array, keyed by identity."""

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        try:
            return super().__getitem__(id(tensor))
        except KeyError:
            raise AbsentGradientError(
                f"no gradient for {tensor!r}: it is detached or does not require grad"
            ) from None

    def __contains__(self, tensor) -> bool:
        return super().__contains__(id(tensor))


def backward(loss: Tensor, graph: Graph | None = None) -> Gradients:
    """Reverse-mode accumulation from a scalar ``loss``.

    Leaf gradients are accumulated into ``leaf.grad`` and also returned.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if graph is None:
        graph = Graph.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.fn.backward(g)
        for t, gi, need in zip(node.inputs, in_grads, node.fn.needs):
            if gi is None or not need:
                continue
            if gi.shape != t.shape:
                raise ShapeError(f"{node.op} produced grad {gi.shape} for input {t.shape}")
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    result = Gradients()
    for leaf in graph.leaves():
        g = grads.get(id(leaf))
        if g is None:
            continue
        g = g.astype(leaf.dtype, copy=False)
        result[id(leaf)] = g
        leaf.grad = Tensor(g if leaf.grad is None else leaf.grad.data + g)
    if not graph.nodes and loss.requires_grad:
        result[id(loss)] = np.ones_like(loss.data)
        loss.grad = Tensor(np.ones_like(loss.data))
    return result


def finite_diff_grad(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    indices: Sequence[int] | None = None,
) -> Tensor:
    """Central-difference gradient of a scalar function.

    With ``indices`` only those flat coordinates are perturbed; the rest of the
    returned tensor is zero.
    """
    base = np.array(x.data, dtype=np.float64 if x.dtype == np.float64 else x.dtype)
    flat = base.reshape(-1)
    out = np.zeros_like(flat)
    coords = range(flat.size) if indices is None else indices
    with no_grad():
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(Tensor(base.copy())).data)
            flat[i] = orig - h
            fm = float(f(Tensor(base.copy())).data)
            flat[i] = orig
            out[i] = (fp - fm) / (2 * h)
    return Tensor(out.reshape(base.shape))


from . import ops as _ops  # noqa: E402  (ops needs Tensor/Function defined first)
