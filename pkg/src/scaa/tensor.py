"""Dense tensor with a reverse-mode autodiff tape.

Values live in a numpy array. Every differentiable op records a
``_Node`` on its output holding the input tensors and a closure mapping
the output gradient to input gradients. ``Tensor.backward`` walks the
recorded DAG in reverse topological order, visiting each node once.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

_state = threading.local()

DEFAULT_DTYPE = np.float32


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class _Node:
    __slots__ = ("op", "inputs", "backward")

    def __init__(self, op: str, inputs: Sequence["Tensor"], backward: Callable):
        self.op = op
        self.inputs = tuple(inputs)
        self.backward = backward


class Tensor:
    """N-d float array with optional gradient.

    Parameters
    ----------
    data : array_like
        Values. Integer and bool input is cast to the default float dtype.
    requires_grad : bool
        Whether ``backward`` should populate ``grad`` for this tensor.
    dtype : numpy dtype, optional
        float32 (training) or float64 (gradient checking).
    """

    __slots__ = ("data", "grad", "requires_grad", "_node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        self.data = np.asarray(arr, dtype=dtype, order="C")
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._node: Optional[_Node] = None
        self.name = name

    # -- metadata -------------------------------------------------------
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
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autodiff -------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable tensor.

        ``grad`` defaults to ones for a single-element tensor.
        """
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.size != 1:
                raise RuntimeError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.dtype)
        if grad.shape != self.shape:
            raise ValueError(f"grad shape {grad.shape} does not match tensor shape {self.shape}")

        order = _topological_order(self)
        pending = {id(self): grad}
        for t in reversed(order):
            g = pending.pop(id(t), None)
            if g is None:
                continue
            t.grad = g if t.grad is None else t.grad + g
            node = t._node
            if node is None:
                continue
            in_grads = node.backward(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if ig.shape != inp.shape:
                    raise RuntimeError(
                        f"{node.op}: backward produced shape {ig.shape} for input {inp.shape}"
                    )
                key = id(inp)
                if key in pending:
                    pending[key] = pending[key] + ig
                else:
                    pending[key] = ig

    # -- operators (scalar broadcasting only) ---------------------------
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

    def __truediv__(self, other):
        from . import ops

        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops

        return ops.div(other, self)

    def __neg__(self):
        from . import ops

        return ops.mul(self, -1.0)

    def sum(self, axis=None):
        from . import ops

        return ops.sum(self, axis)

    def mean(self, axis=None):
        from . import ops

        return ops.mean(self, axis)

    def reshape(self, *shape):
        from . import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


def _topological_order(root: Tensor) -> list:
    # iterative DFS; model graphs are deep enough to hit the recursion limit
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
            for inp in t._node.inputs:
                if inp.requires_grad and id(inp) not in seen:
                    stack.append((inp, False))
    return order


def make_result(data: np.ndarray, op: str, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``data`` as the output of ``op``, recording the tape if needed."""
    out = Tensor(data, dtype=data.dtype)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = _Node(op, inputs, backward)
    return out


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)
