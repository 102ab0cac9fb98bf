"""Dense tensors with tape-based reverse-mode differentiation.

numpy supplies the storage and the kernels; this module adds the recording
tape, the Parameter bookkeeping, and shape checking.  Recording is explicit:
ops only build backward closures while a Tape is active, so inference and
data preparation run at plain numpy speed and are safe to run concurrently.
One tape corresponds to one optimizer step; it must be reset (or replaced)
before it can record again after a backward pass.
"""

from __future__ import annotations

import threading

import numpy as np


class NumericsError(Exception):
    """Engine contract violation (shape mismatch, tape misuse, non-finite)."""


class ShapeError(NumericsError):
    pass


class Tensor:
    """A dense array plus a transient gradient slot.

    ``grad`` is populated only between a tape's backward pass and cleanup,
    except for leaves created with ``requires_grad=True`` (and Parameters),
    whose gradient buffer persists and accumulates across backward calls
    until ``zero_grad`` style resets.  ``grad_owned`` records whether the
    buffer belongs to this tensor (safe to add into) or may alias another
    tensor's storage.
    """

    __slots__ = ("data", "grad", "requires_grad", "grad_owned")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.grad_owned = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    # Arithmetic operators delegate to the ops module (late import keeps the
    # two modules decoupled at definition time).
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

        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def __getitem__(self, idx):
        from . import ops

        return ops.index(self, idx)

    def reshape(self, *shape):
        from . import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops

        return ops.transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        from . import ops

        return ops.sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops

        return ops.mean(self, axis=axis, keepdims=keepdims)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))


class Parameter(Tensor):
    """A named trainable leaf; its gradient buffer always matches its shape."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


class Parameters:
    """Ordered registry of named Parameters for one model."""

    def __init__(self):
        self._by_name: dict[str, Parameter] = {}

    def add(self, name: str, data) -> Parameter:
        if name in self._by_name:
            raise NumericsError(f"duplicate parameter name {name!r}")
        p = Parameter(name, data)
        self._by_name[name] = p
        return p

    def adopt(self, other: "Parameters") -> None:
        """Merge another registry (e.g. a submodule built standalone)."""
        for name, p in other._by_name.items():
            if name in self._by_name:
                raise NumericsError(f"duplicate parameter name {name!r}")
            self._by_name[name] = p

    def __iter__(self):
        return iter(self._by_name.values())

    def __len__(self):
        return len(self._by_name)

    def __contains__(self, name):
        return name in self._by_name

    def get(self, name: str) -> Parameter:
        return self._by_name[name]

    def names(self):
        return list(self._by_name.keys())

    def zero_grads(self) -> None:
        for p in self._by_name.values():
            p.grad = np.zeros_like(p.data)
            p.grad_owned = True

    def n_values(self) -> int:
        return sum(p.data.size for p in self._by_name.values())


_TAPES = threading.local()


def active_tape():
    stack = getattr(_TAPES, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Wengert list for one forward/backward cycle.

    Ops append (outputs, backward_closure) in execution order, so the list
    itself is a topological order and backward is a single reverse sweep.
    A tape that has back-propagated refuses further use until reset().
    """

    def __init__(self):
        self._nodes: list[tuple[tuple[Tensor, ...], object]] = []
        self._spent = False

    def __enter__(self):
        if self._spent:
            raise NumericsError("tape already backpropagated; reset() before reuse")
        stack = getattr(_TAPES, "stack", None)
        if stack is None:
            stack = _TAPES.stack = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPES.stack.pop()
        return False

    def record(self, outs: tuple[Tensor, ...], backward_fn) -> None:
        if self._spent:
            raise NumericsError("tape already backpropagated; reset() before recording")
        self._nodes.append((outs, backward_fn))

    def backward(self, loss: Tensor) -> None:
        """Populate gradients of every requires-grad leaf that fed ``loss``."""
        if self._spent:
            raise NumericsError("backward called twice on one recording; reset() first")
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        if not np.all(np.isfinite(loss.data)):
            raise NumericsError("backward called on a non-finite loss")
        loss.grad = np.ones_like(loss.data)
        for outs, fn in reversed(self._nodes):
            fn()
        # Release transient gradients; leaves are never op outputs, so their
        # accumulated buffers survive.
        for outs, _ in self._nodes:
            for o in outs:
                o.grad = None
        self._spent = True

    def reset(self) -> None:
        self._nodes.clear()
        self._spent = False

    def __len__(self):
        return len(self._nodes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def accumulate(t: Tensor, g: np.ndarray) -> None:
    """Add ``g`` into ``t.grad`` without mutating buffers we don't own.

    The first contribution is stored by reference (it may alias an upstream
    buffer, which must never be written through); the second allocates a
    fresh sum; from then on the buffer is ours and adds happen in place.
    Parameter buffers are ours from construction.
    """
    if t.grad is None:
        t.grad = g
        t.grad_owned = False
    elif t.grad_owned and t.grad.shape == g.shape:
        t.grad += g
    else:
        t.grad = t.grad + g
        t.grad_owned = True


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)
