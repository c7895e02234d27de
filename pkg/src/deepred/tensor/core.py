"""Define-by-run reverse-mode differentiation over numpy arrays.

Every differentiable operation returns a new :class:`Tensor` that records the
operation tag, its input nodes and a closure mapping the output gradient to
input gradients.  The tape is rebuilt on every forward pass.
"""

import threading
from contextlib import contextmanager

import numpy as np

DEFAULT_DTYPE = np.float64

_state = threading.local()


def is_recording() -> bool:
    """True while the current thread is building or walking a gradient tape."""
    return getattr(_state, "depth", 0) > 0


@contextmanager
def recording():
    """Mark the current thread as inside a gradient computation.

    Used by instrumentation that must never run while a tape is live (for
    example the plug-in denoiser).  The flag is thread-local, so work running
    concurrently on another thread is not affected.
    """
    _state.depth = getattr(_state, "depth", 0) + 1
    try:
        yield
    finally:
        _state.depth -= 1


class ShapeError(ValueError):
    pass


class Tensor:
    """A node of the gradient tape.

    Parameters
    ----------
    data : array_like
        Value of the node.  Stored as a C-contiguous float array.
    requires_grad : bool
        Whether gradients should be accumulated into ``grad``.
    dtype : numpy dtype, optional
        float64 unless given; float32 is the only other supported choice.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, dtype=None, *, op="leaf", parents=(), name=None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        arr = np.asarray(data, dtype=dtype, order="C")
        if arr.ndim and min(arr.shape) < 1:
            raise ShapeError(f"all extents must be >= 1, got {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self.parents = tuple(parents)
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; the implementations live in functional.py
    def __add__(self, other):
        from .functional import add
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from .functional import sub
        return sub(self, other)

    def __rsub__(self, other):
        from .functional import sub
        return sub(other, self)

    def __mul__(self, other):
        from .functional import mul
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from .functional import mul
        return mul(self, -1.0)

    def backward(self):
        backward(self)


def as_tensor(value, like=None):
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value), dtype=dtype)


def make_node(data, op, parents, backward_fn):
    """Wrap ``data`` as the output of ``op``; ``backward_fn(g)`` yields one gradient per parent."""
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, op=op, parents=parents if needs else ())
    if needs:
        out._backward = backward_fn
    return out


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node.parents):
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(node) into ``node.grad`` for every leaf that requires grad.

    Intermediate nodes also receive their gradient in ``grad``.  Leaf gradients
    accumulate across calls, so zero them between independent passes.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    with recording():
        order = _topological_order(loss)
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.parents:
                node.grad = g
                for parent, pg in zip(node.parents, node._backward(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    if pg.shape != parent.shape:
                        raise ShapeError(f"{node.op}: gradient shape {pg.shape} != input shape {parent.shape}")
                    if id(parent) in grads:
                        grads[id(parent)] = grads[id(parent)] + pg
                    else:
                        grads[id(parent)] = pg
            else:
                node.grad = g if node.grad is None else node.grad + g


def grad(loss, params):
    """Return gradients of ``loss`` w.r.t. ``params`` without leaving them on the leaves."""
    for p in params:
        p.grad = None
    backward(loss)
    out = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    for p in params:
        p.grad = None
    return out
