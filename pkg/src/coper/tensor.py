"""Dense float64 tensors with reverse-mode automatic differentiation.

A small operator set, sufficient to train everything in this package.
Each op records its parents and a backward rule on the result tensor;
``backward()`` replays the graph once in reverse topological order.
Gradients accumulate into ``.grad`` across calls until cleared.
"""

from __future__ import annotations

import numpy as np

from . import kernels

__all__ = ["Tensor", "no_grad", "concat", "where"]

_GRAD_ENABLED = True


class no_grad:
    """Suppress graph recording inside the ``with`` block (inference mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _sum_to(g, shape):
    # collapse a broadcast gradient back onto the operand's shape
    shape = tuple(shape)
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    squeeze = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if squeeze:
        g = g.sum(axis=squeeze, keepdims=True)
    return g


def stable_sigmoid(x):
    """Elementwise logistic function of an ndarray, overflow-free."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None

    # -- construction -------------------------------------------------------

    @classmethod
    def _result(cls, data, parents, backward_fn):
        """Wrap an op result; records the edge only when a parent needs grad."""
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            t.requires_grad = True
            t._parents = tuple(parents)
            t._backward_fn = backward_fn
        else:
            t.requires_grad = False
            t._parents = ()
            t._backward_fn = None
        return t

    @staticmethod
    def _as_tensor(other):
        if isinstance(other, Tensor):
            return other
        return Tensor(other)

    # -- introspection ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.data.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- backward -----------------------------------------------------------

    def backward(self):
        """Populate .grad of every reachable requires_grad tensor.

        The loss must be a single element. Repeated calls accumulate: each
        pass adds its gradient on top of whatever .grad already holds.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() expects a scalar loss, got shape {self.data.shape}")
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")

        # iterative post-order DFS; recursion would overflow on ODE graphs
        topo = []
        state = {}  # id -> 1 open, 2 done
        stack = [self]
        while stack:
            node = stack[-1]
            st = state.get(id(node), 0)
            if st == 0:
                state[id(node)] = 1
                for p in node._parents:
                    if p.requires_grad and state.get(id(p), 0) == 0:
                        stack.append(p)
            else:
                stack.pop()
                if st == 1:
                    state[id(node)] = 2
                    topo.append(node)

        pass_grads = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = pass_grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward_fn is not None:
                for parent, pg in zip(node._parents, node._backward_fn(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    cur = pass_grads.get(id(parent))
                    pass_grads[id(parent)] = pg if cur is None else cur + pg
            node.grad = g if node.grad is None else node.grad + g

    # -- elementwise arithmetic ----------------------------------------------

    def __add__(self, other):
        other = Tensor._as_tensor(other)
        a, b = self.data, other.data
        def bwd(g):
            return _sum_to(g, a.shape), _sum_to(g, b.shape)
        return Tensor._result(a + b, (self, other), bwd)

    __radd__ = __add__

    def __sub__(self, other):
        other = Tensor._as_tensor(other)
        a, b = self.data, other.data
        def bwd(g):
            return _sum_to(g, a.shape), _sum_to(-g, b.shape)
        return Tensor._result(a - b, (self, other), bwd)

    def __rsub__(self, other):
        return Tensor._as_tensor(other) - self

    def __mul__(self, other):
        other = Tensor._as_tensor(other)
        a, b = self.data, other.data
        def bwd(g):
            return _sum_to(g * b, a.shape), _sum_to(g * a, b.shape)
        return Tensor._result(a * b, (self, other), bwd)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __truediv__(self, other):
        if isinstance(other, Tensor) or isinstance(other, np.ndarray):
            raise TypeError("division only by python scalars; use explicit ops otherwise")
        return self * (1.0 / float(other))

    # -- matmul / shape ops ---------------------------------------------------

    def __matmul__(self, other):
        other = Tensor._as_tensor(other)
        a, b = self.data, other.data
        if a.ndim < 2 or b.ndim < 2:
            raise ValueError(f"matmul operands must be at least 2-D, got {a.shape} @ {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ValueError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
        try:
            np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError:
            raise ValueError(f"matmul batch dimensions do not broadcast: {a.shape} @ {b.shape}") from None
        def bwd(g):
            ga = g @ np.swapaxes(b, -1, -2)
            gb = np.swapaxes(a, -1, -2) @ g
            return _sum_to(ga, a.shape), _sum_to(gb, b.shape)
        return Tensor._result(a @ b, (self, other), bwd)

    def transpose(self):
        """Swap the last two axes."""
        if self.ndim < 2:
            raise ValueError(f"transpose needs >= 2 dims, got shape {self.shape}")
        def bwd(g):
            return (np.swapaxes(g, -1, -2),)
        return Tensor._result(np.swapaxes(self.data, -1, -2), (self,), bwd)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        def bwd(g):
            return (g.reshape(old),)
        return Tensor._result(self.data.reshape(shape), (self,), bwd)

    def __getitem__(self, idx):
        def bwd(g):
            buf = np.zeros_like(self.data)
            np.add.at(buf, idx, g)
            return (buf,)
        return Tensor._result(self.data[idx], (self,), bwd)

    def expand_batch(self, n):
        """Prepend a batch axis of length n by broadcasting."""
        shape = (n,) + self.data.shape
        def bwd(g):
            return (g.sum(axis=0),)
        return Tensor._result(np.broadcast_to(self.data[None, ...], shape), (self,), bwd)

    # -- nonlinearities --------------------------------------------------------

    def exp(self):
        y = np.exp(self.data)
        def bwd(g):
            return (g * y,)
        return Tensor._result(y, (self,), bwd)

    def tanh(self):
        y = np.tanh(self.data)
        def bwd(g):
            return (g * (1.0 - y * y),)
        return Tensor._result(y, (self,), bwd)

    def sigmoid(self):
        y = stable_sigmoid(self.data)
        def bwd(g):
            return (g * y * (1.0 - y),)
        return Tensor._result(y, (self,), bwd)

    def relu(self):
        x = self.data
        y = np.maximum(x, 0.0)
        def bwd(g):
            return (g * (x > 0.0),)
        return Tensor._result(y, (self,), bwd)

    # -- reductions -------------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        data = self.data.sum(axis=axis, keepdims=keepdims)
        src_shape = self.data.shape
        def bwd(g):
            gg = g
            if axis is None:
                gg = np.reshape(gg, (1,) * len(src_shape))
            elif not keepdims:
                gg = np.expand_dims(gg, axis)
            return (np.broadcast_to(gg, src_shape),)
        return Tensor._result(data, (self,), bwd)

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            count = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = 1
            for a in axes:
                count *= self.data.shape[a]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- softmax / masking --------------------------------------------------------

    def softmax(self, axis=-1):
        """Softmax along ``axis``, max-subtracted for stability.

        NaN inputs are rejected; a slice that is entirely -inf (fully
        masked) is rejected by the row kernel.
        """
        x = self.data
        if np.isnan(x).any():
            raise ValueError("softmax: NaN in input")
        ax = axis if axis >= 0 else x.ndim + axis
        moved = np.moveaxis(x, ax, -1)
        rows = np.ascontiguousarray(moved).reshape(-1, moved.shape[-1])
        y_rows = kernels.softmax_rows(rows)
        y = np.moveaxis(y_rows.reshape(moved.shape), -1, ax)
        def bwd(g):
            g_rows = np.ascontiguousarray(np.moveaxis(g, ax, -1)).reshape(rows.shape)
            gx_rows = kernels.softmax_rows_vjp(y_rows, g_rows)
            return (np.moveaxis(gx_rows.reshape(moved.shape), -1, ax),)
        return Tensor._result(y, (self,), bwd)

    def masked_fill(self, mask, value):
        """Replace entries where ``mask`` is True with ``value`` (e.g. -inf)."""
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), self.data.shape)
        data = np.where(mask, value, self.data)
        def bwd(g):
            return (np.where(mask, 0.0, g),)
        return Tensor._result(data, (self,), bwd)


def concat(tensors, axis=0):
    """Concatenate tensors along an existing axis."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of an empty sequence")
    datas = [t.data for t in tensors]
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]
    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))
    return Tensor._result(np.concatenate(datas, axis=axis), tuple(tensors), bwd)


def where(cond, a, b):
    """Elementwise select: cond ? a : b. ``cond`` is a constant bool array."""
    cond = np.asarray(cond, dtype=bool)
    a = Tensor._as_tensor(a)
    b = Tensor._as_tensor(b)
    if not (cond.shape == a.data.shape == b.data.shape):
        raise ValueError(f"where operands must share a shape, got {cond.shape}, {a.data.shape}, {b.data.shape}")
    def bwd(g):
        return np.where(cond, g, 0.0), np.where(cond, 0.0, g)
    return Tensor._result(np.where(cond, a.data, b.data), (a, b), bwd)
