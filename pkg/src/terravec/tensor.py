"""Dense float64 tensors with reverse-mode automatic differentiation.

Every tensor wraps a row-major numpy array. Operations on tensors with
``requires_grad`` record their inputs and a vector-Jacobian closure;
``Tensor.backward`` walks the recorded graph once in reverse topological
order and accumulates gradients into ``.grad`` buffers. Tensors are
treated as immutable once created; only gradient buffers mutate.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "as_tensor",
    "concat",
    "pad2d",
    "roll",
    "take",
    "clip",
    "matmul",
]


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


def as_tensor(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _node(data: np.ndarray, parents, vjp) -> "Tensor":
    """Build an output tensor, recording the graph only when a parent needs it."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff -----------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable requires_grad tensor.

        ``self`` must hold a single value. Repeated calls without
        ``zero_grad`` keep adding into existing gradient buffers.
        """
        if self.data.size != 1:
            raise ValueError(
                f"backward requires a scalar, got shape {self.shape}"
            )
        order = self._topo_order()
        flowing = {id(self): np.ones_like(self.data)}
        for node in order:
            g = flowing.pop(id(node), None)
            if g is None:
                continue
            if node.grad is None:
                node.grad = g.copy()
            else:
                node.grad = node.grad + g
            if node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                held = flowing.get(id(parent))
                flowing[id(parent)] = pg if held is None else held + pg

    def _topo_order(self):
        """Reverse topological order, deterministic in graph construction order."""
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        order.reverse()
        return order

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        a, b = self, other
        return _node(
            a.data + b.data,
            (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        a, b = self, other
        return _node(
            a.data - b.data,
            (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        )

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self, other
        return _node(
            a.data * b.data,
            (a, b),
            lambda g: (
                _unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape),
            ),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self, other
        return _node(
            a.data / b.data,
            (a, b),
            lambda g: (
                _unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
            ),
        )

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __neg__(self):
        return _node(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent: float):
        x = self
        e = float(exponent)
        return _node(
            x.data ** e,
            (x,),
            lambda g: (g * e * x.data ** (e - 1.0),),
        )

    def __matmul__(self, other):
        return matmul(self, other)

    # -- reductions ---------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        x = self
        out = x.data.sum(axis=axis, keepdims=keepdims)

        def vjp(g):
            gg = np.asarray(g)
            if axis is not None and not keepdims:
                axes = axis if isinstance(axis, tuple) else (axis,)
                gg = np.expand_dims(gg, axes)
            return (np.broadcast_to(gg, x.shape).copy(),)

        return _node(np.asarray(out), (x,), vjp)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = 1
            for a in axes:
                n *= self.shape[a]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- pointwise nonlinearities --------------------------------------------

    def exp(self) -> "Tensor":
        y = np.exp(self.data)
        return _node(y, (self,), lambda g: (g * y,))

    def log(self) -> "Tensor":
        x = self
        return _node(np.log(x.data), (x,), lambda g: (g / x.data,))

    def sqrt(self) -> "Tensor":
        y = np.sqrt(self.data)
        return _node(y, (self,), lambda g: (g * 0.5 / y,))

    def sigmoid(self) -> "Tensor":
        x = self.data
        y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                     np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        return _node(y, (self,), lambda g: (g * y * (1.0 - y),))

    def relu(self) -> "Tensor":
        x = self
        return _node(
            np.maximum(x.data, 0.0),
            (x,),
            lambda g: (g * (x.data > 0.0),),
        )

    def softplus(self) -> "Tensor":
        x = self.data
        y = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
        sig = 1.0 / (1.0 + np.exp(-np.clip(x, -500, 500)))
        return _node(y, (self,), lambda g: (g * sig,))

    # -- shape manipulation ---------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        x = self
        return _node(
            x.data.reshape(shape),
            (x,),
            lambda g: (g.reshape(x.shape),),
        )

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        x = self
        inverse = np.argsort(axes)
        return _node(
            x.data.transpose(axes),
            (x,),
            lambda g: (g.transpose(inverse),),
        )

    def swapaxes(self, a: int, b: int) -> "Tensor":
        x = self
        return _node(
            np.swapaxes(x.data, a, b),
            (x,),
            lambda g: (np.swapaxes(g, a, b),),
        )

    def __getitem__(self, key) -> "Tensor":
        x = self

        def vjp(g):
            gx = np.zeros_like(x.data)
            gx[key] = g
            return (gx,)

        return _node(np.ascontiguousarray(x.data[key]), (x,), vjp)


# -- free functions ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; batched when operands carry leading dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(
            f"matmul needs 2-D or higher operands, got {a.shape} and {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.shape} vs {b.shape}"
        )

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _node(a.data @ b.data, (a, b), vjp)


def concat(tensors, axis: int = 0) -> Tensor:
    """Concatenate along an existing axis."""
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        slicer = [slice(None)] * g.ndim
        outs = []
        for i in range(len(tensors)):
            slicer[axis] = slice(offsets[i], offsets[i + 1])
            outs.append(g[tuple(slicer)])
        return tuple(outs)

    return _node(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), vjp
    )


def pad2d(x: Tensor, top: int, bottom: int, left: int, right: int) -> Tensor:
    """Zero padding of the two trailing spatial axes."""
    x = as_tensor(x)
    widths = [(0, 0)] * (x.ndim - 2) + [(top, bottom), (left, right)]
    h, w = x.shape[-2], x.shape[-1]

    def vjp(g):
        slicer = (Ellipsis, slice(top, top + h), slice(left, left + w))
        return (g[slicer],)

    return _node(np.pad(x.data, widths), (x,), vjp)


def roll(x: Tensor, shift: int, axis: int) -> Tensor:
    """Circular shift along one axis."""
    x = as_tensor(x)
    return _node(
        np.roll(x.data, shift, axis=axis),
        (x,),
        lambda g: (np.roll(g, -shift, axis=axis),),
    )


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather slices by integer index along one axis."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)

    def vjp(g):
        gx_moved = np.zeros_like(np.moveaxis(x.data, axis, 0))
        np.add.at(gx_moved, idx, np.moveaxis(g, axis, 0))
        return (np.moveaxis(gx_moved, 0, axis),)

    return _node(np.take(x.data, idx, axis=axis), (x,), vjp)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only through the unclamped region."""
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _node(
        np.clip(x.data, lo, hi),
        (x,),
        lambda g: (g * inside,),
    )
