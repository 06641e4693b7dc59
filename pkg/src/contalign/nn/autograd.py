"""Dense-tensor engine with reverse-mode differentiation.

The engine is deliberately small: dense row-major float32 arrays, a tape
built implicitly through parent links, and only the operations the rest of
the package needs (convolutions, linear maps, elementwise nonlinearities,
reductions, reshapes). Freezing is structural: a tensor with
``requires_grad=False`` is never visited by the backward pass and never
receives a gradient buffer, so "no gradient" can be asserted as absence
rather than near-zero.

Library code keeps everything in float32. The dtype of explicitly provided
arrays is preserved, which lets gradient-check tests run the same graphs in
float64 where finite differences are numerically trustworthy.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = ["Tensor", "Parameter", "concat", "DimensionError"]


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


def _as_array(value, dtype) -> np.ndarray:
    arr = np.asarray(value)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` over axes that were broadcast to reach `grad.shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A node in the computation graph.

    Leaf tensors hold data; interior tensors additionally hold their parent
    links and a closure that routes the incoming gradient to each parent.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fns")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fns: tuple[Callable[[np.ndarray], np.ndarray], ...] = ()

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _from_op(
        cls,
        data: np.ndarray,
        parents: Sequence["Tensor"],
        grad_fns: Sequence[Callable[[np.ndarray], np.ndarray]],
    ) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._grad_fns = tuple(grad_fns)
        else:
            out._parents = ()
            out._grad_fns = ()
        return out

    # -- basic introspection ---------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
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

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- autodiff --------------------------------------------------------------

    def backward(self) -> None:
        """Populate gradients of every reachable tensor with requires_grad.

        Only defined for scalar (single-element) tensors, mirroring the use
        of scalar training losses.
        """
        if self.data.size != 1:
            raise DimensionError(
                f"backward() requires a scalar loss, got shape {self.shape}"
            )
        if not np.isfinite(self.data).all():
            raise FloatingPointError("backward() called on a non-finite loss")
        if not self.requires_grad:
            return

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            grad = node.grad
            for parent, fn in zip(node._parents, node._grad_fns):
                if not parent.requires_grad:
                    continue
                contribution = fn(grad)
                if parent.grad is None:
                    parent.grad = contribution.astype(parent.data.dtype, copy=True)
                else:
                    parent.grad += contribution
            if node._parents:
                # Interior activations are not needed after their gradient
                # has been routed; free the buffers eagerly.
                node.grad = None

    def zero_grad(self) -> None:
        self.grad = None

    # -- arithmetic ------------------------------------------------------------

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other) -> "Tensor":
        other = self._coerce(other)
        data = self.data + other.data
        return Tensor._from_op(
            data,
            (self, other),
            (
                lambda g: _unbroadcast(g, self.data.shape),
                lambda g: _unbroadcast(g, other.data.shape),
            ),
        )

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor._from_op(-self.data, (self,), (lambda g: -g,))

    def __sub__(self, other) -> "Tensor":
        return self + (-self._coerce(other))

    def __rsub__(self, other) -> "Tensor":
        return self._coerce(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = self._coerce(other)
        data = self.data * other.data
        return Tensor._from_op(
            data,
            (self, other),
            (
                lambda g: _unbroadcast(g * other.data, self.data.shape),
                lambda g: _unbroadcast(g * self.data, other.data.shape),
            ),
        )

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = self._coerce(other)
        data = self.data / other.data
        return Tensor._from_op(
            data,
            (self, other),
            (
                lambda g: _unbroadcast(g / other.data, self.data.shape),
                lambda g: _unbroadcast(
                    -g * self.data / (other.data * other.data), other.data.shape
                ),
            ),
        )

    def __rtruediv__(self, other) -> "Tensor":
        return self._coerce(other) / self

    def __pow__(self, exponent: float) -> "Tensor":
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        data = self.data**exponent
        return Tensor._from_op(
            data,
            (self,),
            (lambda g: g * exponent * self.data ** (exponent - 1),),
        )

    def __getitem__(self, key) -> "Tensor":
        data = self.data[key]

        def grad_fn(g, key=key):
            full = np.zeros_like(self.data)
            full[key] = g
            return full

        return Tensor._from_op(np.ascontiguousarray(data), (self,), (grad_fn,))

    # -- elementwise functions ---------------------------------------------------

    def exp(self) -> "Tensor":
        data = np.exp(self.data)
        return Tensor._from_op(data, (self,), (lambda g: g * data,))

    def log(self) -> "Tensor":
        return Tensor._from_op(
            np.log(self.data), (self,), (lambda g: g / self.data,)
        )

    def sqrt(self) -> "Tensor":
        data = np.sqrt(self.data)
        return Tensor._from_op(data, (self,), (lambda g: g * 0.5 / data,))

    def relu(self) -> "Tensor":
        mask = self.data > 0
        return Tensor._from_op(
            self.data * mask, (self,), (lambda g: g * mask,)
        )

    def sigmoid(self) -> "Tensor":
        # Stable two-branch logistic; derivative is s * (1 - s).
        x = self.data
        data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        data = data.astype(x.dtype, copy=False)
        return Tensor._from_op(
            data, (self,), (lambda g: g * data * (1.0 - data),)
        )

    def softplus(self) -> "Tensor":
        # log(1 + e^x) = max(x, 0) + log1p(e^{-|x|}); derivative sigmoid(x).
        x = self.data
        data = (np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))).astype(
            x.dtype, copy=False
        )

        def grad_fn(g):
            s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                         np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
            return g * s.astype(x.dtype, copy=False)

        return Tensor._from_op(data, (self,), (grad_fn,))

    # -- reductions ---------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        data = self.data.sum(axis=axis, keepdims=keepdims)

        def grad_fn(g, axis=axis, keepdims=keepdims):
            if axis is None:
                return np.broadcast_to(g, self.data.shape).astype(
                    self.data.dtype, copy=False
                )
            if not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, self.data.shape).astype(
                self.data.dtype, copy=False
            )

        return Tensor._from_op(np.asarray(data), (self,), (grad_fn,))

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.data.size
        elif isinstance(axis, tuple):
            count = int(np.prod([self.data.shape[a] for a in axis]))
        else:
            count = self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- shape manipulation ---------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        data = self.data.reshape(shape)
        return Tensor._from_op(
            data, (self,), (lambda g: g.reshape(self.data.shape),)
        )

    def transpose(self, axes: tuple[int, ...]) -> "Tensor":
        inverse = tuple(int(np.argsort(axes)[i]) for i in range(len(axes)))
        return Tensor._from_op(
            np.ascontiguousarray(self.data.transpose(axes)),
            (self,),
            (lambda g: g.transpose(inverse),),
        )

    # -- linear algebra ----------------------------------------------------------------

    def matmul(self, other: "Tensor") -> "Tensor":
        other = self._coerce(other)
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise DimensionError("matmul supports 2-D operands only")
        if self.data.shape[1] != other.data.shape[0]:
            raise DimensionError(
                f"matmul shape mismatch: {self.data.shape} @ {other.data.shape}"
            )
        data = self.data @ other.data
        return Tensor._from_op(
            data,
            (self, other),
            (
                lambda g: g @ other.data.T,
                lambda g: self.data.T @ g,
            ),
        )

    __matmul__ = matmul


class Parameter(Tensor):
    """A trainable leaf tensor with lazily created optimizer moments."""

    __slots__ = ("adam_m", "adam_v")

    def __init__(self, data, requires_grad: bool = True, dtype=None):
        super().__init__(data, requires_grad=requires_grad, dtype=dtype)
        self.adam_m: np.ndarray | None = None
        self.adam_v: np.ndarray | None = None


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    """Concatenate tensors along `axis`, splitting the gradient back."""
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + [t.data.shape[axis] for t in tensors])

    def make_grad_fn(lo: int, hi: int):
        def grad_fn(g):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            return g[tuple(index)]

        return grad_fn

    grad_fns = [
        make_grad_fn(int(offsets[i]), int(offsets[i + 1]))
        for i in range(len(tensors))
    ]
    return Tensor._from_op(data, tensors, grad_fns)
