"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

A ``Tensor`` wraps an ndarray and records the operation graph so that
``backward`` can accumulate gradients into every leaf created with
``requires_grad=True``. All arithmetic follows numpy broadcasting; gradients
are un-broadcast back to the operand shapes. Every public operation verifies
that its result is finite and raises :class:`NonFiniteError` naming the
offending operation otherwise.
"""

from __future__ import annotations

import numpy as np


class NonFiniteError(ArithmeticError):
    """Raised when an operation produces NaN or infinity."""

    def __init__(self, op: str):
        super().__init__(f"non-finite result in operation '{op}'")
        self.op = op


def _check_finite(data: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(op)
    return data


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] > 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A float64 array plus the tape needed for reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None

    # ------------------------------------------------------------------ util

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    @staticmethod
    def _lift(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))

    # -------------------------------------------------------------- backward

    def backward(self):
        """Accumulate d(self)/d(leaf) into `.grad` of every grad-requiring leaf."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        topo, visited = [], set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)
            node._backward = None
            node._parents = ()

    def _accum(self, g: np.ndarray):
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    # ------------------------------------------------------------ arithmetic

    def __add__(self, other):
        other = self._lift(other)
        out_data = _check_finite(self.data + other.data, "add")

        def bwd(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g, other.data.shape))

        return Tensor(out_data, _parents=(self, other), _backward=bwd)

    __radd__ = __add__

    def __neg__(self):
        def bwd(g):
            self._accum(-g)

        return Tensor(-self.data, _parents=(self,), _backward=bwd)

    def __sub__(self, other):
        other = self._lift(other)
        out_data = _check_finite(self.data - other.data, "sub")

        def bwd(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(-g, other.data.shape))

        return Tensor(out_data, _parents=(self, other), _backward=bwd)

    def __rsub__(self, other):
        return self._lift(other) - self

    def __mul__(self, other):
        other = self._lift(other)
        out_data = _check_finite(self.data * other.data, "mul")

        def bwd(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g * self.data, other.data.shape))

        return Tensor(out_data, _parents=(self, other), _backward=bwd)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other)
        with np.errstate(divide="ignore", invalid="ignore"):
            out_data = _check_finite(self.data / other.data, "div")

        def bwd(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g / other.data, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(-g * self.data / other.data**2, other.data.shape))

        return Tensor(out_data, _parents=(self, other), _backward=bwd)

    def __rtruediv__(self, other):
        return self._lift(other) / self

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        with np.errstate(divide="ignore", invalid="ignore"):
            out_data = _check_finite(self.data**exponent, "pow")

        def bwd(g):
            self._accum(g * exponent * self.data ** (exponent - 1))

        return Tensor(out_data, _parents=(self,), _backward=bwd)

    def __matmul__(self, other):
        other = self._lift(other)
        out_data = _check_finite(self.data @ other.data, "matmul")

        def bwd(g):
            a, b = self.data, other.data
            if self.requires_grad:
                ga = g @ b.T if b.ndim == 2 else np.outer(g, b)
                if a.ndim == 1:
                    ga = ga.reshape(a.shape)
                self._accum(ga)
            if other.requires_grad:
                gb = a.T @ g if a.ndim == 2 else np.outer(a, g)
                if b.ndim == 1:
                    gb = gb.reshape(b.shape)
                other._accum(gb)

        return Tensor(out_data, _parents=(self, other), _backward=bwd)

    # ------------------------------------------------------------ reductions

    def sum(self, axis=None, keepdims: bool = False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)
        _check_finite(out_data, "sum")

        def bwd(g):
            if axis is None:
                self._accum(np.broadcast_to(g, self.data.shape).copy())
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                self._accum(np.broadcast_to(gg, self.data.shape).copy())

        return Tensor(out_data, _parents=(self,), _backward=bwd)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod(
            [self.data.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def logsumexp(self, axis: int, keepdims: bool = False):
        m = np.max(self.data, axis=axis, keepdims=True)
        shifted = np.exp(self.data - m)
        s = shifted.sum(axis=axis, keepdims=True)
        out_data = _check_finite(m + np.log(s), "logsumexp")
        softmax = shifted / s
        if not keepdims:
            out_data = np.squeeze(out_data, axis=axis)

        def bwd(g):
            gg = g if keepdims else np.expand_dims(g, axis)
            self._accum(gg * softmax)

        return Tensor(out_data, _parents=(self,), _backward=bwd)

    # ---------------------------------------------------------- elementwise

    def exp(self):
        with np.errstate(over="ignore"):
            out_data = _check_finite(np.exp(self.data), "exp")

        def bwd(g):
            self._accum(g * out_data)

        return Tensor(out_data, _parents=(self,), _backward=bwd)

    def log(self):
        with np.errstate(divide="ignore", invalid="ignore"):
            out_data = _check_finite(np.log(self.data), "log")

        def bwd(g):
            self._accum(g / self.data)

        return Tensor(out_data, _parents=(self,), _backward=bwd)

    def sqrt(self):
        with np.errstate(invalid="ignore"):
            out_data = _check_finite(np.sqrt(self.data), "sqrt")

        def bwd(g):
            self._accum(g * 0.5 / out_data)

        return Tensor(out_data, _parents=(self,), _backward=bwd)

    def tanh(self):
        out_data = np.tanh(self.data)

        def bwd(g):
            self._accum(g * (1.0 - out_data**2))

        return Tensor(out_data, _parents=(self,), _backward=bwd)

    def sigmoid(self):
        out_data = np.where(
            self.data >= 0,
            1.0 / (1.0 + np.exp(-np.abs(self.data))),
            np.exp(-np.abs(self.data)) / (1.0 + np.exp(-np.abs(self.data))),
        )

        def bwd(g):
            self._accum(g * out_data * (1.0 - out_data))

        return Tensor(out_data, _parents=(self,), _backward=bwd)

    def silu(self):
        sig = np.where(
            self.data >= 0,
            1.0 / (1.0 + np.exp(-np.abs(self.data))),
            np.exp(-np.abs(self.data)) / (1.0 + np.exp(-np.abs(self.data))),
        )
        out_data = self.data * sig

        def bwd(g):
            self._accum(g * (sig + out_data * (1.0 - sig)))

        return Tensor(out_data, _parents=(self,), _backward=bwd)

    def floor(self):
        """Elementwise floor; gradient is zero almost everywhere."""
        out_data = np.floor(self.data)

        def bwd(g):
            self._accum(np.zeros_like(self.data))

        return Tensor(out_data, _parents=(self,), _backward=bwd)

    # --------------------------------------------------------------- shaping

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out_data = self.data.reshape(shape)

        def bwd(g):
            self._accum(g.reshape(self.data.shape))

        return Tensor(out_data, _parents=(self,), _backward=bwd)

    def __getitem__(self, key):
        out_data = self.data[key]

        def bwd(g):
            full = np.zeros_like(self.data)
            np.add.at(full, key, g)
            self._accum(full)

        return Tensor(out_data, _parents=(self,), _backward=bwd)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        axes = axes or tuple(reversed(range(self.data.ndim)))
        inv = np.argsort(axes)
        out_data = np.transpose(self.data, axes)

        def bwd(g):
            self._accum(np.transpose(g, inv))

        return Tensor(out_data, _parents=(self,), _backward=bwd)

    def take_columns(self, idx: np.ndarray):
        """Gather columns `idx` along the last axis."""
        idx = np.asarray(idx)
        out_data = np.take(self.data, idx, axis=-1)

        def bwd(g):
            full = np.zeros_like(self.data)
            flat = full.reshape(-1, full.shape[-1])
            gflat = g.reshape(-1, g.shape[-1])
            np.add.at(flat, (slice(None), idx), gflat)
            self._accum(flat.reshape(full.shape))

        return Tensor(out_data, _parents=(self,), _backward=bwd)

    def median_lastaxis(self):
        """Median over the last axis; ties broken by stable sort order.

        Subgradient: the gradient is routed to the selected middle element(s),
        split evenly when the axis length is even.
        """
        n = self.data.shape[-1]
        order = np.argsort(self.data, axis=-1, kind="stable")
        if n % 2 == 1:
            mid = order[..., n // 2]
            out_data = np.take_along_axis(self.data, mid[..., None], axis=-1)[..., 0]

            def bwd(g):
                full = np.zeros_like(self.data)
                np.put_along_axis(full, mid[..., None], g[..., None], axis=-1)
                self._accum(full)

        else:
            lo = order[..., n // 2 - 1]
            hi = order[..., n // 2]
            vlo = np.take_along_axis(self.data, lo[..., None], axis=-1)[..., 0]
            vhi = np.take_along_axis(self.data, hi[..., None], axis=-1)[..., 0]
            out_data = 0.5 * (vlo + vhi)

            def bwd(g):
                full = np.zeros_like(self.data)
                half = 0.5 * g[..., None]
                np.put_along_axis(full, lo[..., None], half, axis=-1)
                prev = np.take_along_axis(full, hi[..., None], axis=-1)
                np.put_along_axis(full, hi[..., None], prev + half, axis=-1)
                self._accum(full)

        return Tensor(out_data, _parents=(self,), _backward=bwd)


def concat(tensors, axis: int = -1) -> Tensor:
    """Concatenate tensors along `axis`, splitting gradients back."""
    tensors = [Tensor._lift(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, a, b in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(a, b)
                t._accum(g[tuple(sl)])

    return Tensor(out_data, _parents=tuple(tensors), _backward=bwd)


def mod1(x: Tensor) -> Tensor:
    """x mod 1 with unit gradient away from the wrap points."""
    return x - x.floor()


def reverse_grad(f, x) -> Tensor:
    """Gradient of the scalar-valued function `f` at `x`.

    `x` may be a Tensor or ndarray; a fresh grad-requiring leaf is created so
    the caller's tensor is untouched. Returns a Tensor with the shape of `x`.
    """
    leaf = Tensor(x.data if isinstance(x, Tensor) else x, requires_grad=True)
    out = f(leaf)
    if not isinstance(out, Tensor):
        raise TypeError("f must return a Tensor")
    out.backward()
    g = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
    return Tensor(_check_finite(g, "reverse_grad"))
