"""Reverse-mode autodiff on numpy arrays.

A Tensor wraps an ndarray plus an optional gradient and a closure that
propagates incoming gradients to its parents.  Calling backward() on a
scalar walks the graph in reverse topological order and accumulates
gradients additively, so shared subexpressions are handled for free.

Two module-level switches alter behaviour for debugging and testing:

* ``debug_nan_checks()`` re-checks every primitive's output for
  non-finite values and raises NumericsError naming the op.
* ``exact_reductions()`` replaces the floating-point reductions inside
  matmul, sum/mean and softmax_rows with compensated summation
  (math.fsum).  fsum is exactly rounded, hence invariant to operand
  order; under this mode reduction results do not depend on where an
  element sits in the array, which the bit-level invariance tests rely
  on.  It is float64-only and slow, meant for small inputs.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

from .errors import NumericsError, ShapeError

_GRAD_ENABLED = True
_DEBUG_NAN = False
_EXACT = False


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def debug_nan_checks():
    """Raise NumericsError as soon as any primitive produces a non-finite value."""
    global _DEBUG_NAN
    prev = _DEBUG_NAN
    _DEBUG_NAN = True
    try:
        yield
    finally:
        _DEBUG_NAN = prev


@contextlib.contextmanager
def exact_reductions():
    """Use order-invariant (exactly rounded) summation in reductions."""
    global _EXACT
    prev = _EXACT
    _EXACT = True
    try:
        yield
    finally:
        _EXACT = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def exact_mode() -> bool:
    return _EXACT


# ---------------------------------------------------------------------------
# order-invariant reductions


def _fsum_last(a: np.ndarray) -> np.ndarray:
    """Exactly rounded sum over the last axis (float64, slow)."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    flat = a.reshape(-1, a.shape[-1]) if a.ndim else a.reshape(1, 1)
    out = np.empty(flat.shape[0], dtype=np.float64)
    for i in range(flat.shape[0]):
        out[i] = math.fsum(flat[i])
    return out.reshape(a.shape[:-1])


def exact_sum(a: np.ndarray, axis=None, keepdims: bool = False) -> np.ndarray:
    """np.sum replacement whose result is independent of summation order."""
    a = np.asarray(a, dtype=np.float64)
    if axis is None:
        res = np.float64(math.fsum(a.reshape(-1)))
        return np.reshape(res, (1,) * a.ndim) if keepdims else res
    axes = (axis,) if np.isscalar(axis) else tuple(axis)
    axes = tuple(ax % a.ndim for ax in axes)
    keep = [ax for ax in range(a.ndim) if ax not in axes]
    moved = np.transpose(a, keep + list(axes))
    moved = moved.reshape(tuple(a.shape[k] for k in keep) + (-1,))
    res = _fsum_last(moved)
    if keepdims:
        shape = tuple(1 if ax in axes else a.shape[ax] for ax in range(a.ndim))
        res = res.reshape(shape)
    return res


def exact_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with exactly rounded dot products (float64, slow).

    Supports the same shapes as np.matmul for >=2-d operands.  Each output
    element is fsum over its k products, so the value is a pure function of
    the two operand slices regardless of their position in the batch.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("exact_matmul needs operands of rank >= 2")
    # products: (..., m, k, n) then reduce axis -2
    prods = a[..., :, :, None] * b[..., None, :, :]
    return _fsum_last(np.moveaxis(prods, -2, -1))


def _sum_dispatch(a: np.ndarray, axis=None, keepdims: bool = False) -> np.ndarray:
    if _EXACT:
        return exact_sum(a, axis=axis, keepdims=keepdims).astype(a.dtype, copy=False)
    return np.sum(a, axis=axis, keepdims=keepdims)


def _matmul_dispatch(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if _EXACT:
        return exact_matmul(a, b).astype(np.result_type(a, b), copy=False)
    return np.matmul(a, b)


# ---------------------------------------------------------------------------


def _sum_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to ``shape`` by summing broadcast axes."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _coerce(value, dtype):
    """Turn a scalar or array-like operand into an ndarray of ``dtype``."""
    if isinstance(value, Tensor):
        raise TypeError("internal: Tensor passed to _coerce")
    arr = np.asarray(value)
    if arr.dtype != dtype:
        arr = arr.astype(dtype)
    return arr


class Tensor:
    """An ndarray with a gradient slot and a backward closure."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = "leaf"
        self._parents = ()
        self._backward = None

    # -- construction of graph nodes ------------------------------------

    @staticmethod
    def _make(data: np.ndarray, parents: tuple, backward, op: str) -> "Tensor":
        """Wrap a primitive's output, wiring the graph if grads are on.

        ``backward`` is a callable grad -> tuple of parent gradients
        (None for parents that don't need one).  Layer modules use this
        hook to define fused primitives outside this file.
        """
        if _DEBUG_NAN and not np.all(np.isfinite(data)):
            raise NumericsError(f"non-finite values produced by op '{op}'")
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.op = op
        needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- basic properties -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _bad_item(self)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag}, op={self.op})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # -- arithmetic --------------------------------------------------------

    def _binary(self, other, fwd, bwd, op):
        other = other if isinstance(other, Tensor) else Tensor(_coerce(other, self.dtype))
        out_data = fwd(self.data, other.data)

        def backward(g):
            return bwd(g, self.data, other.data)

        return Tensor._make(out_data, (self, other), backward, op)

    def __add__(self, other):
        return self._binary(
            other,
            lambda a, b: a + b,
            lambda g, a, b: (_sum_to(g, a.shape), _sum_to(g, b.shape)),
            "add",
        )

    __radd__ = __add__

    def __sub__(self, other):
        return self._binary(
            other,
            lambda a, b: a - b,
            lambda g, a, b: (_sum_to(g, a.shape), _sum_to(-g, b.shape)),
            "sub",
        )

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        return self._binary(
            other,
            lambda a, b: a * b,
            lambda g, a, b: (_sum_to(g * b, a.shape), _sum_to(g * a, b.shape)),
            "mul",
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self._binary(
            other,
            lambda a, b: a / b,
            lambda g, a, b: (_sum_to(g / b, a.shape), _sum_to(-g * a / (b * b), b.shape)),
            "div",
        )

    def __rtruediv__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(_coerce(other, self.dtype))
        return other / self

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        a = self.data
        out = a**exponent

        def backward(g):
            return (g * exponent * a ** (exponent - 1),)

        return Tensor._make(out, (self,), backward, "pow")

    def __matmul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(_coerce(other, self.dtype))
        a, b = self.data, other.data
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
        out = _matmul_dispatch(a, b)

        def backward(g):
            ga = _matmul_dispatch(g, np.swapaxes(b, -1, -2))
            gb = _matmul_dispatch(np.swapaxes(a, -1, -2), g)
            return _sum_to(ga, a.shape), _sum_to(gb, b.shape)

        return Tensor._make(out, (self, other), backward, "matmul")

    # -- shape ops ----------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        out = self.data.reshape(shape)
        return Tensor._make(out, (self,), lambda g: (g.reshape(old),), "reshape")

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        axes = tuple(ax % self.ndim for ax in axes)
        inv = np.argsort(axes)
        out = np.transpose(self.data, axes)
        return Tensor._make(out, (self,), lambda g: (np.transpose(g, inv),), "transpose")

    def swap_last(self) -> "Tensor":
        """Transpose the final two axes (batch dims untouched)."""
        out = np.swapaxes(self.data, -1, -2)
        return Tensor._make(out, (self,), lambda g: (np.swapaxes(g, -1, -2),), "swap_last")

    def broadcast_to(self, shape) -> "Tensor":
        shape = tuple(shape)
        old = self.data.shape
        out = np.broadcast_to(self.data, shape)
        return Tensor._make(out, (self,), lambda g: (_sum_to(g, old),), "broadcast_to")

    def __getitem__(self, key) -> "Tensor":
        out = self.data[key]
        if isinstance(out, np.ndarray) and out.base is not None:
            out = out.copy()
        shape, dtype = self.data.shape, self.data.dtype

        def backward(g):
            full = np.zeros(shape, dtype=dtype)
            full[key] = g
            return (full,)

        return Tensor._make(np.asarray(out), (self,), backward, "slice")

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = _sum_dispatch(self.data, axis=axis, keepdims=keepdims)
        shape = self.data.shape

        def backward(g):
            if axis is None:
                return (np.broadcast_to(np.asarray(g), shape).copy(),)
            axes = (axis,) if np.isscalar(axis) else tuple(axis)
            axes = tuple(ax % len(shape) for ax in axes)
            g = np.asarray(g)
            if not keepdims:
                g = np.expand_dims(g, axes)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(np.asarray(out), (self,), backward, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.data.size
        else:
            axes = (axis,) if np.isscalar(axis) else tuple(axis)
            count = int(np.prod([self.data.shape[ax % self.ndim] for ax in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- pointwise nonlinearities ---------------------------------------------

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,), "exp")

    def log(self) -> "Tensor":
        a = self.data
        return Tensor._make(np.log(a), (self,), lambda g: (g / a,), "log")

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)
        return Tensor._make(out, (self,), lambda g: (g / (2.0 * out),), "sqrt")

    def tanh(self) -> "Tensor":
        out = np.tanh(self.data)
        return Tensor._make(out, (self,), lambda g: (g * (1.0 - out * out),), "tanh")

    def relu(self) -> "Tensor":
        a = self.data
        out = np.maximum(a, 0)
        return Tensor._make(out, (self,), lambda g: (g * (a > 0),), "relu")

    def gelu(self) -> "Tensor":
        """tanh-form gelu; fixed constants keep it bit-reproducible."""
        c = 0.7978845608028654  # sqrt(2/pi)
        a = self.data
        inner = c * (a + 0.044715 * a**3)
        t = np.tanh(inner)
        out = 0.5 * a * (1.0 + t)

        def backward(g):
            dinner = c * (1.0 + 3 * 0.044715 * a * a)
            return (g * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * dinner),)

        return Tensor._make(out, (self,), backward, "gelu")

    # -- autodiff -----------------------------------------------------------

    def backward(self):
        """Backpropagate from this scalar through the recorded graph."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.data.shape}")
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")

        order: list[Tensor] = []
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
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if g.shape != parent.data.shape:
                    raise ShapeError(
                        f"op '{node.op}' produced grad {g.shape} for parent {parent.data.shape}"
                    )
                if parent.grad is None:
                    parent.grad = g.astype(parent.data.dtype, copy=True)
                else:
                    parent.grad += g


def _bad_item(t: Tensor):
    raise ShapeError(f"item() needs a single element, got shape {t.data.shape}")


# ---------------------------------------------------------------------------
# free functions on tensors


def concat(tensors, axis: int = 0) -> Tensor:
    """Concatenate along ``axis``; gradient splits back to the parents."""
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return Tensor._make(out, tuple(tensors), backward, "concat")


def softmax_rows(x: Tensor, temperature: float = 1.0) -> Tensor:
    """Softmax over the last axis of ``x`` after dividing by ``temperature``.

    The row max is subtracted before exponentiation, so large logits
    cannot overflow.  Output rows sum to 1 and the dtype is preserved.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = x.data / np.asarray(temperature, dtype=x.dtype)
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / _sum_dispatch(e, axis=-1, keepdims=True)

    def backward(g):
        dot = _sum_dispatch(g * y, axis=-1, keepdims=True)
        return ((g - dot) * y / temperature,)

    return Tensor._make(y, (x,), backward, "softmax_rows")


def log_softmax_rows(x: Tensor, temperature: float = 1.0) -> Tensor:
    """log(softmax_rows(x, temperature)), computed stably via logsumexp."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = x.data / np.asarray(temperature, dtype=x.dtype)
    m = np.max(z, axis=-1, keepdims=True)
    e = np.exp(z - m)
    s = _sum_dispatch(e, axis=-1, keepdims=True)
    out = z - m - np.log(s)
    y = e / s

    def backward(g):
        return ((g - _sum_dispatch(g, axis=-1, keepdims=True) * y) / temperature,)

    return Tensor._make(out, (x,), backward, "log_softmax_rows")


def stack_rows(tensors) -> Tensor:
    """Stack equal-shape tensors along a new leading axis."""
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=0)

    def backward(g):
        return tuple(np.ascontiguousarray(g[i]) for i in range(len(tensors)))

    return Tensor._make(out, tuple(tensors), backward, "stack_rows")


# ---------------------------------------------------------------------------
# parameter initialisation


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02,
                     dtype=np.float32) -> np.ndarray:
    """Normal(0, std) samples re-drawn until they land within two sigma."""
    out = rng.standard_normal(size=shape)
    bad = np.abs(out) > 2.0
    while np.any(bad):
        out[bad] = rng.standard_normal(size=int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)
