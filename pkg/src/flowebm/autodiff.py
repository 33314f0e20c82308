"""Minimal reverse-mode autodiff on float64 numpy arrays.

Provides the `Var` tape node, a flat named parameter store, an Adam
optimizer with explicit ascent/descent direction, and a central-difference
gradient checker. Everything runs in 64-bit floats; gradients are checked
for finiteness when collected.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Var",
    "no_grad",
    "grad_enabled",
    "backward",
    "ParameterStore",
    "NonFiniteGradientError",
    "collect_gradient",
    "AdamState",
    "adam_step",
    "FiniteDiffReport",
    "finite_diff_check",
]


_GRAD_ENABLED = [True]


@contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def grad_enabled():
    return _GRAD_ENABLED[-1]


class NonFiniteGradientError(RuntimeError):
    """Raised when a collected gradient contains NaN or infinity."""

    def __init__(self, name, indices):
        self.name = name
        self.indices = indices
        super().__init__(
            f"non-finite gradient in '{name}' at flat indices {indices[:8].tolist()}"
        )


class Var:
    """A node in the reverse-mode tape wrapping a float64 ndarray.

    `_vjp(g)` returns one cotangent per parent. Nodes created while
    recording is disabled carry no parents and behave like constants.
    """

    __slots__ = ("value", "grad", "_parents", "_vjp")

    def __init__(self, value, parents=(), vjp=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        if grad_enabled():
            self._parents = parents
            self._vjp = vjp
        else:
            self._parents = ()
            self._vjp = None

    @property
    def shape(self):
        return self.value.shape

    # -- helpers -------------------------------------------------------

    @staticmethod
    def _lift(other):
        return other if isinstance(other, Var) else Var(other)

    def __repr__(self):
        return f"Var(shape={self.value.shape})"

    # -- arithmetic ----------------------------------------------------

    def __add__(self, other):
        other = Var._lift(other)
        return Var(
            self.value + other.value,
            (self, other),
            lambda g: (_unbroadcast(g, self.shape), _unbroadcast(g, other.shape)),
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = Var._lift(other)
        return Var(
            self.value - other.value,
            (self, other),
            lambda g: (_unbroadcast(g, self.shape), _unbroadcast(-g, other.shape)),
        )

    def __rsub__(self, other):
        return Var._lift(other).__sub__(self)

    def __mul__(self, other):
        other = Var._lift(other)
        return Var(
            self.value * other.value,
            (self, other),
            lambda g: (
                _unbroadcast(g * other.value, self.shape),
                _unbroadcast(g * self.value, other.shape),
            ),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Var._lift(other)
        out = self.value / other.value
        return Var(
            out,
            (self, other),
            lambda g: (
                _unbroadcast(g / other.value, self.shape),
                _unbroadcast(-g * out / other.value, other.shape),
            ),
        )

    def __rtruediv__(self, other):
        return Var._lift(other).__truediv__(self)

    def __neg__(self):
        return Var(-self.value, (self,), lambda g: (-g,))

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only constant exponents are supported")
        out = self.value ** exponent
        return Var(
            out,
            (self,),
            lambda g: (g * exponent * self.value ** (exponent - 1),),
        )

    def __getitem__(self, key):
        def vjp(g):
            full = np.zeros_like(self.value)
            full[key] = g
            return (full,)

        return Var(self.value[key], (self,), vjp)

    def reshape(self, *shape):
        return Var(
            self.value.reshape(*shape),
            (self,),
            lambda g: (g.reshape(self.value.shape),),
        )

    def sum(self, axis=None, keepdims=False):
        out = self.value.sum(axis=axis, keepdims=keepdims)

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, self.value.shape).copy(),)
            gg = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gg, self.value.shape).copy(),)

        return Var(out, (self,), vjp)

    def mean(self, axis=None, keepdims=False):
        n = self.value.size if axis is None else self.value.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) / float(n)

    def detach(self):
        return Var(self.value)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` after a broadcasting binary op."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise primitives ------------------------------------------------


def exp(x):
    x = Var._lift(x)
    out = np.exp(x.value)
    return Var(out, (x,), lambda g: (g * out,))


def log(x):
    x = Var._lift(x)
    return Var(np.log(x.value), (x,), lambda g: (g / x.value,))


def sqrt(x):
    x = Var._lift(x)
    out = np.sqrt(x.value)
    return Var(out, (x,), lambda g: (g / (2.0 * out),))


def sigmoid(x):
    x = Var._lift(x)
    out = np.empty_like(x.value)
    pos = x.value >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.value[pos]))
    ex = np.exp(x.value[~pos])
    out[~pos] = ex / (1.0 + ex)
    return Var(out, (x,), lambda g: (g * out * (1.0 - out),))


def silu(x):
    """x * sigmoid(x)."""
    x = Var._lift(x)
    return x * sigmoid(x)


def softplus(x):
    x = Var._lift(x)
    out = np.maximum(x.value, 0.0) + np.log1p(np.exp(-np.abs(x.value)))

    def vjp(g):
        s = np.empty_like(x.value)
        pos = x.value >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-x.value[pos]))
        ex = np.exp(x.value[~pos])
        s[~pos] = ex / (1.0 + ex)
        return (g * s,)

    return Var(out, (x,), vjp)


def matmul(a, b):
    a, b = Var._lift(a), Var._lift(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ValueError("matmul supports 2-D operands only")
    return Var(
        a.value @ b.value,
        (a, b),
        lambda g: (g @ b.value.T, a.value.T @ g),
    )


def where(cond, a, b):
    """Select with a boolean (constant) condition."""
    cond = np.asarray(cond, dtype=bool)
    a, b = Var._lift(a), Var._lift(b)
    return Var(
        np.where(cond, a.value, b.value),
        (a, b),
        lambda g: (
            _unbroadcast(np.where(cond, g, 0.0), a.shape),
            _unbroadcast(np.where(cond, 0.0, g), b.shape),
        ),
    )


def concat(parts, axis=-1):
    parts = [Var._lift(p) for p in parts]
    sizes = [p.value.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(parts))
        )

    return Var(np.concatenate([p.value for p in parts], axis=axis), tuple(parts), vjp)


def cumsum(x, axis=-1):
    x = Var._lift(x)
    return Var(
        np.cumsum(x.value, axis=axis),
        (x,),
        lambda g: (np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis),),
    )


def take_along(x, idx, axis=-1):
    """Gather one entry per row along `axis`; indices must be unique per row."""
    x = Var._lift(x)
    idx = np.asarray(idx)

    def vjp(g):
        full = np.zeros_like(x.value)
        np.put_along_axis(full, idx, g, axis=axis)
        return (full,)

    return Var(np.take_along_axis(x.value, idx, axis=axis), (x,), vjp)


def index_select(x, cols):
    """Select columns (last axis) by unique integer indices."""
    x = Var._lift(x)
    cols = np.asarray(cols, dtype=np.intp)

    def vjp(g):
        full = np.zeros_like(x.value)
        full[..., cols] = g
        return (full,)

    return Var(x.value[..., cols], (x,), vjp)


def softmax(x, axis=-1):
    """Stable softmax; the max shift is treated as a constant (exact gradient)."""
    x = Var._lift(x)
    shift = np.max(x.value, axis=axis, keepdims=True)
    e = exp(x - shift)
    return e / e.sum(axis=axis, keepdims=True)


def backward(root):
    """Accumulate gradients of `root` (scalar) into the tape leaves."""
    if root.value.size != 1:
        raise ValueError("backward expects a scalar output")
    topo = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    root.grad = np.ones_like(root.value)
    for node in reversed(topo):
        if node._vjp is None or node.grad is None:
            continue
        for parent, g in zip(node._parents, node._vjp(node.grad)):
            parent.grad = g if parent.grad is None else parent.grad + g


# -- flat parameter storage -------------------------------------------------


class ParameterStore:
    """Flat float64 parameter vector with a named layout.

    Named slices are disjoint and cover the vector exactly once; the total
    length is fixed once `finalize` has been called.
    """

    def __init__(self):
        self._names = []
        self._slices = {}
        self._shapes = {}
        self._pending = []
        self.values = None

    def add(self, name, array):
        if self.values is not None:
            raise RuntimeError("store already finalized")
        if name in self._shapes:
            raise ValueError(f"duplicate parameter name '{name}'")
        array = np.asarray(array, dtype=np.float64)
        self._names.append(name)
        self._shapes[name] = array.shape
        self._pending.append(array.ravel())
        return name

    def finalize(self):
        if self.values is not None:
            return self
        flat = np.concatenate(self._pending) if self._pending else np.zeros(0)
        self.values = flat
        offset = 0
        for name in self._names:
            size = int(np.prod(self._shapes[name])) if self._shapes[name] else 1
            self._slices[name] = slice(offset, offset + size)
            offset += size
        self._pending = None
        return self

    @property
    def size(self):
        return self.values.size

    @property
    def names(self):
        return list(self._names)

    def slice_of(self, name):
        return self._slices[name]

    def view(self, name):
        """Writable reshaped view into the flat vector."""
        return self.values[self._slices[name]].reshape(self._shapes[name])

    def get(self, name):
        return self.view(name).copy()

    def set(self, name, array):
        self.view(name)[...] = np.asarray(array, dtype=np.float64)

    def leaves(self):
        """Fresh tape leaves, one per named parameter."""
        return {name: Var(self.view(name)) for name in self._names}

    def layout(self):
        return {name: (self._slices[name], self._shapes[name]) for name in self._names}


def collect_gradient(store, leaves):
    """Gather leaf gradients into a flat vector matching the store layout.

    Raises `NonFiniteGradientError` naming the first offending parameter.
    """
    out = np.zeros(store.size)
    for name in store.names:
        leaf = leaves[name]
        if leaf.grad is None:
            continue
        flat = np.asarray(leaf.grad, dtype=np.float64).ravel()
        bad = ~np.isfinite(flat)
        if bad.any():
            raise NonFiniteGradientError(name, np.flatnonzero(bad))
        out[store.slice_of(name)] = flat
    return out


# -- Adam -------------------------------------------------------------------


@dataclass
class AdamState:
    """Adam moment accumulators for one flat parameter vector."""

    size: int
    lr: float
    beta1: float = 0.0
    beta2: float = 0.9
    eps: float = 1e-8
    m: np.ndarray = field(default=None)
    v: np.ndarray = field(default=None)
    step_count: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.m is None:
            self.m = np.zeros(self.size)
        if self.v is None:
            self.v = np.zeros(self.size)

    def copy(self):
        return AdamState(
            self.size, self.lr, self.beta1, self.beta2, self.eps,
            self.m.copy(), self.v.copy(), self.step_count,
        )


def adam_step(state, params, grad, direction="descent"):
    """One in-place Adam update with bias correction.

    `direction="ascent"` is exactly a descent step on the negated gradient.
    Non-finite gradient entries reject the update.
    """
    if direction not in ("descent", "ascent"):
        raise ValueError(f"unknown direction '{direction}'")
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.shape:
        raise ValueError("gradient / parameter length mismatch")
    bad = ~np.isfinite(grad)
    if bad.any():
        raise NonFiniteGradientError("<grad>", np.flatnonzero(bad))
    if direction == "ascent":
        grad = -grad
    state.step_count += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1 ** state.step_count)
    v_hat = state.v / (1.0 - state.beta2 ** state.step_count)
    params -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


# -- finite differences -----------------------------------------------------


@dataclass
class FiniteDiffReport:
    estimates: np.ndarray
    analytic: np.ndarray
    rel_errors: np.ndarray
    failures: np.ndarray          # indices exceeding tol or non-finite probes
    non_finite: np.ndarray        # indices where a probe evaluation was non-finite
    tol: float

    @property
    def passed(self):
        return self.failures.size == 0

    @property
    def max_rel_error(self):
        return float(np.max(self.rel_errors)) if self.rel_errors.size else 0.0


def finite_diff_check(loss, params, analytic_grad, h=1e-4, tol=1e-4):
    """Compare `analytic_grad` against central differences of `loss`.

    Per coordinate the step is h * max(1, |p_i|). Relative error uses a
    floor tied to the overall gradient scale so that coordinates with a
    true gradient near zero are judged against truncation noise rather than
    against themselves.
    """
    params = np.asarray(params, dtype=np.float64)
    analytic = np.asarray(analytic_grad, dtype=np.float64)
    if analytic.shape != params.shape:
        raise ValueError("analytic gradient length mismatch")
    n = params.size
    est = np.zeros(n)
    non_finite = []
    probe = params.copy()
    for i in range(n):
        hi = h * max(1.0, abs(params[i]))
        probe[i] = params[i] + hi
        up = loss(probe)
        probe[i] = params[i] - hi
        down = loss(probe)
        probe[i] = params[i]
        if not (math.isfinite(up) and math.isfinite(down)):
            non_finite.append(i)
            est[i] = np.nan
            continue
        est[i] = (up - down) / (2.0 * hi)
    non_finite = np.asarray(non_finite, dtype=np.intp)
    scale = np.maximum(np.abs(est[np.isfinite(est)]).max(initial=0.0),
                       np.abs(analytic).max(initial=0.0))
    floor = 1e-6 * (1.0 + scale)
    denom = np.maximum(np.maximum(np.abs(est), np.abs(analytic)), floor)
    rel = np.abs(est - analytic) / denom
    rel[non_finite] = np.inf
    failures = np.flatnonzero(~(rel <= tol))
    return FiniteDiffReport(est, analytic, rel, failures, non_finite, tol)
