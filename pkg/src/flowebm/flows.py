"""Rational-quadratic spline coupling flow with exact log-density.

The transform is monotone on [-bound, bound] and the identity outside.
Coupling layers alternate contiguous halves of the dimensions; each layer's
conditioner is a two-hidden-layer SiLU perceptron whose final layer is
zero-initialized, so a freshly built flow is exactly the identity map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Var

MIN_BIN_WIDTH = 1e-3
MIN_BIN_HEIGHT = 1e-3
MIN_DERIVATIVE = 1e-3
# softplus offset chosen so a raw value of zero gives a knot slope of exactly 1
_DERIV_SHIFT = math.log(math.expm1(1.0 - MIN_DERIVATIVE))

LOG_TWO_PI = math.log(2.0 * math.pi)

__all__ = [
    "SplineParams",
    "spline_forward",
    "spline_inverse",
    "SplineCouplingFlow",
    "FlowEvaluationError",
]


class FlowEvaluationError(RuntimeError):
    """Non-finite intermediate during a flow evaluation."""

    def __init__(self, layer_index, what):
        self.layer_index = layer_index
        super().__init__(f"non-finite {what} in coupling layer {layer_index}")


@dataclass
class SplineParams:
    """Explicit spline description: bin widths/heights summing to 2*bound and
    K+1 positive knot slopes (boundary slopes of 1 give identity tails)."""

    widths: np.ndarray
    heights: np.ndarray
    derivatives: np.ndarray
    bound: float = 4.0

    def __post_init__(self):
        self.widths = np.asarray(self.widths, dtype=np.float64)
        self.heights = np.asarray(self.heights, dtype=np.float64)
        self.derivatives = np.asarray(self.derivatives, dtype=np.float64)
        for name, arr in (("widths", self.widths), ("heights", self.heights),
                          ("derivatives", self.derivatives)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite spline {name}")
            if np.any(arr <= 0):
                raise ValueError(f"spline {name} must be strictly positive")
        k = self.widths.shape[-1]
        if self.heights.shape[-1] != k or self.derivatives.shape[-1] != k + 1:
            raise ValueError("expected K widths, K heights and K+1 derivatives")
        span = 2.0 * self.bound
        if not np.allclose(self.widths.sum(-1), span, rtol=1e-8):
            raise ValueError("widths must sum to 2*bound")
        if not np.allclose(self.heights.sum(-1), span, rtol=1e-8):
            raise ValueError("heights must sum to 2*bound")

    def knots(self):
        """(x_knots, y_knots) arrays of shape (..., K+1)."""
        zeros = np.zeros(self.widths.shape[:-1] + (1,))
        xk = -self.bound + np.concatenate([zeros, np.cumsum(self.widths, -1)], -1)
        yk = -self.bound + np.concatenate([zeros, np.cumsum(self.heights, -1)], -1)
        return xk, yk


def _search_bins(values, knots):
    """Index of the bin containing each value; clipped to valid bins."""
    idx = np.sum(values[..., None] >= knots, axis=-1) - 1
    return np.clip(idx, 0, knots.shape[-1] - 2)


def _rq_core(inputs, x_knots, y_knots, derivs, bound, inverse):
    """Monotone rational-quadratic transform with identity tails.

    All arguments may be tape `Var`s. Returns (outputs, log dy/dx at the
    mapped point); the caller negates the log-derivative for inverses.
    Out-of-range lanes are evaluated at a safe interior point and then
    replaced by the identity, so no invalid values reach the tape.
    """
    inputs = Var._lift(inputs)
    ref_knots = (y_knots if inverse else x_knots).value
    inside = (inputs.value >= -bound) & (inputs.value <= bound)
    safe = ad.where(inside, inputs, np.zeros_like(inputs.value))
    idx = _search_bins(safe.value, ref_knots)[..., None]

    xk = ad.take_along(x_knots, idx, -1).reshape(*inputs.shape)
    yk = ad.take_along(y_knots, idx, -1).reshape(*inputs.shape)
    w = ad.take_along(x_knots, idx + 1, -1).reshape(*inputs.shape) - xk
    h = ad.take_along(y_knots, idx + 1, -1).reshape(*inputs.shape) - yk
    d0 = ad.take_along(derivs, idx, -1).reshape(*inputs.shape)
    d1 = ad.take_along(derivs, idx + 1, -1).reshape(*inputs.shape)
    s = h / w

    if inverse:
        dy = safe - yk
        coef = d0 + d1 - 2.0 * s
        a = dy * coef + h * (s - d0)
        b = h * d0 - dy * coef
        c = -s * dy
        disc = b * b - 4.0 * a * c
        disc = ad.where(disc.value > 0.0, disc, np.full_like(disc.value, 1e-300))
        theta = (2.0 * c) / (-b - ad.sqrt(disc))
        out = theta * w + xk
    else:
        theta = (safe - xk) / w
        out = yk + (h * (s * theta**2 + d0 * theta * (1.0 - theta))) / (
            s + (d0 + d1 - 2.0 * s) * theta * (1.0 - theta)
        )

    one_m = 1.0 - theta
    denom = s + (d0 + d1 - 2.0 * s) * theta * one_m
    num = (s**2) * (d1 * theta**2 + 2.0 * s * theta * one_m + d0 * one_m**2)
    log_grad = ad.log(num) - 2.0 * ad.log(denom)

    out = ad.where(inside, out, inputs)
    log_grad = ad.where(inside, log_grad, np.zeros_like(inputs.value))
    return out, log_grad


def _knots_from_raw(raw, n_bins, bound):
    """Turn raw conditioner outputs (..., 3K-1) into knot arrays.

    Softmax-normalized widths/heights with minimum bin sizes; interior
    slopes via shifted softplus (raw zero -> slope one); boundary slopes
    pinned to one so the tails join the identity smoothly.
    """
    k = n_bins
    w_raw = ad.index_select(raw, np.arange(k))
    h_raw = ad.index_select(raw, np.arange(k, 2 * k))
    d_raw = ad.index_select(raw, np.arange(2 * k, 3 * k - 1))

    def knots(part_raw):
        frac = MIN_BIN_WIDTH + (1.0 - MIN_BIN_WIDTH * k) * ad.softmax(part_raw, -1)
        cum = ad.cumsum(frac, -1)
        total = cum[..., -1:]
        scaled = -bound + (2.0 * bound) * (cum / total)
        left = Var(np.full(scaled.value.shape[:-1] + (1,), -bound))
        return ad.concat([left, scaled], -1)

    xk = knots(w_raw)
    yk = knots(h_raw)
    interior = MIN_DERIVATIVE + ad.softplus(d_raw + _DERIV_SHIFT)
    ones = Var(np.ones(interior.value.shape[:-1] + (1,)))
    derivs = ad.concat([ones, interior, ones], -1)
    return xk, yk, derivs


def _apply_spline(values, params, inverse):
    values = np.asarray(values, dtype=np.float64)
    xk, yk = params.knots()
    k1 = xk.shape[-1]
    target = values.shape + (k1,)
    with ad.no_grad():
        out, ld = _rq_core(
            values,
            Var(np.broadcast_to(xk, target)),
            Var(np.broadcast_to(yk, target)),
            Var(np.broadcast_to(params.derivatives, target)),
            params.bound,
            inverse,
        )
    return out.value, ld.value


def spline_forward(x, params):
    """Apply the spline. Returns (y, log dy/dx); identity outside the bound."""
    return _apply_spline(x, params, inverse=False)


def spline_inverse(y, params):
    """Invert the spline. Returns (x, log dx/dy)."""
    out, ld = _apply_spline(y, params, inverse=True)
    return out, -ld


def _he_normal(rng, fan_in, shape):
    return rng.normal(0.0, math.sqrt(1.0 / fan_in), size=shape)


class SplineCouplingFlow:
    """Stack of spline coupling layers over a standard-normal base.

    Parameters live in a single flat `ParameterStore`; a fresh model is the
    identity map because every conditioner's output layer starts at zero.
    `cond_dim` enables conditional densities: the condition vector is
    concatenated onto every conditioner input.
    """

    def __init__(self, dim, n_transforms=5, n_bins=8, hidden=64,
                 tail_bound=4.0, cond_dim=None, rng=None):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        if dim == 1 and n_transforms > 0:
            raise ValueError("coupling layers need dim >= 2")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dim = dim
        self.n_transforms = n_transforms
        self.n_bins = n_bins
        self.hidden = hidden
        self.tail_bound = float(tail_bound)
        self.cond_dim = cond_dim

        half = (dim + 1) // 2
        first = np.arange(half)
        second = np.arange(half, dim)
        self._masks = []
        store = ad.ParameterStore()
        for i in range(n_transforms):
            id_cols, tr_cols = (first, second) if i % 2 == 0 else (second, first)
            self._masks.append((id_cols, tr_cols))
            d_in = len(id_cols) + (cond_dim or 0)
            d_out = len(tr_cols) * (3 * n_bins - 1)
            store.add(f"layer{i}.w0", _he_normal(rng, d_in, (d_in, hidden)))
            store.add(f"layer{i}.b0", np.zeros(hidden))
            store.add(f"layer{i}.w1", _he_normal(rng, hidden, (hidden, hidden)))
            store.add(f"layer{i}.b1", np.zeros(hidden))
            store.add(f"layer{i}.w2", np.zeros((hidden, d_out)))
            store.add(f"layer{i}.b2", np.zeros(d_out))
        self.params = store.finalize()

    # -- internals -----------------------------------------------------

    def _conditioner(self, i, ident, condition, leaves):
        h = ident if condition is None else ad.concat([ident, condition], -1)
        h = ad.silu(ad.matmul(h, leaves[f"layer{i}.w0"]) + leaves[f"layer{i}.b0"])
        h = ad.silu(ad.matmul(h, leaves[f"layer{i}.w1"]) + leaves[f"layer{i}.b1"])
        return ad.matmul(h, leaves[f"layer{i}.w2"]) + leaves[f"layer{i}.b2"]

    def _layer_apply(self, i, v, condition, leaves, inverse):
        id_cols, tr_cols = self._masks[i]
        ident = ad.index_select(v, id_cols)
        moving = ad.index_select(v, tr_cols)
        raw = self._conditioner(i, ident, condition, leaves)
        raw = raw.reshape(-1, len(tr_cols), 3 * self.n_bins - 1)
        xk, yk, derivs = _knots_from_raw(raw, self.n_bins, self.tail_bound)
        out, log_grad = _rq_core(moving, xk, yk, derivs, self.tail_bound, inverse)
        perm = np.argsort(np.concatenate([id_cols, tr_cols]))
        merged = ad.index_select(ad.concat([ident, out], -1), perm)
        ld = log_grad.sum(-1)
        return merged, (ld * -1.0 if inverse else ld)

    def _check_finite(self, layer, arr, what):
        if not np.all(np.isfinite(arr)):
            raise FlowEvaluationError(layer, what)

    def _prepare_condition(self, condition, n):
        if self.cond_dim is None:
            if condition is not None:
                raise ValueError("unconditional flow given a condition")
            return None
        if condition is None:
            raise ValueError("conditional flow requires a condition")
        c = np.asarray(condition, dtype=np.float64)
        if c.ndim == 1:
            c = np.broadcast_to(c, (n, c.shape[-1])).copy()
        if c.shape != (n, self.cond_dim):
            raise ValueError(f"condition must have shape ({n}, {self.cond_dim})")
        return c

    def _base_log_prob_var(self, z):
        return (z**2).sum(-1) * -0.5 - 0.5 * self.dim * LOG_TWO_PI

    # -- public API ------------------------------------------------------

    def _pipeline_var(self, v, cond_var, leaves, inverse):
        n = v.value.shape[0]
        total = Var(np.zeros(n))
        order = reversed(range(self.n_transforms)) if inverse else range(self.n_transforms)
        for i in order:
            v, ld = self._layer_apply(i, v, cond_var, leaves, inverse)
            self._check_finite(i, v.value, "inverse output" if inverse else "forward output")
            total = total + ld
        return v, total

    def inverse_transform(self, x, condition=None):
        """Map data to base noise. Returns (z, log |det dz/dx|)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        cond = self._prepare_condition(condition, x.shape[0])
        with ad.no_grad():
            z, ld = self._pipeline_var(
                Var(x), None if cond is None else Var(cond),
                self.params.leaves(), inverse=True,
            )
        return z.value, ld.value

    def transform(self, z, condition=None):
        """Map base noise to data. Returns (x, log |det dx/dz|)."""
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        cond = self._prepare_condition(condition, z.shape[0])
        with ad.no_grad():
            x, ld = self._pipeline_var(
                Var(z), None if cond is None else Var(cond),
                self.params.leaves(), inverse=False,
            )
        return x.value, ld.value

    def log_prob_var(self, x, condition, leaves):
        """Tape-recorded log-density; inputs are constants on the tape."""
        n = np.asarray(x).shape[0]
        cond = self._prepare_condition(condition, n)
        v = Var._lift(x)
        cond_var = None if cond is None else Var(cond)
        z, total = self._pipeline_var(v, cond_var, leaves, inverse=True)
        return self._base_log_prob_var(z) + total

    def log_prob(self, x, condition=None):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        with ad.no_grad():
            lp = self.log_prob_var(x, condition, self.params.leaves())
        return lp.value

    def weighted_logprob_grad(self, points, weights=None, weight_fn=None,
                              condition=None):
        """Gradient of sum(w_i * log p(x_i)) over the flow parameters.

        `weight_fn`, if given, receives the per-point log-densities and
        returns the weights; this keeps one tape pass when the weights
        depend on the evaluated values. Returns (log_probs, flat_grad).
        """
        if weights is None and weight_fn is None:
            raise ValueError("provide weights or weight_fn")
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        leaves = self.params.leaves()
        lp = self.log_prob_var(points, condition, leaves)
        if weight_fn is not None:
            weights = weight_fn(lp.value)
        loss = (lp * np.asarray(weights, dtype=np.float64)).sum()
        ad.backward(loss)
        return lp.value, ad.collect_gradient(self.params, leaves)

    def sample_with_log_prob(self, n, condition=None, rng=None):
        """Draw n points by transforming base noise.

        The log-densities are recomputed through the inverse pass so they
        agree exactly with `log_prob` on the returned points.
        """
        if n < 1:
            raise ValueError("n must be >= 1")
        rng = rng if rng is not None else np.random.default_rng()
        cond = self._prepare_condition(condition, n)
        z = rng.standard_normal((n, self.dim))
        with ad.no_grad():
            v, _ = self._pipeline_var(
                Var(z), None if cond is None else Var(cond),
                self.params.leaves(), inverse=False,
            )
        return v.value, self.log_prob(v.value, condition=cond)

    def sample(self, n, condition=None, rng=None):
        return self.sample_with_log_prob(n, condition, rng)[0]

    def hyperparameters(self):
        return {
            "dim": self.dim,
            "n_transforms": self.n_transforms,
            "n_bins": self.n_bins,
            "hidden": self.hidden,
            "tail_bound": self.tail_bound,
            "cond_dim": self.cond_dim,
        }
