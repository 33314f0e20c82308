"""Residual-MLP energy model with spectral normalization.

The scalar network `f(x)` defines an unnormalized log-density `f(x)/T`
where `T` is a temperature. Every linear layer is divided by a power-
iteration estimate of its top singular value; the iteration vectors are
non-trainable buffers refreshed once per training step so that gradient
evaluations see a fixed, smooth function of the raw weights.

A FiLM variant modulates each block's hidden path with condition-dependent
scale and shift vectors for conditional densities.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Var

LAYER_NORM_EPS = 1e-5
_SIGMA_FLOOR = 1e-12

__all__ = [
    "EnergyModel",
    "EnergyEvaluationError",
    "WarmStartDiverged",
    "PowerIterationState",
    "power_iterate",
    "spectral_normalize",
    "warm_start_energy",
    "WarmStartReport",
]


class EnergyEvaluationError(RuntimeError):
    def __init__(self, block, what):
        self.block = block
        super().__init__(f"non-finite {what} in energy block {block!r}")


class WarmStartDiverged(RuntimeError):
    pass


@dataclass
class PowerIterationState:
    """Persistent left/right singular-vector estimates for one weight."""

    u: np.ndarray
    v: np.ndarray

    @classmethod
    def init(cls, shape, rng):
        u = rng.normal(size=shape[0])
        u /= np.linalg.norm(u)
        v = rng.normal(size=shape[1])
        v /= np.linalg.norm(v)
        return cls(u, v)

    def sigma(self, weight):
        return float(self.u @ weight @ self.v)


def power_iterate(weight, state, n_steps=1):
    """Update the singular-vector estimates in place."""
    for _ in range(n_steps):
        wu = weight.T @ state.u
        norm = np.linalg.norm(wu)
        if norm < _SIGMA_FLOOR:
            return state
        state.v = wu / norm
        wv = weight @ state.v
        state.u = wv / np.linalg.norm(wv)
    return state


def spectral_normalize(weight, state):
    """Weight divided by the current top-singular-value estimate.

    A (numerically) zero matrix is returned unchanged with a warning.
    """
    sigma = state.sigma(weight)
    if abs(sigma) < _SIGMA_FLOOR:
        warnings.warn("spectral_normalize: zero weight left unchanged",
                      RuntimeWarning, stacklevel=2)
        return weight
    return weight / sigma


def _layer_norm(x, gain, bias):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return ((x - mu) / ad.sqrt(var + LAYER_NORM_EPS)) * gain + bias


class EnergyModel:
    """Scalar residual MLP `f(x)` with temperature.

    `cond_dim` switches every residual block to its FiLM variant, whose
    scale head is biased at one and shift head at zero so the modulation
    starts near neutral.
    """

    def __init__(self, dim, hidden=64, n_blocks=6, temperature=1.0,
                 cond_dim=None, film_layers=2, rng=None):
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dim = dim
        self.hidden = hidden
        self.n_blocks = n_blocks
        self.temperature = float(temperature)
        self.cond_dim = cond_dim
        self.film_layers = film_layers

        store = ad.ParameterStore()
        self._spectral = []
        self.power_states = {}

        def linear(name, d_in, d_out, zero=False):
            w = np.zeros((d_in, d_out)) if zero else rng.normal(
                0.0, math.sqrt(1.0 / d_in), size=(d_in, d_out))
            store.add(f"{name}.w", w)
            store.add(f"{name}.b", np.zeros(d_out))
            self._spectral.append(f"{name}.w")
            self.power_states[f"{name}.w"] = PowerIterationState.init(
                (d_in, d_out), rng)

        linear("in", dim, hidden)
        for i in range(n_blocks):
            p = f"block{i}"
            if cond_dim is None:
                store.add(f"{p}.ln1.g", np.ones(hidden))
                store.add(f"{p}.ln1.b", np.zeros(hidden))
                linear(f"{p}.lin1", hidden, hidden)
                store.add(f"{p}.ln2.g", np.ones(hidden))
                store.add(f"{p}.ln2.b", np.zeros(hidden))
                linear(f"{p}.lin2", hidden, hidden)
            else:
                dims = [cond_dim] + [hidden] * film_layers
                for j in range(film_layers):
                    linear(f"{p}.scale{j}", dims[j], dims[j + 1])
                    linear(f"{p}.shift{j}", dims[j], dims[j + 1])
                linear(f"{p}.main0", hidden, hidden)
                linear(f"{p}.main1", hidden, hidden)
            store.add(f"{p}.alpha", np.array(1.0))
        linear("out", hidden, 1)
        self.params = store.finalize()

        if cond_dim is not None:
            for i in range(n_blocks):
                last = film_layers - 1
                self.params.view(f"block{i}.scale{last}.b")[...] = 1.0

        self.update_power_iterates(n_steps=30)

    # -- spectral normalization -----------------------------------------

    def update_power_iterates(self, n_steps=1):
        """One (or more) power-iteration refresh per spectral weight."""
        for name in self._spectral:
            power_iterate(self.params.view(name), self.power_states[name], n_steps)

    def _applied(self, name, leaves):
        """Spectrally normalized weight on the tape; u, v are constants."""
        w = leaves[f"{name}.w"]
        state = self.power_states[f"{name}.w"]
        sigma_val = state.sigma(w.value)
        if abs(sigma_val) < _SIGMA_FLOOR:
            return w
        u = Var(state.u[None, :])
        v = Var(state.v[:, None])
        sigma = ad.matmul(ad.matmul(u, w), v).reshape(1)
        return w / sigma

    def _linear(self, name, x, leaves):
        return ad.matmul(x, self._applied(name, leaves)) + leaves[f"{name}.b"]

    def applied_spectral_norms(self):
        """Exact top singular value of every applied weight (test support)."""
        out = {}
        for name in self._spectral:
            w = self.params.view(name)
            state = self.power_states[name]
            sigma = state.sigma(w)
            applied = w if abs(sigma) < _SIGMA_FLOOR else w / sigma
            out[name] = float(np.linalg.svd(applied, compute_uv=False)[0])
        return out

    # -- forward ----------------------------------------------------------

    def _residual_block(self, i, h, leaves):
        p = f"block{i}"
        t = _layer_norm(h, leaves[f"{p}.ln1.g"], leaves[f"{p}.ln1.b"])
        t = ad.silu(t)
        t = self._linear(f"{p}.lin1", t, leaves)
        t = _layer_norm(t, leaves[f"{p}.ln2.g"], leaves[f"{p}.ln2.b"])
        t = ad.silu(t)
        t = self._linear(f"{p}.lin2", t, leaves)
        return ad.silu(leaves[f"{p}.alpha"] * h + t)

    def _film_mlp(self, prefix, c, leaves):
        h = c
        for j in range(self.film_layers):
            h = self._linear(f"{prefix}{j}", h, leaves)
            if j < self.film_layers - 1:
                h = ad.silu(h)
        return h

    def _film_main(self, i, h, leaves):
        p = f"block{i}"
        t = ad.silu(self._linear(f"{p}.main0", h, leaves))
        return self._linear(f"{p}.main1", t, leaves)

    def _film_block(self, i, h, cond, leaves):
        p = f"block{i}"
        scale = self._film_mlp(f"{p}.scale", cond, leaves)
        shift = self._film_mlp(f"{p}.shift", cond, leaves)
        t = scale * self._film_main(i, h, leaves) + shift
        return ad.silu(leaves[f"{p}.alpha"] * h + t)

    def _check(self, block, value):
        if not np.all(np.isfinite(value)):
            raise EnergyEvaluationError(block, "activations")

    def _prepare_condition(self, condition, n):
        if self.cond_dim is None:
            if condition is not None:
                raise ValueError("unconditional energy model given a condition")
            return None
        if condition is None:
            raise ValueError("conditional energy model requires a condition")
        c = np.asarray(condition, dtype=np.float64)
        if c.ndim == 1:
            c = np.broadcast_to(c, (n, c.shape[-1])).copy()
        if c.shape != (n, self.cond_dim):
            raise ValueError(f"condition must have shape ({n}, {self.cond_dim})")
        return c

    def energy_var(self, x, condition, leaves):
        x = Var._lift(x)
        n = x.value.shape[0]
        cond = self._prepare_condition(
            condition.value if isinstance(condition, Var) else condition, n)
        cond_var = None if cond is None else Var(cond)
        h = ad.silu(self._linear("in", x, leaves))
        self._check("in", h.value)
        for i in range(self.n_blocks):
            if self.cond_dim is None:
                h = self._residual_block(i, h, leaves)
            else:
                h = self._film_block(i, h, cond_var, leaves)
            self._check(i, h.value)
        out = self._linear("out", h, leaves)
        return out.reshape(n)

    def energy(self, x, condition=None):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        with ad.no_grad():
            f = self.energy_var(x, condition, self.params.leaves())
        return f.value

    def unnormalized_log_density(self, x, condition=None):
        """f(x)/T, the log of the unnormalized model density."""
        return self.energy(x, condition) / self.temperature

    def weighted_energy_grad(self, points, weights=None, weight_fn=None,
                             condition=None):
        """Gradient of sum(w_i * f(x_i)) over the energy parameters.

        `weight_fn` receives the evaluated energies and returns the weights.
        Returns (energies, flat_grad).
        """
        if weights is None and weight_fn is None:
            raise ValueError("provide weights or weight_fn")
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        leaves = self.params.leaves()
        f = self.energy_var(points, condition, leaves)
        if weight_fn is not None:
            weights = weight_fn(f.value)
        ad.backward((f * np.asarray(weights, dtype=np.float64)).sum())
        return f.value, ad.collect_gradient(self.params, leaves)

    def input_grad(self, points, condition=None):
        """d f / d x at each point, as needed by Langevin steps."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        leaf = Var(points)
        f = self.energy_var(leaf, condition, self.params.leaves())
        ad.backward(f.sum())
        grad = leaf.grad
        if grad is None or not np.all(np.isfinite(grad)):
            raise EnergyEvaluationError("input", "input gradient")
        return grad

    def hyperparameters(self):
        return {
            "dim": self.dim,
            "hidden": self.hidden,
            "n_blocks": self.n_blocks,
            "temperature": self.temperature,
            "cond_dim": self.cond_dim,
            "film_layers": self.film_layers,
        }


@dataclass
class WarmStartReport:
    steps_run: int
    final_mse: float
    history: list = field(default_factory=list)


def warm_start_energy(ebm, flow, steps, batch_size, lr, rng,
                      conditions=None, check_every=25, patience=10):
    """Regress f/T onto the flow's log-density before dual training.

    Each iteration draws a fresh flow batch and takes one Adam step on the
    mean squared error between f(y)/T and log p(y). Held-out MSE is checked
    every `check_every` steps; `patience` consecutive increases abort.
    """
    state = ad.AdamState(size=ebm.params.size, lr=lr)
    t = ebm.temperature
    history = []
    worse = 0
    prev = np.inf

    def draw(n):
        if conditions is None:
            y, lp = flow.sample_with_log_prob(n, rng=rng)
            return y, lp, None
        rows = rng.integers(0, len(conditions), size=n)
        c = np.asarray(conditions)[rows]
        y, lp = flow.sample_with_log_prob(n, condition=c, rng=rng)
        return y, lp, c

    for step in range(steps):
        y, lp, c = draw(batch_size)

        def weight_fn(f_vals):
            # d/df of mean((f/T - lp)^2) = 2 (f/T - lp) / (T * n)
            return 2.0 * (f_vals / t - lp) / (t * batch_size)

        ebm.update_power_iterates()
        _, grad = ebm.weighted_energy_grad(y, weight_fn=weight_fn, condition=c)
        ad.adam_step(state, ebm.params.values, grad)

        if (step + 1) % check_every == 0 or step == steps - 1:
            hy, hlp, hc = draw(batch_size)
            mse = float(np.mean((ebm.energy(hy, hc) / t - hlp) ** 2))
            history.append((step + 1, mse))
            if mse > prev:
                worse += 1
                if worse >= patience:
                    raise WarmStartDiverged(
                        f"held-out MSE rose {patience} consecutive checks "
                        f"(last {mse:.4g})")
            else:
                worse = 0
            prev = mse
    final = history[-1][1] if history else float("nan")
    return WarmStartReport(steps_run=steps, final_mse=final, history=history)
