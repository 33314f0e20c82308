import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowebm import autodiff as ad
from flowebm.flows import (
    FlowEvaluationError,
    SplineCouplingFlow,
    SplineParams,
    spline_forward,
    spline_inverse,
)


def identity_params(k=8, bound=4.0):
    return SplineParams(
        widths=np.full(k, 2 * bound / k),
        heights=np.full(k, 2 * bound / k),
        derivatives=np.ones(k + 1),
        bound=bound,
    )


def random_params(rng, k=8, bound=4.0):
    w = rng.dirichlet(np.ones(k)) * 2 * bound
    h = rng.dirichlet(np.ones(k)) * 2 * bound
    d = np.concatenate([[1.0], rng.uniform(0.2, 3.0, size=k - 1), [1.0]])
    return SplineParams(w, h, d, bound)


class TestSpline:
    def test_identity_spline(self):
        params = identity_params()
        x = np.linspace(-4.0, 4.0, 101)
        y, ld = spline_forward(x, params)
        np.testing.assert_allclose(y, x, atol=1e-12)
        np.testing.assert_allclose(ld, 0.0, atol=1e-12)

    def test_linear_tails(self):
        params = random_params(np.random.default_rng(3))
        x = np.array([-5.0, 5.0, -100.0, 100.0])
        y, ld = spline_forward(x, params)
        np.testing.assert_array_equal(y, x)
        np.testing.assert_array_equal(ld, 0.0)

    def test_forward_matches_numeric_derivative(self):
        rng = np.random.default_rng(4)
        params = random_params(rng)
        x = rng.uniform(-3.9, 3.9, size=200)
        h = 1e-5
        _, ld = spline_forward(x, params)
        up, _ = spline_forward(x + h, params)
        down, _ = spline_forward(x - h, params)
        numeric = (up - down) / (2 * h)
        np.testing.assert_allclose(np.exp(ld), numeric, rtol=1e-5)

    def test_identity_inverse(self):
        params = identity_params()
        y = np.linspace(-4, 4, 33)
        x, _ = spline_inverse(y, params)
        np.testing.assert_allclose(x, y, atol=1e-12)

    def test_round_trip(self):
        rng = np.random.default_rng(5)
        params = random_params(rng)
        x = rng.uniform(-4.0, 4.0, size=1000)
        y, _ = spline_forward(x, params)
        back, _ = spline_inverse(y, params)
        assert np.max(np.abs(back - x)) < 1e-8

    def test_log_det_negation(self):
        rng = np.random.default_rng(6)
        params = random_params(rng)
        x = rng.uniform(-4.0, 4.0, size=500)
        y, ld_f = spline_forward(x, params)
        _, ld_i = spline_inverse(y, params)
        np.testing.assert_allclose(ld_f + ld_i, 0.0, atol=1e-8)

    def test_rejects_invalid_params(self):
        with pytest.raises(ValueError):
            SplineParams(np.array([1.0, -1.0]), np.ones(2), np.ones(3), bound=1.0)
        with pytest.raises(ValueError):
            SplineParams(np.full(4, 2.0), np.full(4, 2.0),
                         np.array([1, 1, np.nan, 1, 1.0]), bound=4.0)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_round_trip_property(self, seed):
        rng = np.random.default_rng(seed)
        params = random_params(rng, k=int(rng.integers(2, 12)))
        x = rng.uniform(-4, 4, size=64)
        y, _ = spline_forward(x, params)
        back, _ = spline_inverse(y, params)
        assert np.max(np.abs(back - x)) < 1e-8


def perturbed_flow(rng, dim=2, n_transforms=3, n_bins=6, hidden=16, cond_dim=None,
                   scale=0.5):
    """A flow moved off the identity by randomizing conditioner outputs."""
    flow = SplineCouplingFlow(dim, n_transforms, n_bins, hidden,
                              cond_dim=cond_dim, rng=rng)
    for name in flow.params.names:
        if name.endswith(("w2", "b2")):
            flow.params.view(name)[...] = rng.normal(
                0.0, scale, size=flow.params.view(name).shape
            )
    return flow


class TestFlowModel:
    def test_identity_flow_base_density(self):
        flow = SplineCouplingFlow(dim=2, rng=np.random.default_rng(0))
        lp = flow.log_prob(np.array([[0.0, 0.0]]))
        assert lp[0] == pytest.approx(-math.log(2 * math.pi), rel=1e-10)

    def test_quadrature_normalization_2d(self):
        # trapezoid quadrature of exp(log_prob) over a box covering the
        # spline range plus the Gaussian tails
        flow = perturbed_flow(np.random.default_rng(7), scale=0.2)
        lim = flow.tail_bound + 3.0
        grid = np.linspace(-lim, lim, 701)
        xx, yy = np.meshgrid(grid, grid, indexing="ij")
        pts = np.stack([xx.ravel(), yy.ravel()], -1)
        dens = np.exp(flow.log_prob(pts)).reshape(701, 701)
        mass = np.trapezoid(np.trapezoid(dens, grid, axis=1), grid, axis=0)
        assert abs(mass - 1.0) < 1e-3

    def test_flow_round_trip(self):
        flow = perturbed_flow(np.random.default_rng(8))
        rng = np.random.default_rng(9)
        x = rng.uniform(-4, 4, size=(500, 2))
        z, ld_inv = flow.inverse_transform(x)
        back, ld_fwd = flow.transform(z)
        assert np.max(np.abs(back - x)) < 1e-8
        np.testing.assert_allclose(ld_inv + ld_fwd, 0.0, atol=1e-8)

    def test_per_layer_log_det_matches_full_jacobian(self):
        flow = perturbed_flow(np.random.default_rng(10))
        rng = np.random.default_rng(11)
        pts = rng.uniform(-3, 3, size=(20, 2))
        _, ld = flow.inverse_transform(pts)
        h = 1e-5
        for i, p in enumerate(pts):
            jac = np.zeros((2, 2))
            for j in range(2):
                up = p.copy()
                up[j] += h
                down = p.copy()
                down[j] -= h
                zu, _ = flow.inverse_transform(up[None])
                zd, _ = flow.inverse_transform(down[None])
                jac[:, j] = (zu[0] - zd[0]) / (2 * h)
            expected = math.log(abs(np.linalg.det(jac)))
            assert abs(ld[i] - expected) < 1e-4

    def test_sampling_identity_flow_is_standard_normal(self):
        flow = SplineCouplingFlow(dim=2, rng=np.random.default_rng(1))
        n = 20000
        s, lp = flow.sample_with_log_prob(n, rng=np.random.default_rng(2))
        assert np.all(np.abs(s.mean(0)) < 4 / math.sqrt(n))
        np.testing.assert_allclose(
            lp, -0.5 * np.sum(s**2, -1) - math.log(2 * math.pi), atol=1e-10
        )

    def test_sample_log_prob_self_consistency(self):
        flow = perturbed_flow(np.random.default_rng(12))
        s, lp = flow.sample_with_log_prob(400, rng=np.random.default_rng(13))
        recomputed = flow.log_prob(s)
        assert np.max(np.abs(lp - recomputed)) < 1e-8

    def test_sampling_deterministic_under_seed(self):
        flow = perturbed_flow(np.random.default_rng(14))
        a, lpa = flow.sample_with_log_prob(64, rng=np.random.default_rng(42))
        b, lpb = flow.sample_with_log_prob(64, rng=np.random.default_rng(42))
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(lpa, lpb)

    def test_conditional_log_prob_depends_on_condition(self):
        rng = np.random.default_rng(15)
        flow = perturbed_flow(rng, cond_dim=2)
        # give the first-layer input weights a nonzero condition block
        w0 = flow.params.view("layer0.w0")
        w0[...] = rng.normal(0, 0.5, size=w0.shape)
        x = np.array([[0.3, -0.2]])
        lp1 = flow.log_prob(x, condition=np.array([0.0, 0.0]))
        lp2 = flow.log_prob(x, condition=np.array([2.0, -1.0]))
        assert abs(lp1[0] - lp2[0]) > 1e-6

    def test_condition_shape_validation(self):
        flow = SplineCouplingFlow(dim=2, cond_dim=3, rng=np.random.default_rng(0))
        with pytest.raises(ValueError):
            flow.log_prob(np.zeros((1, 2)))
        unconditional = SplineCouplingFlow(dim=2, rng=np.random.default_rng(0))
        with pytest.raises(ValueError):
            unconditional.log_prob(np.zeros((1, 2)), condition=np.zeros(2))

    def test_mean_log_prob_gradient_matches_finite_differences(self):
        flow = perturbed_flow(np.random.default_rng(16), n_transforms=2,
                              n_bins=4, hidden=8)
        rng = np.random.default_rng(17)
        batch = rng.uniform(-3, 3, size=(16, 2))
        n = batch.shape[0]
        _, grad = flow.weighted_logprob_grad(batch, np.full(n, 1.0 / n))

        def loss(theta):
            old = flow.params.values.copy()
            flow.params.values[...] = theta
            val = float(np.mean(flow.log_prob(batch)))
            flow.params.values[...] = old
            return val

        report = ad.finite_diff_check(loss, flow.params.values.copy(), grad, tol=1e-4)
        assert report.passed, f"max rel err {report.max_rel_error}"

    def test_non_finite_input_raises_with_layer_index(self):
        flow = perturbed_flow(np.random.default_rng(18))
        with pytest.raises(FlowEvaluationError):
            flow.log_prob(np.array([[np.nan, 0.0]]))

    def test_odd_dimension_split(self):
        flow = perturbed_flow(np.random.default_rng(19), dim=3)
        rng = np.random.default_rng(20)
        x = rng.uniform(-3, 3, size=(50, 3))
        z, _ = flow.inverse_transform(x)
        back, _ = flow.transform(z)
        assert np.max(np.abs(back - x)) < 1e-8
