"""
Tests for the Carleman functional, its gradient and the boundary-constrained descent.
"""

import numpy as np
import pytest

from apps.analytics.inversion import (
    LOG_COLUMNS,
    CarlemanFunctional,
    CoefficientVectorField,
    InversionConfig,
    boundary_field,
    convexity_probe,
    convexity_survey,
    estimate_lipschitz,
    evaluate_F1,
    evaluate_functional,
    evaluate_gradient,
    manufactured_offset,
    minimize,
    project_to_ball,
    stability_probe,
)
from apps.core.exceptions import ConfigurationError, DataError, DivergenceError, NumericalError
from tests.helpers import random_field, smooth_field, zero_boundary

STEP = 1e-20


@pytest.mark.unit
class TestInversionConfig:
    def test_alpha_range(self):
        for alpha in (0.0, 1.0, -0.5):
            with pytest.raises(ConfigurationError):
                InversionConfig(alpha=alpha).validate()

    def test_other_invalid_settings(self):
        for kwargs in ({"lam": -1.0}, {"gamma": 0.0}, {"K": -1.0}, {"chi_mode": "box"},
                       {"penalty_order": 3}, {"max_iters": -1}, {"initial_guess": "random"}):
            with pytest.raises(ConfigurationError):
                InversionConfig(**kwargs).validate()

    def test_advisory_alpha_bound(self):
        """Test alpha >= 2 exp(-lambda h) is advisory only."""
        assert InversionConfig(lam=3.0, alpha=0.01).validate(h=0.1) is False
        assert InversionConfig(lam=10.0, alpha=0.9).validate(h=0.1) is True
        assert InversionConfig().validate() is True


@pytest.mark.unit
class TestFields:
    def test_shape_mismatch(self, debug_grid):
        with pytest.raises(DataError):
            CoefficientVectorField(debug_grid, np.zeros((10, 2)))

    def test_check_finite(self, debug_grid):
        values = np.zeros((debug_grid.n_nodes, 2))
        values[17, 1] = np.nan
        with pytest.raises(NumericalError, match="17"):
            CoefficientVectorField(debug_grid, values).check_finite()

    def test_boundary_field(self, debug_grid):
        fixed = np.full((5, debug_grid.fixed_spatial.size, 2), 0.7)
        field = boundary_field(debug_grid, fixed)
        assert np.all(field.values[debug_grid.free] == 0.0)
        assert field.values[~debug_grid.free].max() == 0.7
        with_interior = boundary_field(debug_grid, fixed, interior=np.ones((debug_grid.n_nodes, 2)))
        assert np.all(with_interior.values[debug_grid.free] == 1.0)
        assert field.same_boundary(with_interior)


@pytest.mark.unit
class TestFunctional:
    def test_weight_overflow(self, debug_grid, tensors2, make_functional):
        with pytest.raises(NumericalError):
            make_functional(debug_grid, tensors2, lam=100.0)

    def test_nonlinearity_at_one_node(self, debug_grid, tensors5, make_functional):
        field = random_field(debug_grid, 5, seed=1)
        functional = make_functional(debug_grid, tensors5)
        Vt, grads = functional.derivatives(field.values)
        full = functional.nonlinearity(Vt, grads)
        node = int(np.flatnonzero(debug_grid.free)[3])
        np.testing.assert_allclose(evaluate_F1(field, tensors5, node), full[node], rtol=1e-12, atol=1e-14)

    def test_quadratic_nonlinearity_vanishes_for_zero_field(self, debug_grid, tensors2, make_functional):
        functional = make_functional(debug_grid, tensors2)
        V = np.zeros((debug_grid.n_nodes, 2))
        assert functional.value(V) == 0.0
        np.testing.assert_array_equal(functional.gradient(V), 0.0)

    def test_wrappers_match_class(self, debug_grid, tensors2, geometry, carleman, make_functional):
        field = random_field(debug_grid, 2, seed=2)
        config = InversionConfig(lam=3.0, alpha=0.01)
        functional = make_functional(debug_grid, tensors2, lam=3.0, alpha=0.01)
        assert evaluate_functional(field, config, geometry, carleman, tensors2) == pytest.approx(
            functional.value(field.values), rel=1e-14
        )
        np.testing.assert_allclose(
            evaluate_gradient(field, config, geometry, carleman, tensors2), functional.gradient(field.values), rtol=1e-14
        )

    def test_gradient_matches_complex_step(self, debug_grid, tensors2, make_functional):
        """Test every free gradient entry against a complex-step derivative of J."""
        functional = make_functional(debug_grid, tensors2, lam=3.0, alpha=0.01)
        V = random_field(debug_grid, 2, seed=3).values
        grad = functional.gradient(V)
        scale = np.abs(grad).max()
        for node in np.flatnonzero(debug_grid.free):
            for k in range(2):
                step = np.zeros_like(V, dtype=complex)
                step[node, k] = 1j * STEP
                numeric = np.imag(functional.value(V + step)) / STEP
                assert numeric == pytest.approx(grad[node, k], rel=1e-8, abs=1e-10 * scale)

    def test_pinned_gradient_is_zero(self, debug_grid, tensors5, make_functional):
        functional = make_functional(debug_grid, tensors5, lam=3.0)
        grad = functional.gradient(random_field(debug_grid, 5, seed=4).values)
        assert np.all(grad[~debug_grid.free] == 0.0)
        assert np.abs(grad[debug_grid.free]).max() > 0.0

    def test_directional_finite_difference(self, debug_grid, tensors5, make_functional):
        """Test the gradient along a random free direction with a central difference."""
        functional = make_functional(debug_grid, tensors5, lam=3.0, alpha=0.01, chi_mode="cutoff")
        V = random_field(debug_grid, 5, seed=5).values
        rng = np.random.default_rng(6)
        direction = np.zeros_like(V)
        direction[debug_grid.free] = rng.standard_normal((int(debug_grid.free.sum()), 5))
        eps = 1e-6
        numeric = (functional.value(V + eps * direction) - functional.value(V - eps * direction)) / (2 * eps)
        exact = np.sum(functional.gradient(V) * direction)
        assert numeric == pytest.approx(exact, rel=1e-5)

    def test_hessian_vector_is_symmetric(self, debug_grid, tensors2, make_functional):
        functional = make_functional(debug_grid, tensors2, lam=0.0, alpha=0.01)
        V = random_field(debug_grid, 2, seed=7).values
        rng = np.random.default_rng(8)
        u, v = np.zeros_like(V), np.zeros_like(V)
        u[debug_grid.free] = rng.standard_normal((int(debug_grid.free.sum()), 2))
        v[debug_grid.free] = rng.standard_normal((int(debug_grid.free.sum()), 2))
        left = np.sum(u * functional.hessian_vector(V, v))
        right = np.sum(v * functional.hessian_vector(V, u))
        assert left == pytest.approx(right, rel=1e-8)

    def test_lipschitz_estimate(self, debug_grid, tensors2, make_functional):
        functional = make_functional(debug_grid, tensors2, lam=0.0, alpha=0.01)
        V = random_field(debug_grid, 2, seed=9).values
        L = estimate_lipschitz(functional, V, iterations=30)
        assert L > 0.0
        rng = np.random.default_rng(10)
        direction = np.zeros_like(V)
        direction[debug_grid.free] = rng.standard_normal((int(debug_grid.free.sum()), 2))
        direction /= np.linalg.norm(direction)
        assert np.linalg.norm(functional.hessian_vector(V, direction)) <= L * (1.0 + 1e-6)


@pytest.mark.unit
class TestProjection:
    def test_norm_equals_radius(self, debug_grid):
        field = random_field(debug_grid, 2, amplitude=1.0, seed=11, boundary_amplitude=0.01)
        K = 0.5 * debug_grid.sobolev_norm(field.values)
        projected = project_to_ball(field, K)
        assert debug_grid.sobolev_norm(projected.values) == pytest.approx(K, rel=1e-8)
        assert projected.same_boundary(field)

    def test_pinned_values_alone_too_large(self, debug_grid):
        field = random_field(debug_grid, 2, amplitude=0.0, seed=12, boundary_amplitude=10.0)
        projected = project_to_ball(field, 1e-6)
        np.testing.assert_array_equal(projected.values, field.values)


@pytest.mark.unit
class TestMinimize:
    def test_log_checkpoints_and_pinned_values(self, debug_grid, tensors2, make_functional):
        functional = make_functional(debug_grid, tensors2, lam=0.0, alpha=0.01, max_iters=4,
                                     grad_tol=0.0, checkpoint_every=2)
        initial = random_field(debug_grid, 2, amplitude=0.01, seed=13, boundary_amplitude=0.02)
        seen = []
        result = minimize(initial, functional, checkpoint=lambda i, f: seen.append(i))
        assert seen == [2, 4]
        assert list(result.log.columns) == LOG_COLUMNS
        assert list(result.log["iter"]) == [0, 1, 2, 3, 4]
        assert result.iterations == 4
        assert not result.converged
        assert result.field.same_boundary(initial)
        assert result.gamma == pytest.approx(0.5 / result.lipschitz)
        assert result.K == pytest.approx(10.0 * debug_grid.sobolev_norm(initial.values))

    def test_zero_iterations(self, debug_grid, tensors2, make_functional):
        functional = make_functional(debug_grid, tensors2, lam=0.0, max_iters=0, gamma=1e-3)
        initial = random_field(debug_grid, 2, seed=14)
        result = minimize(initial, functional)
        assert result.iterations == 0
        np.testing.assert_array_equal(result.field.values, initial.values)
        assert result.lipschitz is None

    def test_exact_field_is_a_fixed_point(self, debug_grid, tensors2, make_functional):
        """Test that the manufactured solution converges immediately."""
        functional = make_functional(debug_grid, tensors2, lam=3.0, alpha=1e-12, grad_tol=1e-6)
        exact = smooth_field(debug_grid, 2)
        functional.offset = manufactured_offset(functional, exact)
        assert functional.value(exact.values) == pytest.approx(0.0, abs=1e-10)
        result = minimize(exact, functional)
        assert result.converged
        assert result.iterations <= 5
        np.testing.assert_allclose(result.field.values, exact.values, atol=1e-10)

    def test_descent_approaches_manufactured_solution(self, debug_grid, tensors2, make_functional):
        functional = make_functional(debug_grid, tensors2, lam=0.0, alpha=1e-12, max_iters=30, grad_tol=0.0)
        exact = smooth_field(debug_grid, 2)
        functional.offset = manufactured_offset(functional, exact)
        rng = np.random.default_rng(15)
        start = exact.values.copy()
        start[debug_grid.free] += 1e-3 * rng.standard_normal((int(debug_grid.free.sum()), 2))
        result = minimize(exact.with_values(start), functional)
        J = result.log["J"].to_numpy()
        assert np.all(np.diff(J) <= 1e-12 * J[0])
        assert J[-1] < J[0]
        before = np.linalg.norm(start - exact.values)
        after = np.linalg.norm(result.field.values - exact.values)
        assert after < before

    @pytest.mark.slow
    def test_descent_converges_to_manufactured_solution(self, debug_grid, tensors2, make_functional):
        """Test convergence from a perturbed start to the known minimiser under the gradient stop rule."""
        functional = make_functional(debug_grid, tensors2, lam=0.0, alpha=1e-12, max_iters=20000,
                                     grad_tol=1e-9, K=1e6)
        exact = smooth_field(debug_grid, 2)
        functional.offset = manufactured_offset(functional, exact)
        rng = np.random.default_rng(25)
        start = exact.values.copy()
        start[debug_grid.free] += 5e-3 * rng.standard_normal((int(debug_grid.free.sum()), 2))
        initial_error = debug_grid.h1_norm(start - exact.values) / debug_grid.h1_norm(exact.values)
        assert initial_error > 1e-2

        result = minimize(exact.with_values(start), functional)
        J = result.log["J"].to_numpy()
        assert np.all(np.diff(J) <= 1e-12 * J[0])
        assert result.log["grad_norm"].iloc[-1] < 1e-2
        error = debug_grid.h1_norm(result.field.values - exact.values) / debug_grid.h1_norm(exact.values)
        assert error <= 1e-3

    def test_weight_shift_does_not_change_iterates(self, debug_grid, tensors2, make_functional):
        """Test that adding a constant to psi only rescales J and leaves the iterates alone."""
        initial = random_field(debug_grid, 2, amplitude=0.01, seed=16, boundary_amplitude=0.02)
        finals = []
        for shift in (0.0, 1.0):
            functional = make_functional(debug_grid, tensors2, lam=3.0, alpha=1e-12, max_iters=5, grad_tol=0.0,
                                         psi_shift=shift, divergence_patience=10)
            finals.append(minimize(initial, functional).field.values)
        np.testing.assert_allclose(finals[0], finals[1], rtol=1e-7, atol=1e-12)

    def test_oversized_step_diverges(self, debug_grid, tensors2, make_functional):
        probe = make_functional(debug_grid, tensors2, lam=0.0, alpha=0.01)
        initial = random_field(debug_grid, 2, amplitude=0.01, seed=17)
        L = estimate_lipschitz(probe, initial.values, iterations=30)
        functional = make_functional(debug_grid, tensors2, lam=0.0, alpha=0.01, gamma=3.0 / L, K=1e12,
                                     max_iters=60, grad_tol=0.0)
        with pytest.raises(DivergenceError):
            minimize(initial, functional)

    def test_non_finite_start(self, debug_grid, tensors2, make_functional):
        values = np.zeros((debug_grid.n_nodes, 2))
        values[0, 0] = np.inf
        with pytest.raises(NumericalError):
            minimize(CoefficientVectorField(debug_grid, values), make_functional(debug_grid, tensors2, gamma=1e-3))


@pytest.mark.unit
class TestProbes:
    def test_convexity_at_default_lambda(self, debug_grid, tensors5, make_functional):
        """Test 100 same-boundary pairs at N = 5 against the unweighted survey of the same pairs."""
        base = zero_boundary(random_field(debug_grid, 5, amplitude=0.01, seed=18))
        surveys = {}
        for lam in (3.0, 0.0):
            functional = make_functional(debug_grid, tensors5, lam=lam, alpha=0.01)
            surveys[lam] = convexity_survey(base, functional, pairs=100, amplitude=0.01,
                                            seed=np.random.SeedSequence([0, 1]))
        weighted, plain = surveys[3.0], surveys[0.0]
        assert list(weighted.columns) == ["pair", "spawn_key", "probe"]
        assert len(weighted) == len(plain) == 100
        assert list(weighted["spawn_key"]) == list(plain["spawn_key"])
        assert (weighted["probe"] >= 0.0).sum() >= 99
        assert (weighted["probe"] >= 0.0).sum() >= (plain["probe"] >= 0.0).sum()
        assert weighted["probe"].median() > plain["probe"].median()

    def test_survey_without_weight_runs(self, debug_grid, tensors2, make_functional):
        functional = make_functional(debug_grid, tensors2, lam=0.0, alpha=0.01)
        base = zero_boundary(random_field(debug_grid, 2, amplitude=0.01, seed=19))
        survey = convexity_survey(base, functional, pairs=5, amplitude=0.01, seed=3)
        assert np.isfinite(survey["probe"]).all()
        assert list(survey["spawn_key"]) == [0, 1, 2, 3, 4]

    def test_probe_of_identical_fields(self, debug_grid, tensors2, make_functional):
        functional = make_functional(debug_grid, tensors2)
        field = random_field(debug_grid, 2, seed=20)
        assert convexity_probe(field, field, functional) == 0.0

    def test_probe_requires_same_boundary(self, debug_grid, tensors2, make_functional):
        functional = make_functional(debug_grid, tensors2)
        first = random_field(debug_grid, 2, seed=21)
        second = random_field(debug_grid, 2, seed=22)
        with pytest.raises(DataError):
            convexity_probe(first, second, functional)

    def test_stability_ratio_is_bounded(self, debug_grid, tensors2, make_functional):
        functional = make_functional(debug_grid, tensors2, lam=0.0, alpha=0.01, max_iters=10, grad_tol=0.0)
        initial = smooth_field(debug_grid, 2, amplitude=0.01)
        table = stability_probe(initial, functional)
        assert list(table.columns) == ["size", "delta_q", "delta_v", "ratio"]
        ratios = table["ratio"].to_numpy()
        assert np.all(np.isfinite(ratios)) and np.all(ratios > 0.0)
        assert ratios.max() / ratios.min() < 3.0


def test_functional_exposes_grid(debug_grid, tensors2, make_functional):
    functional = make_functional(debug_grid, tensors2)
    assert isinstance(functional, CarlemanFunctional)
    assert functional.omega.shape == (debug_grid.n_nodes,)
    assert np.all(functional.omega[~debug_grid.broadcast(debug_grid.inside)] == 0.0)
