"""
Tests for the QMLE, the grid Bayes estimator, Fisher information and Wald tests.
"""
import unittest
import os
import sys
import warnings
import dataclasses

import numpy as np
from scipy import stats

# Add parent directory to path to import modules
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from core.errors import EvaluationError, ModelValidationError, UnsupportedModeError, WaldTestError
from core.inference import (FisherGamma, FitOptions, GridSpec, _newton_polish, _Standardized,
                            fisher_gamma_closed_form, fisher_gamma_plugin, fit_bayes, fit_ensemble,
                            fit_qmle, standardized_errors, wald_power, wald_test)
from core.model_core import (ParamSpace, ParamVector, RateSchedule, builtin_gamma_jump, builtin_merton,
                             builtin_ou_jump, builtin_two_sided_gamma_jump)
from core.path_sim import SimConfig, simulate_ensemble, simulate_path
from core.quasi_lik import ThresholdRule, classify_increments


class TestFisherGamma(unittest.TestCase):
    """Test closed-form and plug-in Γ."""

    def test_closed_form_ou(self):
        """Test Γ = diag(2/σ², E[X²]/σ², λ/s²) for OU with Normal jumps."""
        model = builtin_ou_jump(1.0, 1.0, 1.0, 0.0, 0.5)
        gamma = fisher_gamma_closed_form(model, model.alpha0)
        np.testing.assert_allclose(gamma.matrix, np.diag([2.0, 0.625, 4.0]), atol=1e-12)
        self.assertTrue(gamma.is_positive_definite())
        self.assertIsNone(gamma.epsilon_n)
        self.assertEqual(gamma.source, "closed_form")

    def test_closed_form_unsupported(self):
        """Test that non-ergodic models have no closed form."""
        model = builtin_merton(0.0, 1.0, 1.0, 0.0, 0.5)
        with self.assertRaises(UnsupportedModeError):
            fisher_gamma_closed_form(model, model.alpha0)

    def test_plugin_on_states(self):
        """Test plug-in averages over an explicit state sample."""
        model = builtin_ou_jump(1.0, 1.0, 1.0, 0.0, 0.5)
        gamma = fisher_gamma_plugin(model, model.alpha0, np.array([[-1.0], [1.0]]))
        np.testing.assert_allclose(gamma.gamma1, [[2.0]], rtol=1e-12)
        self.assertAlmostEqual(gamma.gamma2[0, 0], 1.0, places=12)
        self.assertAlmostEqual(gamma.gamma2[1, 1], 4.0, places=6)
        self.assertAlmostEqual(gamma.gamma2[0, 1], 0.0, places=12)
        self.assertIsNone(gamma.epsilon_n)

    def test_plugin_jump_part_matches_closed_form(self):
        """Test the Gamma-jump Fisher quadrature against λk/s²."""
        model = builtin_gamma_jump(1.0, 1.0, 1.0, 0.5, 2.0)
        plugin = fisher_gamma_plugin(model, model.alpha0, np.array([[0.0], [2.0]]))
        closed = fisher_gamma_closed_form(model, model.alpha0)
        self.assertAlmostEqual(plugin.gamma2[1, 1], 8.0, places=5)
        self.assertAlmostEqual(plugin.gamma2[1, 1], closed.gamma2[1, 1], places=5)

    def test_plugin_from_path_carries_scaling(self):
        """Test that a path source attaches its ε_n."""
        model = builtin_ou_jump(1.0, 1.0, 1.0, 0.0, 0.5)
        path = simulate_path(model, model.alpha0, SimConfig(n=200, h_n=0.01, master_seed=2))
        gamma = fisher_gamma_plugin(model, model.alpha0, path)
        np.testing.assert_allclose(gamma.epsilon_n, path.schedule.epsilon(1, 2))
        self.assertEqual(gamma.to_dict()["source"], "plugin")


class TestWald(unittest.TestCase):
    """Test standardized errors and the Wald statistic."""

    def setUp(self):
        """Set up a diagonal Γ and scaling."""
        self.gamma = FisherGamma(np.array([[2.0]]), np.diag([1.0, 4.0]))
        self.eps = np.array([0.1, 0.2, 0.2])

    def test_standardized_errors(self):
        """Test Z = Γ^{1/2} ε_n⁻¹(α̂ - α₀) for diagonal Γ."""
        z = standardized_errors([1.1, 1.2, -0.2], [1.0, 1.0, 0.0], self.gamma, self.eps)
        np.testing.assert_allclose(z, [np.sqrt(2.0), 1.0, -2.0])

    def test_statistic_and_p_value(self):
        """Test W on a one-coordinate subset."""
        result = wald_test([1.1, 1.0, 0.0], self.gamma.with_epsilon(self.eps), [1.0, 1.0, 0.0], [0])
        self.assertAlmostEqual(result.statistic, 2.0)
        self.assertAlmostEqual(result.p_value, stats.chi2.sf(2.0, 1))

    def test_two_coordinate_subset(self):
        """Test W with a two-dimensional block and χ²(2) reference."""
        result = wald_test([1.0, 1.2, 0.2], self.gamma, [1.0, 1.0, 0.0], [1, 2], epsilon_n=self.eps)
        self.assertAlmostEqual(result.statistic, 1.0 + 4.0)
        self.assertAlmostEqual(result.p_value, stats.chi2.sf(5.0, 2))

    def test_errors(self):
        """Test missing scaling and singular sub-blocks."""
        with self.assertRaises(WaldTestError):
            wald_test([1.0, 1.0, 0.0], self.gamma, [1.0, 1.0, 0.0], [0])
        singular = FisherGamma(np.array([[2.0]]), np.diag([0.0, 4.0]), self.eps)
        with self.assertRaises(WaldTestError):
            wald_test([1.0, 1.0, 0.0], singular, [1.0, 1.0, 0.0], [1])

    def test_power(self):
        """Test the noncentral χ² power curve."""
        self.assertAlmostEqual(wald_power(0.0), 0.05)
        self.assertAlmostEqual(wald_power(10.0), 0.885, delta=0.005)
        self.assertGreater(wald_power(20.0), wald_power(10.0))


class TestQMLE(unittest.TestCase):
    """Test the quasi-maximum-likelihood estimator on simulated data."""

    @classmethod
    def setUpClass(cls):
        """Simulate an OU path with clearly separated jumps."""
        cls.model = builtin_ou_jump(1.0, 1.0, 2.0, 2.0, 0.5)
        cls.rule = ThresholdRule(rho=0.45, scale=4.0)
        cls.path = simulate_path(cls.model, cls.model.alpha0,
                                 SimConfig(n=1000, h_n=0.01, master_seed=2024, burn_in=True))
        cls.joint = fit_qmle(cls.model, cls.path, cls.rule)

    def test_joint_fit_converges_near_truth(self):
        """Test convergence and a 5-standard-error neighbourhood of α₀."""
        fit = self.joint
        self.assertTrue(fit.converged, fit.message)
        self.assertEqual(fit.mode, "joint")
        self.assertTrue(np.all(np.isfinite(fit.standard_errors)))
        deviation = np.abs(fit.alpha_hat.alpha - self.model.alpha0.alpha) / fit.standard_errors
        self.assertTrue(np.all(deviation < 5.0), deviation)
        self.assertFalse(any(fit.boundary))

    def test_two_stage_agrees_with_joint(self):
        """Test that two-stage mode reaches the same maximizer."""
        fit = fit_qmle(self.model, self.path, self.rule, opts=FitOptions(two_stage=True))
        self.assertEqual(fit.mode, "two_stage")
        self.assertTrue(fit.converged, fit.message)
        np.testing.assert_allclose(fit.alpha_hat.alpha, self.joint.alpha_hat.alpha,
                                   atol=0.01 * float(np.min(self.joint.standard_errors)))

    def test_result_document(self):
        """Test the serializable form of a fit."""
        doc = self.joint.to_dict()
        self.assertEqual(len(doc["alpha_hat"]), 3)
        self.assertEqual(doc["sigma"], doc["alpha_hat"][:1])
        self.assertIn(doc["mode"], ("joint", "two_stage"))

    def test_init_outside_space(self):
        """Test that an initial value outside the box is rejected."""
        with self.assertRaises(ModelValidationError):
            fit_qmle(self.model, self.path, self.rule, init=[-1.0, 1.0, 2.0])

    def test_ensemble_order(self):
        """Test that ensemble fits follow path order for any thread count."""
        paths = simulate_ensemble(self.model, self.model.alpha0, SimConfig(n=300, h_n=0.02, master_seed=8), 3,
                                  progress_callback=lambda p: None)
        fits = fit_ensemble(self.model, paths, self.rule, threads=3)
        for path, fit in zip(paths, fits):
            single = fit_qmle(self.model, path, self.rule)
            np.testing.assert_array_equal(fit.alpha_hat.alpha, single.alpha_hat.alpha)

    def test_sigma_reparametrization_is_equivariant(self):
        """Test that fitting b = 2σ' returns σ̂' = σ̂/2 with unchanged θ̂ and ℓ_n."""
        base = self.model
        scale = np.array([0.5, 1.0, 1.0])
        halved = dataclasses.replace(
            base,
            diffusion=lambda x, s: base.diffusion(x, 2.0 * s),
            diffusion_dsigma=lambda x, s: 2.0 * base.diffusion_dsigma(x, 2.0 * s),
            space=ParamSpace(lower=base.space.lower * scale, upper=base.space.upper * scale,
                             positive=base.space.positive),
            alpha0=ParamVector(sigma=base.alpha0.sigma / 2.0, theta=base.alpha0.theta))
        fit = fit_qmle(halved, self.path, self.rule)
        self.assertTrue(fit.converged, fit.message)
        se = self.joint.standard_errors
        np.testing.assert_allclose(fit.alpha_hat.alpha / scale, self.joint.alpha_hat.alpha,
                                   atol=1e-3 * float(np.min(se)))
        np.testing.assert_allclose(fit.standard_errors / scale, se, rtol=1e-3)
        self.assertAlmostEqual(fit.loglik, self.joint.loglik, delta=1e-8 * abs(self.joint.loglik))


class TestNewtonRefinement(unittest.TestCase):
    """Test the Newton polish when the contrast fails away from the start."""

    class _FailingProblem:
        def contrast(self, w, part="full"):
            if np.any(w != 0.0):
                raise EvaluationError("Non-finite continuous-branch term in interval 1", interval_index=1)
            return 0.0

        def gradient(self, w):
            return np.ones_like(w)

        def hessian(self, w):
            return -np.eye(w.size)

        def clip(self, w):
            return w

    def test_no_admissible_step_keeps_estimate(self):
        """Test that every rejected step size leaves w unchanged and unconverged."""
        trace = []
        with self.assertLogs('core.inference', level='WARNING') as logs:
            w, steps, converged, grad_norm = _newton_polish(self._FailingProblem(), np.zeros(1), FitOptions(), trace)
        np.testing.assert_array_equal(w, [0.0])
        self.assertEqual(steps, 0)
        self.assertFalse(converged)
        self.assertEqual(grad_norm, 1.0)
        self.assertEqual(trace, [])
        self.assertTrue(any("no admissible step" in line for line in logs.output))


class TestStandardizedCoordinates(unittest.TestCase):
    """Test the optimizer's coordinate scaling."""

    def test_zero_initial_value_on_free_coordinate(self):
        """Test that a zero jump mean keeps the plain ε_n scale without division warnings."""
        model = builtin_ou_jump(1.0, 1.0, 2.0, 0.0, 0.5)
        rule = ThresholdRule(rho=0.45, scale=4.0)
        path = simulate_path(model, model.alpha0, SimConfig(n=200, h_n=0.01, master_seed=6))
        eps = path.schedule.epsilon(1, 2)
        with warnings.catch_warnings():
            warnings.simplefilter("error", RuntimeWarning)
            problem = _Standardized(model, path, rule, classify_increments(path, rule), model.alpha0.alpha)
        self.assertTrue(np.all(np.isfinite(problem.scale)))
        np.testing.assert_array_equal(problem.scale, eps)
        np.testing.assert_allclose(problem.alpha(np.zeros(3)), model.alpha0.alpha)


class TestStandardErrorScaling(unittest.TestCase):
    """Test how standard errors shrink along h_n = 0.4·n^{-3/4}."""

    @classmethod
    def setUpClass(cls):
        """Fit one Merton path per n with observed and with fixed Γ."""
        cls.model = builtin_merton(0.5, 1.0, 2.0, 2.0, 0.5)
        cls.rule = ThresholdRule(rho=0.45, scale=4.0)
        cls.gamma = FisherGamma(np.array([[2.0]]), np.diag([1.0, 4.0]))
        cls.n_values = [200, 800, 3200]
        cls.horizons, cls.observed, cls.fixed = [], [], []
        for k, n in enumerate(cls.n_values):
            schedule = RateSchedule.from_beta(n, 0.75, 0.4)
            path = simulate_path(cls.model, cls.model.alpha0,
                                 SimConfig(n=n, h_n=schedule.h_n, master_seed=900 + k))
            cls.horizons.append(schedule.horizon)
            cls.observed.append(fit_qmle(cls.model, path, cls.rule).standard_errors)
            cls.fixed.append(fit_qmle(cls.model, path, cls.rule, gamma=cls.gamma).standard_errors)

    def _slope(self, x, values):
        return float(np.polyfit(np.log(x), np.log(values), 1)[0])

    def test_fixed_gamma_slopes(self):
        """Test slope -1/2 of SE(σ) in n and of SE(θ) in n·h_n."""
        fixed = np.array(self.fixed)
        self.assertAlmostEqual(self._slope(self.n_values, fixed[:, 0]), -0.5, places=10)
        for j in (1, 2):
            self.assertAlmostEqual(self._slope(self.horizons, fixed[:, j]), -0.5, places=10)

    def test_observed_sigma_slope(self):
        """Test that observed-information SE(σ) falls like n^{-1/2}."""
        observed = np.array(self.observed)
        self.assertTrue(np.all(np.isfinite(observed[:, 0])))
        self.assertAlmostEqual(self._slope(self.n_values, observed[:, 0]), -0.5, delta=0.05)


class TestBayes(unittest.TestCase):
    """Test the grid Bayes estimator."""

    def setUp(self):
        """Set up a short path with clearly separated jumps."""
        self.model = builtin_ou_jump(1.0, 1.0, 2.0, 2.0, 0.5)
        self.rule = ThresholdRule(rho=0.45, scale=4.0)
        self.path = simulate_path(self.model, self.model.alpha0,
                                  SimConfig(n=300, h_n=0.02, master_seed=31, burn_in=True))

    def test_posterior_mean_inside_box(self):
        """Test that the posterior mean lies in the integration box."""
        result = fit_bayes(self.model, self.path, self.rule)
        alpha = result.alpha_hat.alpha
        self.assertTrue(np.all(alpha >= result.lower) and np.all(alpha <= result.upper))
        self.assertGreaterEqual(result.edge_mass, 0.0)
        self.assertLessEqual(result.edge_mass, 1.0)
        self.assertEqual(set(result.to_dict()), {"alpha_hat", "edge_mass", "box_lower", "box_upper"})

    def test_dimension_and_grid_checks(self):
        """Test d > 3 refusal and the minimum node count."""
        model = builtin_two_sided_gamma_jump(1.0, 1.0, 1.0, 0.5, 0.5)
        with self.assertRaises(UnsupportedModeError):
            fit_bayes(model, self.path, self.rule)
        with self.assertRaises(ModelValidationError):
            GridSpec(nodes=21)


class TestBayesPrior(unittest.TestCase):
    """Test the prior's pull on the grid Bayes estimator."""

    @classmethod
    def setUpClass(cls):
        """Fit the QMLE once on a Merton path shared by the prior tests."""
        cls.model = builtin_merton(0.5, 1.0, 2.0, 2.0, 0.5)
        cls.rule = ThresholdRule(rho=0.45, scale=4.0)
        cls.path = simulate_path(cls.model, cls.model.alpha0, SimConfig(n=300, h_n=0.02, master_seed=57))
        cls.qmle = fit_qmle(cls.model, cls.path, cls.rule)

    def test_flat_prior_matches_qmle(self):
        """Test that a constant prior changes nothing and stays within 0.3 SE of the QMLE."""
        plain = fit_bayes(self.model, self.path, self.rule, fit=self.qmle)
        flat = fit_bayes(self.model, self.path, self.rule, prior=lambda a: 1.0, fit=self.qmle)
        np.testing.assert_allclose(flat.alpha_hat.alpha, plain.alpha_hat.alpha, rtol=1e-12)
        se = self.qmle.standard_errors
        deviation = np.abs(flat.alpha_hat.alpha - self.qmle.alpha_hat.alpha) / se
        self.assertTrue(np.all(deviation < 0.3), deviation)
        self.assertLess(flat.edge_mass, 1e-3)

    def test_concentrated_prior_pulls_estimate(self):
        """Test that a narrow prior 2 SE away moves the estimate within one grid step of its center."""
        se = self.qmle.standard_errors
        target = self.qmle.alpha_hat.alpha + 2.0 * se
        result = fit_bayes(self.model, self.path, self.rule, fit=self.qmle,
                           prior=lambda a: float(np.prod(stats.norm.pdf(a, loc=target, scale=0.05 * se))))
        step = (result.upper - result.lower) / (GridSpec().nodes - 1)
        alpha = result.alpha_hat.alpha
        self.assertTrue(np.all(np.abs(alpha - target) <= step), (alpha, target, step))
        self.assertTrue(np.all(np.abs(alpha - self.qmle.alpha_hat.alpha) > se))


if __name__ == '__main__':
    unittest.main()
