"""
Tests for increment classification and the thresholded quasi-log-likelihood.
"""
import unittest
import os
import sys
import math
import dataclasses

import numpy as np
from scipy import stats

# Add parent directory to path to import modules
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from core.errors import EvaluationError, ModelValidationError
from core.inference import fit_qmle
from core.model_core import builtin_gamma_jump, builtin_merton, builtin_ou_jump
from core.path_sim import Path, SimConfig, simulate_path
from core.quasi_lik import (DEFAULT_LOG_FLOOR, ThresholdRule, classify_increments, evaluate_contrast,
                            observed_info, quasi_loglik, quasi_score, scaled_score_info)


def _path_from_increments(increments, h, x0=0.0):
    observations = np.concatenate([[x0], x0 + np.cumsum(increments)])
    return Path(observations, h_n=h)


class TestThresholdRule(unittest.TestCase):
    """Test the jump-detection threshold."""

    def test_threshold_value(self):
        """Test u_n = C·h_n^ρ."""
        rule = ThresholdRule(rho=0.4, scale=2.0)
        self.assertAlmostEqual(rule.threshold(0.01), 2.0 * 0.01 ** 0.4)

    def test_exponent_range(self):
        """Test that ρ outside (1/4, 1/2) needs an explicit override."""
        with self.assertRaises(ModelValidationError):
            ThresholdRule(rho=0.5)
        with self.assertRaises(ModelValidationError):
            ThresholdRule(rho=0.3, scale=0.0)
        with self.assertLogs('core.quasi_lik', level='WARNING'):
            rule = ThresholdRule(rho=0.6, override=True)
        self.assertEqual(rule.rho, 0.6)


class TestClassification(unittest.TestCase):
    """Test increment classification."""

    def test_flags_large_increments(self):
        """Test that only increments above u_n are flagged."""
        path = _path_from_increments([0.01, 1.0, -0.01, -2.0], h=0.01)
        result = classify_increments(path, ThresholdRule(rho=0.4))
        np.testing.assert_array_equal(result.jump_detected, [False, True, False, True])
        self.assertEqual((result.n, result.n_jump, result.n_continuous), (4, 2, 2))
        self.assertAlmostEqual(result.threshold, 0.01 ** 0.4)

    def test_increment_at_threshold_is_continuous(self):
        """Test that |Δx| equal to u_n stays on the no-jump branch."""
        rule = ThresholdRule(rho=0.4, scale=2.0)
        self.assertEqual(rule.threshold(1.0), 2.0)
        path = _path_from_increments([2.0, -2.0, 2.5], h=1.0)
        result = classify_increments(path, rule)
        np.testing.assert_array_equal(result.jump_detected, [False, False, True])


class TestContrast(unittest.TestCase):
    """Test contrast evaluation against hand computations."""

    def setUp(self):
        """Set up a rule and a deterministic small-increment path."""
        self.h = 0.01
        self.rule = ThresholdRule(rho=0.45, scale=4.0)
        increments = 0.05 * np.sin(np.arange(1, 101))
        self.path = _path_from_increments(increments, self.h)

    def test_continuous_branch_is_euler_gaussian(self):
        """Test that the no-jump branch equals the Gaussian Euler log-density."""
        model = builtin_merton(0.5, 1.2, 0.0, 0.0, 0.5)
        value = evaluate_contrast(model, model.alpha0, self.path, self.rule)
        expected = np.sum(stats.norm.logpdf(self.path.increments[:, 0], loc=0.5 * self.h,
                                            scale=1.2 * math.sqrt(self.h)))
        self.assertEqual(value.n_jump, 0)
        self.assertAlmostEqual(value.continuous, expected, delta=1e-9 * abs(expected))
        self.assertEqual(value.intensity, 0.0)
        self.assertAlmostEqual(value.value, expected, delta=1e-9 * abs(expected))

    def test_jump_branch_and_intensity(self):
        """Test log(λ h F(Δ)) for a flagged increment and the -λT_n term."""
        model = builtin_merton(0.0, 1.0, 2.0, 0.3, 0.5)
        path = _path_from_increments([0.01, 1.5, -0.02], self.h)
        value = evaluate_contrast(model, model.alpha0, path, self.rule)
        expected_jump = math.log(2.0) + stats.norm.logpdf(1.5, 0.3, 0.5) + math.log(self.h)
        self.assertEqual(value.n_jump, 1)
        self.assertAlmostEqual(value.jump, expected_jump, places=10)
        self.assertAlmostEqual(value.intensity, -2.0 * 3 * self.h)
        self.assertAlmostEqual(value.value, value.continuous + value.jump + value.intensity, places=12)
        self.assertAlmostEqual(quasi_loglik(model, model.alpha0, path, self.rule), value.value, places=12)

    def test_out_of_support_jump_is_floored(self):
        """Test that a negative jump under one-sided Gamma jumps enters at the log floor."""
        model = builtin_gamma_jump(1.0, 1.0, 1.0, 0.5, 1.0)
        path = _path_from_increments([0.01, -1.5, 0.02], self.h)
        value = evaluate_contrast(model, model.alpha0, path, self.rule)
        self.assertEqual(value.n_floored, 1)
        self.assertEqual(value.jump, DEFAULT_LOG_FLOOR)

    def test_non_finite_term_reports_interval(self):
        """Test that a non-finite continuous term raises with its 1-based interval."""
        base = builtin_ou_jump(1.0, 1.0, 0.0, 0.0, 0.5)
        model = dataclasses.replace(base, drift=lambda x, theta: np.where(x > 0.5, np.inf, 0.0))
        path = Path(np.array([0.0, 0.01, 0.6, 0.61]), h_n=1.0)
        with np.errstate(all="ignore"):
            with self.assertRaises(EvaluationError) as ctx:
                evaluate_contrast(model, model.alpha0, path, ThresholdRule(rho=0.4))
        self.assertEqual(ctx.exception.interval_index, 3)

    def test_single_gaussian_increment_value(self):
        """Test ℓ = -log(2π)/2 for one zero increment with σ = h = 1 and no jumps."""
        model = builtin_merton(0.0, 1.0, 0.0, 0.0, 1.0)
        path = _path_from_increments([0.0], h=1.0)
        value = evaluate_contrast(model, model.alpha0, path, ThresholdRule(rho=0.4))
        self.assertEqual(value.n_jump, 0)
        self.assertAlmostEqual(value.value, -0.918939, places=6)

    def test_single_jump_increment_value(self):
        """Test ℓ = log h + log φ(2) - λh for one flagged unit-Normal jump."""
        model = builtin_merton(0.0, 1.0, 1.0, 0.0, 1.0)
        path = _path_from_increments([2.0], self.h)
        value = evaluate_contrast(model, model.alpha0, path, self.rule)
        self.assertEqual(value.n_jump, 1)
        expected = math.log(self.h) + stats.norm.logpdf(2.0) - self.h
        self.assertAlmostEqual(value.value, expected, places=10)
        self.assertAlmostEqual(value.value, -7.534106, delta=1e-5)

    def test_constant_shift_of_jump_density_keeps_maximizer(self):
        """Test that adding a constant to log F_θ moves ℓ_n but not its maximizer."""
        base = builtin_ou_jump(1.0, 1.0, 2.0, 2.0, 0.5)
        shifted = dataclasses.replace(base, jump_logpdf=lambda z, theta: base.jump_logpdf(z, theta) + 5.0)
        path = simulate_path(base, base.alpha0, SimConfig(n=500, h_n=0.02, master_seed=41, burn_in=True))
        n_jump = classify_increments(path, self.rule).n_jump
        self.assertGreater(n_jump, 0)
        self.assertAlmostEqual(quasi_loglik(shifted, base.alpha0, path, self.rule),
                               quasi_loglik(base, base.alpha0, path, self.rule) + 5.0 * n_jump, places=8)
        fit = fit_qmle(base, path, self.rule)
        fit_shifted = fit_qmle(shifted, path, self.rule)
        self.assertTrue(fit.converged and fit_shifted.converged)
        np.testing.assert_allclose(fit_shifted.alpha_hat.alpha, fit.alpha_hat.alpha,
                                   atol=1e-4 * float(np.min(fit.standard_errors)))


class TestScore(unittest.TestCase):
    """Test scores and information matrices on a simulated path."""

    @classmethod
    def setUpClass(cls):
        """Simulate one OU-jump path shared by the tests."""
        cls.model = builtin_ou_jump(1.0, 1.0, 1.0, 0.0, 0.5)
        cls.rule = ThresholdRule(rho=0.45, scale=4.0)
        cls.path = simulate_path(cls.model, cls.model.alpha0, SimConfig(n=500, h_n=0.01, master_seed=17))
        cls.alpha = np.array([1.1, 0.8, 0.1])

    def test_analytic_matches_finite_differences(self):
        """Test analytic vs central-difference score to relative error 1e-5."""
        analytic = quasi_score(self.model, self.alpha, self.path, self.rule)
        numeric = quasi_score(self.model, self.alpha, self.path, self.rule, analytic=False)
        rel = np.linalg.norm(analytic - numeric) / np.linalg.norm(analytic)
        self.assertLess(rel, 1e-5)

    def test_observed_info_symmetric(self):
        """Test that the observed information is symmetric with small raw asymmetry."""
        info, asymmetry = observed_info(self.model, self.alpha, self.path, self.rule, with_asymmetry=True)
        np.testing.assert_array_equal(info, info.T)
        self.assertLess(asymmetry, 1e-3)
        self.assertGreater(info[0, 0], 0.0)

    def test_scaled_score_info(self):
        """Test V_n = ε_n ∇ℓ_n and T_n = ε_n(-∇²ℓ_n)ε_n."""
        classification = classify_increments(self.path, self.rule)
        result = scaled_score_info(self.model, self.alpha, self.path, self.rule, classification)
        eps = self.path.schedule.epsilon(1, 2)
        np.testing.assert_allclose(result.epsilon_n, eps)
        score = quasi_score(self.model, self.alpha, self.path, self.rule, classification)
        np.testing.assert_allclose(result.V_n, eps * score)
        info = observed_info(self.model, self.alpha, self.path, self.rule, classification)
        np.testing.assert_allclose(result.T_n, eps[:, None] * info * eps[None, :])
        h = np.array([1.0, 0.0, 0.0])
        self.assertAlmostEqual(result.expansion(h), result.V_n[0] - 0.5 * result.T_n[0, 0])


class TestGaussianDerivatives(unittest.TestCase):
    """Test scores and information when no increment is flagged."""

    def setUp(self):
        """Set up a small-increment path that never crosses the threshold."""
        self.h = 0.01
        self.rule = ThresholdRule(rho=0.45, scale=4.0)
        self.path = _path_from_increments(0.05 * np.sin(np.arange(1, 201)), self.h)

    def test_observed_info_for_sigma(self):
        """Test -∂²ℓ/∂σ² = Σ[3Δx²/(σ⁴h) - 1/σ²] at zero drift."""
        model = builtin_merton(0.0, 1.0, 0.0, 0.0, 1.0)
        sigma = 0.4
        info = observed_info(model, [sigma, 0.0, 0.0], self.path, self.rule)
        dx = self.path.increments[:, 0]
        expected = float(np.sum(3.0 * dx ** 2 / (sigma ** 4 * self.h) - 1.0 / sigma ** 2))
        self.assertAlmostEqual(info[0, 0], expected, delta=1e-4 * abs(expected))

    def test_jump_mean_score_vanishes_without_jumps(self):
        """Test ∂ℓ/∂(jump mean) = 0 when λ > 0 but nothing is flagged."""
        model = builtin_ou_jump(1.0, 1.0, 2.0, 0.3, 0.5)
        self.assertEqual(classify_increments(self.path, self.rule).n_jump, 0)
        self.assertEqual(quasi_score(model, model.alpha0, self.path, self.rule)[2], 0.0)
        self.assertEqual(quasi_score(model, model.alpha0, self.path, self.rule, analytic=False)[2], 0.0)


if __name__ == '__main__':
    unittest.main()
