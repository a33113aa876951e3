"""
Desk-scale acceptance runs (R up to 1000, n up to 4000).

These take minutes each and are skipped unless JUMPLAN_ACCEPTANCE=1.
"""
import unittest
import os
import sys
import math

import numpy as np

# Add parent directory to path to import modules
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from core.density_lab import QuadSpec, diagnose_b1, diagnose_b2, exact_merton_density, merton_params, p_tilde
from core.inference import fisher_gamma_closed_form, fisher_gamma_plugin, wald_power
from core.lan_harness import (LanConfig, estimator_asymptotics_experiment, jump_detection_experiment,
                              lan_expansion_experiment, wald_power_experiment)
from core.model_core import RateSchedule, builtin_merton, builtin_ou_jump
from core.path_sim import SimConfig, simulate_path
from core.quasi_lik import ThresholdRule

RUN_ACCEPTANCE = os.environ.get("JUMPLAN_ACCEPTANCE") == "1"
THREADS = os.cpu_count() or 1


def _quiet(_):
    pass


@unittest.skipUnless(RUN_ACCEPTANCE, "set JUMPLAN_ACCEPTANCE=1 to run desk-scale acceptance tests")
class TestOuJumpAcceptance(unittest.TestCase):
    """LAN, Fisher, efficiency, Wald and jump-detection runs for OU with Normal jumps."""

    @classmethod
    def setUpClass(cls):
        """Set up the reference model, threshold and Γ."""
        cls.model = builtin_ou_jump(1.0, 1.0, 1.0, 0.0, 0.5)
        cls.rule = ThresholdRule(rho=0.45, scale=4.0)
        cls.gamma = fisher_gamma_closed_form(cls.model, cls.model.alpha0)
        # hᵀΓh = 2·0.25 + 4·0.125 = 1
        cls.direction = np.array([0.5, 0.0, 1.0 / (2.0 * math.sqrt(2.0))])

    def _config(self, **kwargs):
        base = dict(model=self.model, alpha0=self.model.alpha0, direction=self.direction, rule=self.rule,
                    n_values=[250, 1000, 4000], beta=0.75, c=0.4, R=400, master_seed=20240601, threads=THREADS)
        base.update(kwargs)
        return LanConfig(**base)

    def test_lan_expansion(self):
        """Test mean, variance, normality and remainder decay of Λ_n(h)."""
        self.assertAlmostEqual(float(self.direction @ self.gamma.matrix @ self.direction), 1.0)
        report = lan_expansion_experiment(self._config(), gamma=self.gamma, progress_callback=_quiet)
        self.assertEqual(report.checks, {"mean_Lambda": True, "var_Lambda": True, "ks_normality": True,
                                         "residual_decay": True}, report.aggregates[-1])

    def test_fisher_plugin_matches_closed_form(self):
        """Test the plug-in Γ on a T_n = 10⁴ path against diag(2, 0.625, 4)."""
        path = simulate_path(self.model, self.model.alpha0,
                             SimConfig(n=1_000_000, h_n=0.01, master_seed=77, burn_in=True))
        plugin = fisher_gamma_plugin(self.model, self.model.alpha0, path)
        np.testing.assert_allclose(np.diag(plugin.matrix), [2.0, 0.625, 4.0], rtol=0.05)
        np.testing.assert_allclose(plugin.matrix - np.diag(np.diag(plugin.matrix)), 0.0, atol=0.05)

    def test_estimator_efficiency(self):
        """Test covariance, normality and coverage of the standardized QMLE errors."""
        result = estimator_asymptotics_experiment(self._config(n_values=[4000]), gamma=self.gamma,
                                                  progress_callback=_quiet)
        self.assertTrue(result["passed"], result["checks"])

    def test_wald_size_and_power(self):
        """Test empirical size and power at noncentrality 10 on the mean-reversion coordinate."""
        h = np.array([0.0, math.sqrt(10.0 / 0.625), 0.0])
        cfg = self._config(n_values=[4000], R=1000, wald_subset=[1])
        result = wald_power_experiment(cfg, alternatives=[h], gamma=self.gamma, progress_callback=_quiet)
        self.assertAlmostEqual(result["alternatives"][1]["ncp"], 10.0)
        self.assertAlmostEqual(result["alternatives"][1]["predicted"], wald_power(10.0))
        self.assertTrue(result["checks"]["size"], result["alternatives"][0])
        self.assertTrue(result["checks"]["power_matches_prediction"], result["alternatives"][1])

    def test_jump_detection_rates(self):
        """Test the false-jump rate and the missed-jump decay slope."""
        result = jump_detection_experiment(self._config(R=100), progress_callback=_quiet)
        self.assertTrue(result["checks"]["false_rate"], result["per_n"][-1])
        self.assertTrue(result["checks"]["missed_slope"], (result["missed_slope"], result["target_slope"]))

    def test_thread_count_invariance(self):
        """Test bit-identical rows under 1 and 8 worker threads."""
        single = lan_expansion_experiment(self._config(n_values=[250], R=16, threads=1), gamma=self.gamma,
                                          progress_callback=_quiet)
        pooled = lan_expansion_experiment(self._config(n_values=[250], R=16, threads=8), gamma=self.gamma,
                                          progress_callback=_quiet)
        for a, b in zip(single.rows, pooled.rows):
            self.assertEqual(a.Lambda, b.Lambda)
            np.testing.assert_array_equal(a.V, b.V)
            np.testing.assert_array_equal(a.T, b.T)


@unittest.skipUnless(RUN_ACCEPTANCE, "set JUMPLAN_ACCEPTANCE=1 to run desk-scale acceptance tests")
class TestMertonDensityAcceptance(unittest.TestCase):
    """B1/B2 diagnostics against the exact Merton mixture."""

    def setUp(self):
        """Set up the Merton model, threshold and schedule."""
        self.model = builtin_merton(0.0, 1.0, 1.0, 0.0, 0.5)
        self.rule = ThresholdRule(rho=0.45, scale=4.0)
        self.n_values = [250, 1000, 4000]
        self.quad = QuadSpec()

    def test_scaled_score_is_centered(self):
        """Test the mean of ε_n∇ℓ_n at the truth against three standard errors."""
        cfg = LanConfig(model=self.model, alpha0=self.model.alpha0, direction=[0.0, 0.0, 0.0], rule=self.rule,
                        n_values=[4000], R=200, master_seed=11, threads=THREADS)
        report = lan_expansion_experiment(cfg, progress_callback=_quiet)
        aggregate = report.aggregates[-1]
        for mean, se in zip(aggregate["mean_V"], aggregate["se_V"]):
            self.assertLessEqual(abs(mean), 3.0 * se, aggregate)

    def test_b1_decreasing(self):
        """Test that n·L1 gap decreases with 10% slack along the schedule."""
        series = diagnose_b1(self.model, self.model.alpha0, [0.0, 0.5, -0.5], self.n_values, self.rule,
                             self.quad, beta=0.75, c=0.4, threads=THREADS)
        self.assertTrue(series.is_decreasing(0.1), series.values())

    def test_p_tilde_below_exact(self):
        """Test p̃ ≤ p_exact up to quadrature tolerance at the finest step."""
        h = RateSchedule.from_beta(4000, 0.75, 0.4).h_n
        params = merton_params(self.model, self.model.alpha0)
        for x in np.linspace(-2.0, 2.0, 41):
            exact = float(exact_merton_density(params, 0.0, x, h))
            approx = p_tilde(self.model, self.model.alpha0, 0.0, x, h, self.rule, self.quad)
            self.assertLessEqual(approx, exact + 10.0 * (self.quad.abs_tol + self.quad.rel_tol * exact), x)

    def test_b2_decreasing(self):
        """Test the scaled d_j derivative along σ and θ directions."""
        for direction in ([1.0, 0.0, 0.0], [0.0, 1.0, 0.0]):
            series = diagnose_b2(self.model, self.model.alpha0, direction, [0.0], self.n_values, self.rule,
                                 self.quad, beta=0.75, c=0.4, threads=THREADS)
            self.assertTrue(series.is_decreasing(0.1), (direction, series.values()))


if __name__ == '__main__':
    unittest.main()
