import unittest
import sys
import os
import math
import tempfile

import numpy as np
from scipy.stats import norm

# Add project root to path
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from utiles.errors import EssUndefinedError, ModelContractError
from utiles.icnet import ArchitectureConfig, InferenceNetwork
from utiles.models import GaussianConfig, gaussian_posterior, gaussian_program, resistor_program
from utiles.sis import (
    PRIOR_PROPOSER,
    WeightedSampleSet,
    ess,
    ess_report,
    export_csv,
    posterior_expectation,
    run_guided,
    weighted_histogram,
)
from utiles.toolbox import read_csv
from utiles.trace import PriorSample, run_model


def weights_only(log_weights):
    log_weights = np.asarray(log_weights, dtype=np.float64)
    return WeightedSampleSet([None] * len(log_weights), log_weights, np.zeros(1))


class TestEffectiveSampleSize(unittest.TestCase):
    def test_01_known_values(self):
        """Test Case 1: ESS of hand-picked weight vectors"""
        print("\n[Test 1] Verifying ESS values...")
        self.assertAlmostEqual(ess(weights_only(np.zeros(4))), 4.0, places=12)
        self.assertAlmostEqual(ess(weights_only([0.0, -np.inf, -np.inf])), 1.0, places=12)
        self.assertAlmostEqual(ess(weights_only(np.log([2.0, 1.0, 1.0]))), 16.0 / 6.0, places=12)

    def test_02_shift_invariance(self):
        """Test Case 2: Adding a constant to every log weight changes nothing"""
        print("\n[Test 2] Verifying shift invariance...")
        lw = np.random.default_rng(0).normal(0.0, 3.0, 50)
        base = ess(weights_only(lw))
        for shift in (-800.0, 5.0, 700.0):
            self.assertAlmostEqual(ess(weights_only(lw + shift)), base, delta=1e-10 * base)
        self.assertTrue(1.0 <= base <= 50.0)

    def test_03_undefined(self):
        """Test Case 3: All-zero or NaN weights have no ESS"""
        print("\n[Test 3] Verifying undefined ESS...")
        with self.assertRaises(EssUndefinedError):
            ess(weights_only([-np.inf, -np.inf]))
        with self.assertRaises(EssUndefinedError):
            ess(weights_only([0.0, np.nan]))


class TestImportanceSampling(unittest.TestCase):
    def setUp(self):
        self.cfg = GaussianConfig()
        self.program = gaussian_program(self.cfg)

    def test_04_expectation_of_constant(self):
        """Test Case 4: The estimate of a constant is that constant"""
        print("\n[Test 4] Verifying constant expectations...")
        sample_set = run_guided(self.program, None, [0.3], 200, np.random.default_rng(0))
        self.assertAlmostEqual(posterior_expectation(sample_set, lambda t: 2.5)[0], 2.5, places=12)
        mass, _ = weighted_histogram(sample_set, lambda t: t.value_of("mu"), bins=10, value_range=(-10, 10))
        self.assertAlmostEqual(mass.sum(), 1.0, places=12)

    def test_05_prior_proposal_weights(self):
        """Test Case 5: Prior proposals give log w = log likelihood"""
        print("\n[Test 5] Verifying likelihood weighting...")
        sample_set = run_guided(resistor_program(), PRIOR_PROPOSER, [0.5], 50, np.random.default_rng(1))
        for trace, lw in zip(sample_set.traces, sample_set.log_weights):
            self.assertAlmostEqual(lw, trace.log_likelihood, places=12)

    def test_06_conjugate_oracle(self):
        """Test Case 6: Self-normalised estimates agree with the exact posterior"""
        print("\n[Test 6] Verifying the conjugate Gaussian...")
        y = [0.8]
        exact = gaussian_posterior(self.cfg, y)
        sample_set = run_guided(self.program, None, y, 100_000, np.random.default_rng(2), threads=4)
        n_eff = ess(sample_set)
        mean = posterior_expectation(sample_set, lambda t: t.value_of("mu"))[0]
        self.assertLess(abs(mean - exact.mean), 3.0 * exact.std / math.sqrt(n_eff))

        p = norm.sf(0.0, exact.mean, exact.std)
        p_hat = posterior_expectation(sample_set, lambda t: float(t.value_of("mu") > 0.0))[0]
        self.assertLess(abs(p_hat - p), 3.0 * math.sqrt(p * (1.0 - p) / n_eff))

    def test_07_guided_weight_identity(self):
        """Test Case 7: Guided log weights equal log p(x, y) - log q(x)"""
        print("\n[Test 7] Verifying guided weights...")
        net = InferenceNetwork(ArchitectureConfig.from_variant("lstm-att", obs_embed_dim=8, obs_hidden_dim=8,
                                                               lstm_hidden_dim=8, proposal_hidden_dim=8,
                                                               query_hidden_dim=8), 1)
        program = resistor_program()
        for seed in range(20):
            net.trace_log_q(run_model(program, PriorSample(), np.random.default_rng(seed)))
        sample_set = run_guided(program, net, [0.45], 30, np.random.default_rng(3))
        for trace, lw in zip(sample_set.traces, sample_set.log_weights):
            log_q = net.trace_log_q(trace, grow=False).item()
            self.assertAlmostEqual(lw, trace.log_joint - log_q, places=8)

    def test_08_sample_count(self):
        """Test Case 8: At least one sample is needed"""
        print("\n[Test 8] Verifying K validation...")
        with self.assertRaises(ModelContractError):
            run_guided(self.program, None, [0.0], 0, np.random.default_rng(0))

    def test_09_threads_do_not_change_results(self):
        """Test Case 9: Worker count leaves the weighted set unchanged"""
        print("\n[Test 9] Verifying threaded sampling...")
        a = run_guided(resistor_program(), None, [0.5], 64, np.random.default_rng(4), threads=1)
        b = run_guided(resistor_program(), None, [0.5], 64, np.random.default_rng(4), threads=4)
        np.testing.assert_array_equal(a.log_weights, b.log_weights)

    def test_10_ess_report(self):
        """Test Case 10: ESS report rows stay within [1, K] and repeat exactly"""
        print("\n[Test 10] Verifying ESS reports...")
        observations = [[0.0], [1.5], [-2.0]]
        seen = []
        report = ess_report(self.program, None, observations, repeats=2, K=40, seed=5,
                            on_sample_set=lambda i, r, s: seen.append((i, r)))
        self.assertEqual(len(report.rows), 3)
        self.assertEqual(seen, [(0, 0), (0, 1), (1, 0), (1, 1), (2, 0), (2, 1)])
        for row in report.rows:
            self.assertEqual(len(row.values), 2)
            self.assertTrue(all(1.0 <= v <= 40.0 for v in row.values))
        again = ess_report(self.program, None, observations, repeats=2, K=40, seed=5, threads=3)
        self.assertEqual(report.overall_mean, again.overall_mean)
        with self.assertRaises(ModelContractError):
            ess_report(self.program, None, observations, repeats=0, K=40)

    def test_11_export_csv(self):
        """Test Case 11: Sample export has one column per latent and blanks for absent ones"""
        print("\n[Test 11] Verifying sample export...")
        sample_set = run_guided(resistor_program(), None, [0.5], 200, np.random.default_rng(6))
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "samples.csv")
            export_csv(sample_set, path)
            header, rows = read_csv(path)
        self.assertEqual(header[:3], ["log_weight", "voltage#1", "faulty#1"])
        self.assertEqual(set(header[3:]), {"resistance#1", "resistance_faulty#1"})
        self.assertEqual(len(rows), 200)
        for row, lw in zip(rows, sample_set.log_weights):
            self.assertEqual(float(row[0]), lw)
            self.assertEqual(sum(cell == "" for cell in row[3:]), 1)

    def test_12_error_halves_when_k_quadruples(self):
        """Test Case 12: Root mean squared error of the posterior mean falls about 2x from K to 4K"""
        print("\n[Test 12] Verifying the convergence rate...")
        y = [0.8]
        exact = gaussian_posterior(self.cfg, y).mean
        seeds = 300

        def rmse(K):
            errors = []
            for s in range(seeds):
                sample_set = run_guided(self.program, None, y, K, np.random.default_rng([K, s]))
                errors.append(posterior_expectation(sample_set, lambda t: t.value_of("mu"))[0] - exact)
            return math.sqrt(np.mean(np.square(errors)))

        ratio = rmse(50) / rmse(200)
        self.assertGreater(ratio, 1.6)
        self.assertLess(ratio, 2.5)


if __name__ == "__main__":
    unittest.main()
