import unittest
from unittest.mock import patch
import sys
import os
import math
import tempfile

import numpy as np
from pydantic import ValidationError

# Add project root to path
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from utiles.dist import Normal
from utiles.errors import CheckpointMismatchError, TrainingDivergedError
from utiles.icnet import ArchitectureConfig, InferenceNetwork
from utiles.models import (
    CircuitModelConfig,
    GaussianConfig,
    MagnitudeConfig,
    build_program,
    circuit_program,
    gaussian_posterior,
    gaussian_program,
    magnitude_program,
    resistor_program,
)
from utiles.nncore import Tensor
from utiles.presets import TRAIN_PRESETS, desk_schedule
from utiles.trace import Site
from utiles.trainer import TrainConfig, Trainer, draw_prior_traces, loss_estimate, train

SMALL = dict(obs_embed_dim=8, obs_hidden_dim=8, sample_embed_dim=4, lstm_hidden_dim=8,
             site_embed_dim=3, query_hidden_dim=8, proposal_hidden_dim=8)


def small_arch(variant):
    return ArchitectureConfig.from_variant(variant, **SMALL)


def quick_config(**overrides):
    values = dict(total_traces=64, minibatch=16, lr_schedule=[(0, 1e-3)], pilot_traces=50)
    values.update(overrides)
    return TrainConfig(**values)


class TestTrainer(unittest.TestCase):
    def test_01_config_validation(self):
        """Test Case 1: Training settings are validated"""
        print("\n[Test 1] Verifying TrainConfig validation...")
        with self.assertRaises(ValidationError):
            TrainConfig(minibatch=0)
        with self.assertRaises(ValidationError):
            TrainConfig(lr_schedule=[(0, 1e-3), (0, 1e-4)])
        with self.assertRaises(ValidationError):
            TrainConfig(lr_schedule=[])
        with self.assertRaises(ValidationError):
            TrainConfig(unknown_field=1)

    def test_02_learning_rate_schedule(self):
        """Test Case 2: The learning rate steps down at the trace thresholds"""
        print("\n[Test 2] Verifying learning rate schedule...")
        cfg = TrainConfig(lr_schedule=desk_schedule["lr_schedule"])
        self.assertEqual(cfg.lr_at(0), 1e-3)
        self.assertEqual(cfg.lr_at(59_999), 1e-3)
        self.assertEqual(cfg.lr_at(60_000), 1e-4)
        self.assertEqual(cfg.lr_at(10 ** 7), 1e-5)
        for preset in TRAIN_PRESETS.values():
            TrainConfig(**preset)

    def test_03_untrained_loss_is_prior_density(self):
        """Test Case 3: With an empty registry the loss is the prior's negative log density"""
        print("\n[Test 3] Verifying loss against the prior...")
        program = magnitude_program(MagnitudeConfig(nuisance=3))
        traces = draw_prior_traces(program, 20, np.random.SeedSequence(0))
        net = InferenceNetwork(small_arch("lstm-att"), 1)
        expected = -sum(t.log_prior for t in traces) / len(traces)
        self.assertAlmostEqual(loss_estimate(traces, net), expected, places=9)
        self.assertEqual(len(net.registry), 0)

        single = loss_estimate(traces[:1], net, grow=True)
        self.assertAlmostEqual(loss_estimate(traces[:1] * 4, net), single, places=12)

    def test_04_fresh_loss_is_finite_for_every_model(self):
        """Test Case 4: An untrained network gives a finite loss on each bundled model"""
        print("\n[Test 4] Verifying finite initial loss...")
        programs = [magnitude_program(), resistor_program(), gaussian_program(),
                    circuit_program(CircuitModelConfig(num_freqs=10))]
        for program in programs:
            traces = draw_prior_traces(program, 100, np.random.SeedSequence(1))
            net = InferenceNetwork.for_program(program, small_arch("lstm-att"), pilot_traces=50)
            self.assertTrue(math.isfinite(loss_estimate(traces, net, grow=True)), program.name)

    def test_05_thread_count_does_not_change_traces(self):
        """Test Case 5: Prior traces depend on the seed only"""
        print("\n[Test 5] Verifying threaded trace generation...")
        program = resistor_program()
        a = draw_prior_traces(program, 30, np.random.SeedSequence(5), threads=1)
        b = draw_prior_traces(program, 30, np.random.SeedSequence(5), threads=4)
        self.assertEqual([t.latents() for t in a], [t.latents() for t in b])

    def test_06_minibatch_of_one(self):
        """Test Case 6: Training with a minibatch of one"""
        print("\n[Test 6] Verifying M = 1...")
        cfg = quick_config(total_traces=5, minibatch=1)
        net, reports = train(gaussian_program(), small_arch("ff"), cfg)
        self.assertEqual([r.traces_seen for r in reports], [1, 2, 3, 4, 5])
        self.assertTrue(all(math.isfinite(r.loss) for r in reports))
        self.assertEqual(net.registry.keys(), ["mu#1"])

    def test_07_last_batch_is_partial(self):
        """Test Case 7: The final minibatch stops at the trace budget"""
        print("\n[Test 7] Verifying trace budget...")
        _, reports = train(gaussian_program(), small_arch("ff"), quick_config(total_traces=40, minibatch=16))
        self.assertEqual([r.traces_seen for r in reports], [16, 32, 40])

    def test_08_seeded_runs_repeat(self):
        """Test Case 8: Same seed, same losses"""
        print("\n[Test 8] Verifying reproducible training...")
        program = magnitude_program(MagnitudeConfig(nuisance=2))
        _, a = train(program, small_arch("lstm-att"), quick_config(seed=7))
        _, b = train(program, small_arch("lstm-att"), quick_config(seed=7, threads=3))
        self.assertEqual([r.loss for r in a], [r.loss for r in b])

    def test_09_variable_trace_lengths(self):
        """Test Case 9: One network scores traces of different lengths"""
        print("\n[Test 9] Verifying variable-length traces...")
        net = InferenceNetwork(small_arch("lstm-att"), 1)
        short = draw_prior_traces(magnitude_program(MagnitudeConfig(nuisance=10)), 4, np.random.SeedSequence(2))
        long = draw_prior_traces(magnitude_program(MagnitudeConfig(nuisance=20)), 4, np.random.SeedSequence(3))
        net.zero_grad()
        for trace in short + long:
            (net.trace_log_q(trace) * (-1.0 / 8)).backward()
        self.assertEqual({t.length for t in short}, {12})
        self.assertEqual({t.length for t in long}, {22})
        self.assertEqual(len(net.registry), 22)
        params = dict(net.named_parameters())
        self.assertIsNotNone(params["site/nuisance_20#1/proposal.layer1.weight"].grad)

    def test_10_non_finite_batches_are_skipped_then_abort(self):
        """Test Case 10: Non-finite losses skip batches and eventually stop training"""
        print("\n[Test 10] Verifying divergence handling...")
        program = gaussian_program()
        net = InferenceNetwork(small_arch("ff"), 1)
        trainer = Trainer(program, net, quick_config(total_traces=1000, max_skipped=2), progress=False)
        with patch.object(net, "trace_log_q", return_value=Tensor(np.nan)):
            with self.assertLogs("utiles.trainer", level="WARNING") as logs:
                self.assertIsNone(trainer.train_step())
                with self.assertRaises(TrainingDivergedError):
                    list(trainer.run())
        self.assertEqual(trainer.consecutive_skips, 3)
        self.assertTrue(any("skipping batch" in line for line in logs.output))

    def test_11_resume_matches_uninterrupted_run(self):
        """Test Case 11: Resuming from a checkpoint continues the same run"""
        print("\n[Test 11] Verifying resume...")
        program = magnitude_program(MagnitudeConfig(nuisance=2))
        arch = small_arch("lstm-att")
        with tempfile.TemporaryDirectory() as tmp:
            _, full = train(program, arch, quick_config(total_traces=64, seed=4))

            first_path = os.path.join(tmp, "first.npz")
            train(program, arch, quick_config(total_traces=32, seed=4), checkpoint_path=first_path)
            trainer = Trainer.resume(program, first_path, quick_config(total_traces=64, seed=4), progress=False)
            self.assertEqual(trainer.traces_seen, 32)
            rest = list(trainer.run())

            with self.assertRaises(CheckpointMismatchError):
                Trainer.resume(gaussian_program(), first_path)

        self.assertEqual([r.traces_seen for r in rest], [48, 64])
        self.assertAlmostEqual(rest[-1].loss, full[-1].loss, places=10)

    def test_12_conjugate_gaussian_is_learned(self):
        """Test Case 12: The compiled proposal approaches the exact Gaussian posterior"""
        print("\n[Test 12] Verifying convergence on the conjugate model...")
        cfg_model = GaussianConfig()
        program = build_program("gaussian", cfg_model.model_dump())
        cfg = TrainConfig(total_traces=20_000, minibatch=32, seed=0, pilot_traces=500,
                          lr_schedule=[(0, 1e-2), (12_000, 3e-3), (16_000, 1e-3)])
        net, reports = train(program, small_arch("ff"), cfg)
        self.assertLess(reports[-1].loss, reports[0].loss)

        for y in (-1.0, 0.5, 1.0):
            session = net.start_session([y])
            proposal = session.proposal_for(Site("mu", 1, Normal(cfg_model.prior_mean, cfg_model.prior_std)))
            exact = gaussian_posterior(cfg_model, [y])
            self.assertAlmostEqual(proposal.mean, exact.mean, delta=0.1)
            self.assertAlmostEqual(proposal.std, exact.std, delta=0.15 * exact.std)


if __name__ == "__main__":
    unittest.main()
