import unittest
from unittest.mock import patch
import sys
import os
import json
import shutil
import tempfile

# Add project root to path
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from frontend.app import EXIT_MODEL, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from frontend.plots import plot_weighted_scatter
from utiles import nncore as nn
from utiles.errors import EssUndefinedError
from utiles.models import circuit_program
from utiles.toolbox import read_csv, read_manifest, write_csv


class TestCommandLine(unittest.TestCase):
    def setUp(self):
        """Every test writes into its own scratch directory."""
        self.tmp = tempfile.mkdtemp(prefix="icarus_cli_")

    def tearDown(self):
        shutil.rmtree(self.tmp, ignore_errors=True)

    def out(self, name):
        return os.path.join(self.tmp, name)

    def read(self, *parts):
        with open(os.path.join(self.tmp, *parts), "rb") as fh:
            return fh.read()

    def test_01_simulate(self):
        """Test Case 1: simulate writes observations, latents and a manifest"""
        print("\n[Test 1] Verifying simulate...")
        code = main(["simulate", "--model", "gaussian", "--n", "5", "--out", self.out("sim"), "--quiet"])
        self.assertEqual(code, EXIT_OK)
        header, rows = read_csv(self.out("sim/observations.csv"))
        self.assertEqual(header, ["y_0"])
        self.assertEqual(len(rows), 5)
        header, rows = read_csv(self.out("sim/latents.csv"))
        self.assertEqual(header, ["observation", "mu#1"])
        manifest = read_manifest(self.out("sim"))
        self.assertEqual(manifest.command, "simulate")
        self.assertEqual(manifest.model, "gaussian")

    def test_02_infer_with_prior(self):
        """Test Case 2: infer with the prior proposer writes samples and an ESS table"""
        print("\n[Test 2] Verifying infer with the prior...")
        code = main(["infer", "--model", "magnitude", "--nuisance", "2", "--arch", "prior",
                     "--observe", "r2=200", "--k", "50", "--threads", "2", "--out", self.out("inf"), "--no-plots"])
        self.assertEqual(code, EXIT_OK)
        header, rows = read_csv(self.out("inf/samples.csv"))
        self.assertEqual(header[0], "log_weight")
        self.assertIn("x#1", header)
        self.assertEqual(len(rows), 50)
        _, rows = read_csv(self.out("inf/ess.csv"))
        self.assertEqual([r[0] for r in rows], ["0", "overall"])
        self.assertTrue(1.0 <= float(rows[0][1]) <= 50.0)

    def test_03_rerun_is_byte_identical(self):
        """Test Case 3: Re-running a manifest reproduces the CSV outputs"""
        print("\n[Test 3] Verifying rerun...")
        first = self.out("first")
        self.assertEqual(main(["infer", "--model", "resistor", "--arch", "prior", "--observe",
                               "measured_current=0.5", "--k", "30", "--seed", "3", "--out", first,
                               "--no-plots"]), EXIT_OK)
        self.assertEqual(main(["rerun", first, "--out", self.out("second")]), EXIT_OK)
        for name in ("samples.csv", "ess.csv"):
            self.assertEqual(self.read("first", name), self.read("second", name))

    def test_04_usage_errors(self):
        """Test Case 4: Usage and configuration mistakes exit with code 1"""
        print("\n[Test 4] Verifying usage errors...")
        out = ["--out", self.out("err"), "--no-plots"]
        self.assertEqual(main([]), EXIT_USAGE)
        self.assertEqual(main(["bogus"]), EXIT_USAGE)
        self.assertEqual(main(["infer", "--model", "gaussian", "--arch", "prior"] + out), EXIT_USAGE)
        self.assertEqual(main(["infer", "--model", "gaussian", "--checkpoint", self.out("none.npz"),
                               "--observe", "y_0=1"] + out), EXIT_USAGE)
        self.assertEqual(main(["infer", "--model", "magnitude", "--nuisance", "-1", "--arch", "prior",
                               "--observe", "r2=1"] + out), EXIT_USAGE)
        self.assertEqual(main(["infer", "--model", "magnitude", "--sigma-l", "wide", "--arch", "prior",
                               "--observe", "r2=1"] + out), EXIT_USAGE)
        self.assertEqual(main(["infer", "--model", "gaussian", "--arch", "prior", "--observe", "z=1"] + out),
                         EXIT_USAGE)
        self.assertEqual(main(["diagnose", "--model", "magnitude", "--arch", "prior", "--observe", "r2=1"] + out),
                         EXIT_USAGE)

    def test_05_model_errors(self):
        """Test Case 5: Observation files that do not fit the model exit with code 2"""
        print("\n[Test 5] Verifying model contract errors...")
        path = self.out("obs.csv")
        write_csv(path, ["other"], [["1.0"]])
        self.assertEqual(main(["infer", "--model", "gaussian", "--arch", "prior", "--observe-file", path,
                               "--out", self.out("err"), "--no-plots"]), EXIT_MODEL)

    def test_06_train_then_infer(self):
        """Test Case 6: A trained checkpoint drives inference for its own model only"""
        print("\n[Test 6] Verifying train and checkpoint use...")
        code = main(["train", "--model", "gaussian", "--arch", "ff", "--traces", "64", "--minibatch", "32",
                     "--out", self.out("train"), "--quiet", "--no-plots"])
        self.assertEqual(code, EXIT_OK)
        checkpoint = self.out("train/checkpoint.npz")
        header, rows = read_csv(self.out("train/train.csv"))
        self.assertEqual(header, ["step", "traces_seen", "loss", "lr"])
        self.assertEqual([r[1] for r in rows], ["32", "64"])

        self.assertEqual(main(["infer", "--checkpoint", checkpoint, "--observe", "y_0=0.5", "--k", "20",
                               "--out", self.out("guided"), "--no-plots"]), EXIT_OK)
        _, rows = read_csv(self.out("guided/samples.csv"))
        self.assertEqual(len(rows), 20)

        self.assertEqual(main(["infer", "--model", "magnitude", "--checkpoint", checkpoint, "--observe", "r2=100",
                               "--out", self.out("wrong"), "--no-plots"]), EXIT_MODEL)
        self.assertEqual(main(["attention", "--checkpoint", checkpoint, "--observe", "y_0=0.5",
                               "--out", self.out("att"), "--no-plots"]), EXIT_USAGE)

    def test_07_config_file_and_flags(self):
        """Test Case 7: Flags override the config file, which overrides defaults"""
        print("\n[Test 7] Verifying configuration layering...")
        path = self.out("cfg.json")
        with open(path, "w") as fh:
            json.dump({"model": {"noise_std": 2.0},
                       "arch": {"obs_embed_dim": 4},
                       "train": {"total_traces": 500, "minibatch": 8, "lr_schedule": [[0, 0.01]]}}, fh)
        with patch("frontend.app.Icarus.train", return_value=(None, [])) as mock_train:
            code = main(["train", "--model", "gaussian", "--config", path, "--traces", "100", "--arch", "lstm",
                         "--out", self.out("cfg"), "--quiet"])
        self.assertEqual(code, EXIT_OK)
        program, arch, cfg, resume = mock_train.call_args.args
        self.assertEqual(program.config.noise_std, 2.0)
        self.assertEqual((arch.core, arch.attention, arch.obs_embed_dim), ("lstm", False, 4))
        self.assertEqual((cfg.total_traces, cfg.minibatch), (100, 8))
        self.assertEqual(cfg.lr_schedule, [(0, 0.01)])
        self.assertIsNone(resume)

        with open(path, "w") as fh:
            json.dump({"optimiser": {}}, fh)
        self.assertEqual(main(["train", "--model", "gaussian", "--config", path, "--out", self.out("cfg")]),
                         EXIT_USAGE)

    def test_08_numerical_failure(self):
        """Test Case 8: Numerical failures exit with code 3"""
        print("\n[Test 8] Verifying numerical exit code...")
        with patch("frontend.app.Icarus.infer", side_effect=EssUndefinedError("every importance weight is zero")):
            code = main(["infer", "--model", "gaussian", "--arch", "prior", "--observe", "y_0=0",
                         "--out", self.out("num"), "--no-plots"])
        self.assertEqual(code, EXIT_NUMERIC)

    def test_09_plots_are_reproducible(self):
        """Test Case 9: SVG views render and the same CSV gives the same bytes"""
        print("\n[Test 9] Verifying SVG output...")
        code = main(["infer", "--model", "magnitude", "--nuisance", "0", "--arch", "prior",
                     "--observe", "r2=200", "--k", "40", "--out", self.out("plot")])
        self.assertEqual(code, EXIT_OK)
        self.assertTrue(os.path.isfile(self.out("plot/scatter.svg")))
        samples = self.out("plot/samples.csv")
        plot_weighted_scatter(samples, "x#1", "y#1", self.out("a.svg"), 14.0)
        plot_weighted_scatter(samples, "x#1", "y#1", self.out("b.svg"), 14.0)
        self.assertEqual(self.read("a.svg"), self.read("b.svg"))

    def test_10_evaluate(self):
        """Test Case 10: evaluate reports ESS over simulated observations"""
        print("\n[Test 10] Verifying evaluate...")
        code = main(["evaluate", "--model", "gaussian", "--arch", "prior", "--n", "3", "--k", "10",
                     "--repeats", "2", "--out", self.out("eval"), "--no-plots"])
        self.assertEqual(code, EXIT_OK)
        _, rows = read_csv(self.out("eval/ess.csv"))
        self.assertEqual([r[0] for r in rows], ["0", "1", "2", "overall"])
        _, rows = read_csv(self.out("eval/observations.csv"))
        self.assertEqual(len(rows), 3)

    def test_11_diagnose_circuit(self):
        """Test Case 11: diagnose reads a frequency response file and lists every fault"""
        print("\n[Test 11] Verifying diagnose...")
        model = circuit_program().fn
        path = self.out("response.csv")
        write_csv(path, ["freq", "re", "im"], model.nominal_response.to_rows())
        code = main(["diagnose", "--model", "circuit", "--arch", "prior", "--observe-file", path, "--k", "20",
                     "--out", self.out("diag"), "--no-plots"])
        self.assertEqual(code, EXIT_OK)
        header, rows = read_csv(self.out("diag/faults.csv"))
        self.assertEqual(header, ["observation", "location", "kind", "probability"])
        self.assertEqual(len(rows), 26)

    def test_12_resume_keeps_saved_settings(self):
        """Test Case 12: train --resume continues with the settings saved in the checkpoint"""
        print("\n[Test 12] Verifying resume from the command line...")
        base = ["--quiet", "--no-plots"]
        self.assertEqual(main(["train", "--model", "gaussian", "--arch", "ff", "--traces", "64", "--minibatch", "32",
                               "--seed", "5", "--out", self.out("first")] + base), EXIT_OK)
        first = self.out("first/checkpoint.npz")

        # nothing left to do: no steps, same counters and settings
        self.assertEqual(main(["train", "--resume", first, "--out", self.out("again")] + base), EXIT_OK)
        header, rows = read_csv(self.out("again/train.csv"))
        self.assertEqual(header, ["step", "traces_seen", "loss", "lr"])
        self.assertEqual(rows, [])
        _, meta = nn.load_checkpoint(self.out("again/checkpoint.npz"))
        self.assertEqual(meta["trainer"]["traces_seen"], 64)
        saved = meta["trainer"]["config"]
        self.assertEqual((saved["total_traces"], saved["minibatch"], saved["seed"]), (64, 32, 5))
        # the manifest is where a run records its seed
        self.assertEqual(read_manifest(self.out("again")).seed, 5)
        self.assertEqual(read_manifest(self.out("first")).seed, 5)

        # a longer budget keeps minibatch and seed, matching one uninterrupted run
        self.assertEqual(main(["train", "--resume", first, "--traces", "128", "--out", self.out("more")] + base),
                         EXIT_OK)
        _, resumed = read_csv(self.out("more/train.csv"))
        self.assertEqual([r[:2] for r in resumed], [["3", "96"], ["4", "128"]])
        self.assertEqual(main(["train", "--model", "gaussian", "--arch", "ff", "--traces", "128", "--minibatch", "32",
                               "--seed", "5", "--out", self.out("whole")] + base), EXIT_OK)
        _, whole = read_csv(self.out("whole/train.csv"))
        for a, b in zip(resumed, whole[2:]):
            self.assertAlmostEqual(float(a[2]), float(b[2]), places=10)

        self.assertEqual(main(["train", "--resume", self.out("missing.npz"), "--out", self.out("x")] + base),
                         EXIT_USAGE)

    def test_13_attention_report(self):
        """Test Case 13: attention averages weights over earlier sites and draws the heatmap"""
        print("\n[Test 13] Verifying the attention report...")
        self.assertEqual(main(["train", "--model", "magnitude", "--nuisance", "2", "--arch", "lstm-att",
                               "--traces", "64", "--minibatch", "32", "--out", self.out("train"),
                               "--quiet", "--no-plots"]), EXIT_OK)
        code = main(["attention", "--checkpoint", self.out("train/checkpoint.npz"), "--observe", "r2=200",
                     "--runs", "2", "--out", self.out("att"), "--quiet"])
        self.assertEqual(code, EXIT_OK)
        header, rows = read_csv(self.out("att/attention.csv"))
        self.assertEqual(header, ["proposed_site", "query", "attended_site", "weight"])
        order = ["x#1", "nuisance_1#1", "nuisance_2#1", "y#1"]
        totals = {}
        for proposed, query, attended, weight in rows:
            self.assertLess(order.index(attended), order.index(proposed))
            totals[(proposed, query)] = totals.get((proposed, query), 0.0) + float(weight)
        self.assertEqual({p for p, _ in totals}, {"nuisance_1#1", "nuisance_2#1", "y#1"})
        self.assertEqual({q for _, q in totals}, {"0", "1", "2", "3"})
        for key, total in totals.items():
            self.assertAlmostEqual(total, 1.0, places=9, msg=key)
        self.assertTrue(os.path.isfile(self.out("att/attention.svg")))

    def test_14_infer_writes_coverage(self):
        """Test Case 14: infer records annulus coverage for the magnitude model"""
        print("\n[Test 14] Verifying coverage output...")
        code = main(["infer", "--model", "magnitude", "--nuisance", "2", "--arch", "prior", "--observe", "r2=200",
                     "--k", "40", "--out", self.out("inf"), "--no-plots"])
        self.assertEqual(code, EXIT_OK)
        header, rows = read_csv(self.out("inf/coverage.csv"))
        self.assertEqual(header, ["statistic", "proposal_fraction", "weighted_fraction"])
        self.assertEqual(len(rows), 1)
        self.assertEqual(rows[0][0], "annulus")
        for cell in rows[0][1:]:
            self.assertTrue(0.0 <= float(cell) <= 1.0)
        self.assertEqual(main(["infer", "--model", "gaussian", "--arch", "prior", "--observe", "y_0=0.1",
                               "--k", "10", "--out", self.out("plain"), "--no-plots"]), EXIT_OK)
        self.assertFalse(os.path.exists(self.out("plain/coverage.csv")))

    def test_15_compare_checkpoints(self):
        """Test Case 15: compare tabulates ESS per network on shared observations"""
        print("\n[Test 15] Verifying compare...")
        train = ["train", "--model", "gaussian", "--arch", "ff", "--traces", "64", "--minibatch", "32",
                 "--quiet", "--no-plots"]
        self.assertEqual(main(train + ["--out", self.out("ff")]), EXIT_OK)
        checkpoint = self.out("ff/checkpoint.npz")
        code = main(["compare", "--checkpoint", checkpoint, "--with-prior", "--n", "2", "--k", "10",
                     "--repeats", "2", "--out", self.out("cmp"), "--quiet"])
        self.assertEqual(code, EXIT_OK)
        header, rows = read_csv(self.out("cmp/compare.csv"))
        self.assertEqual(header, ["network", "checkpoint", "ess_mean", "ess_std", "ess_0", "ess_1"])
        self.assertEqual([r[:2] for r in rows], [["prior", ""], ["ff", checkpoint]])
        for row in rows:
            self.assertTrue(all(1.0 <= float(v) <= 10.0 for v in (row[2], row[4], row[5])))
        _, observed = read_csv(self.out("cmp/observations.csv"))
        self.assertEqual(len(observed), 2)
        self.assertTrue(os.path.isfile(self.out("cmp/compare.svg")))

        # networks compiled for differently configured models cannot share a table
        self.assertEqual(main(train + ["--model-opt", "prior_std=2.0", "--out", self.out("wide")]), EXIT_OK)
        self.assertEqual(main(["compare", "--checkpoint", checkpoint, "--checkpoint", self.out("wide/checkpoint.npz"),
                               "--out", self.out("bad"), "--no-plots"]), EXIT_MODEL)
        self.assertEqual(main(["compare", "--model", "gaussian", "--out", self.out("none"), "--no-plots"]),
                         EXIT_USAGE)



if __name__ == "__main__":
    unittest.main()
