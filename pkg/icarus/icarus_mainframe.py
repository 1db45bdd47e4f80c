from dotenv import load_dotenv
import logging
import os
import sys

import numpy as np

# Ensure utiles can be imported by adding parent directory to path
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from utiles import nncore as nn
from utiles.errors import CheckpointMismatchError, ConfigError
from utiles.icnet import ArchitectureConfig, InferenceNetwork
from utiles.models import (
    CircuitFaultModel,
    annulus_coverage,
    build_program,
    fault_marginals,
    reconstruction_coverage,
)
from utiles.sis import PRIOR_PROPOSER, ess_report, export_csv, latent_columns, run_guided
from utiles.toolbox import ensure_output_dir, fmt, write_csv
from utiles.trace import PriorSample, run_model
from utiles.trainer import (
    PILOT_STREAM,
    TRAIN_CSV_HEADER,
    TrainConfig,
    Trainer,
    reports_to_rows,
)
load_dotenv()

logger = logging.getLogger(__name__)

# seed-sequence stream tags for the commands that draw their own randomness
SIMULATE_STREAM = 11
ATTENTION_STREAM = 12
DIAGNOSE_STREAM = 13
MAX_RECONSTRUCTIONS = 20


class Icarus:
    """
    Icarus Mainframe Class.

    Ties the library together for the command line: builds models and
    networks, runs training and inference, and writes every result as a CSV
    (plus SVG views when plotting is on) into one output directory.
    """
    def __init__(self, output_dir=None, threads=None, seed=0, progress=True, plots=True):
        """
        Args:
            output_dir: Where results go (default: $ICARUS_OUTPUT_DIR or "runs").
            threads: Worker cap for trace generation (default: $ICARUS_THREADS or all cores).
            seed: Root seed for every random stream of a command.
            progress: Show progress bars.
            plots: Also render SVG views of the CSV outputs.
        """
        self.output_dir = output_dir or os.getenv("ICARUS_OUTPUT_DIR", "runs")
        self.threads = int(threads or os.getenv("ICARUS_THREADS", 0) or os.cpu_count() or 1)
        self.seed = seed
        self.progress = progress
        self.plots = plots
        self.icarus_state = "idle"

    def path(self, name):
        return os.path.join(ensure_output_dir(self.output_dir), name)

    # -------------------------------
    # MODELS AND NETWORKS
    # -------------------------------
    def program(self, model_name, options=None):
        return build_program(model_name, options)

    def load_network(self, checkpoint, program):
        """Load a checkpoint compiled for program; None gives the prior proposer."""
        if checkpoint is None:
            return PRIOR_PROPOSER
        if not os.path.isfile(checkpoint):
            raise ConfigError(f"checkpoint {checkpoint} does not exist")
        arrays, meta = nn.load_checkpoint(checkpoint)
        net = InferenceNetwork.from_state(arrays, meta)
        if net.model_name != program.name or net.obs_dim != program.num_observations:
            rng = np.random.default_rng(self.seed)
            traces = [run_model(program, PriorSample(), rng) for _ in range(20)]
            model_sites = {f"{e.address}#{e.instance}" for t in traces for e in t.entries}
            foreign = [key for key in net.registry.keys() if key not in model_sites]
            raise CheckpointMismatchError(
                f"{checkpoint} was compiled for '{net.model_name}' ({net.obs_dim} observations), "
                f"not '{program.name}' ({program.num_observations}); "
                f"unknown addresses: {', '.join(foreign[:8]) or 'none'}"
            )
        return net

    @staticmethod
    def checkpoint_model_options(checkpoint):
        """Model name and config stored with a checkpoint, so inference rebuilds the same program."""
        _, meta = nn.load_checkpoint(checkpoint)
        return meta.get("model_name"), meta.get("model_config", {})

    @staticmethod
    def checkpoint_train_config(checkpoint):
        """Training settings saved with a checkpoint, the starting point of a resumed run."""
        if not os.path.isfile(checkpoint):
            raise ConfigError(f"checkpoint {checkpoint} does not exist")
        _, meta = nn.load_checkpoint(checkpoint)
        if "trainer" not in meta:
            raise CheckpointMismatchError(f"{checkpoint} holds network weights only and cannot resume training")
        return meta["trainer"]["config"]

    # -------------------------------
    # TRAIN
    # -------------------------------
    def train(self, program, arch: ArchitectureConfig, cfg: TrainConfig, resume=None):
        self.icarus_state = "Training"
        checkpoint = self.path("checkpoint.npz")
        # keep the model settings next to the weights
        model_meta = {"model_config": program.config.model_dump() if program.config is not None else {}}
        if resume:
            trainer = Trainer.resume(program, resume, cfg, checkpoint, self.progress, model_meta)
        else:
            pilot_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, PILOT_STREAM]))
            net = InferenceNetwork.for_program(program, arch, cfg.seed, cfg.pilot_traces, pilot_rng)
            trainer = Trainer(program, net, cfg, checkpoint, self.progress, model_meta)
        reports = list(trainer.run())
        csv_path = self.path("train.csv")
        write_csv(csv_path, TRAIN_CSV_HEADER, reports_to_rows(reports))
        if self.plots and reports:
            from frontend.plots import plot_loss
            plot_loss(csv_path, self.path("loss.svg"))
        if reports:
            logger.info("trained %d traces, final loss %.4f", trainer.traces_seen, reports[-1].loss)
        self.icarus_state = "idle"
        return trainer.net, reports

    # -------------------------------
    # INFER
    # -------------------------------
    def infer(self, program, net, observations, k, repeats):
        """Weighted samples for the first observation plus an ESS table over all of them."""
        self.icarus_state = "Inferring"
        kept = {}

        def keep_first(i, r, sample_set):
            if r == 0:
                kept[i] = sample_set

        report = ess_report(program, net, observations, repeats, k, self.seed, self.threads, keep_first)
        export_csv(kept[0], self.path("samples.csv"))
        self.write_ess(report, "ess.csv")

        if self.plots and program.name == "magnitude":
            from frontend.plots import plot_weighted_scatter
            radius = float(np.sqrt(max(observations[0][0], 0.0)))
            plot_weighted_scatter(self.path("samples.csv"), "x#1", "y#1", self.path("scatter.svg"), radius)
        if isinstance(program.fn, CircuitFaultModel):
            self.write_reconstruction(program.fn, observations[0], kept[0])
            coverage = reconstruction_coverage(kept[0], program.fn)
        elif program.name == "magnitude":
            coverage = annulus_coverage(kept[0], float(observations[0][0]))
        else:
            coverage = None
        if coverage is not None:
            write_csv(self.path("coverage.csv"), ["statistic", "proposal_fraction", "weighted_fraction"],
                      [[coverage.statistic, fmt(coverage.proposal_fraction), fmt(coverage.weighted_fraction)]])
            logger.info("%s: %.3f of proposals, %.3f of posterior mass",
                        coverage.statistic, coverage.proposal_fraction, coverage.weighted_fraction)
        self.icarus_state = "idle"
        return report

    def write_ess(self, report, name):
        rows = [[row.index, fmt(row.mean), fmt(row.std)] for row in report.rows]
        rows.append(["overall", fmt(report.overall_mean), fmt(report.overall_std)])
        write_csv(self.path(name), ["observation", "ess_mean", "ess_std"], rows)
        logger.info("ESS over %d observations: %.3f +- %.3f (K=%d, repeats=%d)",
                    len(report.rows), report.overall_mean, report.overall_std, report.K, report.repeats)

    def write_reconstruction(self, model: CircuitFaultModel, observed, sample_set):
        """|Vout| of the observation and of the heaviest sampled traces."""
        order = np.argsort(-sample_set.log_weights, kind="stable")[:MAX_RECONSTRUCTIONS]
        observed = np.asarray(observed).reshape(-1, 2)
        observed_abs = np.hypot(observed[:, 0], observed[:, 1])
        header = ["freq", "observed_abs"] + [f"sample_{j}_abs" for j in range(len(order))]
        columns = [np.abs(sample_set.traces[j].result.vout) for j in order]
        rows = [[fmt(f), fmt(observed_abs[i])] + [fmt(c[i]) for c in columns] for i, f in enumerate(model.freqs)]
        path = self.path("reconstruction.csv")
        write_csv(path, header, rows)
        if self.plots:
            from frontend.plots import plot_reconstruction
            plot_reconstruction(path, self.path("reconstruction.svg"))

    # -------------------------------
    # DIAGNOSE
    # -------------------------------
    def diagnose(self, program, net, observations, k):
        if not isinstance(program.fn, CircuitFaultModel):
            raise ConfigError("diagnose needs the circuit model")
        self.icarus_state = "Diagnosing"
        rows = []
        for i, y in enumerate(observations):
            rng = np.random.default_rng(np.random.SeedSequence([self.seed, DIAGNOSE_STREAM, i]))
            sample_set = run_guided(program, net, y, k, rng, self.threads)
            for fault in fault_marginals(sample_set, program.fn):
                rows.append([i, fault.location, fault.kind, fmt(fault.probability)])
        path = self.path("faults.csv")
        write_csv(path, ["observation", "location", "kind", "probability"], rows)
        if self.plots:
            from frontend.plots import plot_fault_bars
            plot_fault_bars(path, self.path("faults.svg"))
        self.icarus_state = "idle"
        return rows

    # -------------------------------
    # ATTENTION
    # -------------------------------
    def attention_report(self, program, net, y, runs, target=None):
        """Average attention weights per (proposed site, query, attended site) over guided traces."""
        if net is PRIOR_PROPOSER or not net.uses_attention:
            raise ConfigError("the attention report needs a checkpoint with attention")
        self.icarus_state = "Attending"
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, ATTENTION_STREAM]))
        sample_set = run_guided(program, net, y, runs, rng, self.threads)
        sums, counts = {}, {}
        for trace in sample_set.traces:
            for record in net.attention_weights(trace):
                proposed = f"{record.site[0]}#{record.site[1]}"
                for q, row in enumerate(record.weights):
                    for (addr, inst), w in zip(record.attended, row):
                        key = (proposed, q, f"{addr}#{inst}")
                        sums[key] = sums.get(key, 0.0) + float(w)
                        counts[key] = counts.get(key, 0) + 1
        rows = [[p, q, a, fmt(sums[(p, q, a)] / counts[(p, q, a)])] for (p, q, a) in sums]
        path = self.path("attention.csv")
        write_csv(path, ["proposed_site", "query", "attended_site", "weight"], rows)
        if self.plots and rows:
            from frontend.plots import plot_attention
            target = target or rows[-1][0]
            plot_attention(path, target, self.path("attention.svg"))
        self.icarus_state = "idle"
        return rows

    # -------------------------------
    # SIMULATE / EVALUATE
    # -------------------------------
    def simulate(self, program, n):
        """Draw n observation vectors (and their latent ground truth) from the prior."""
        traces = [
            run_model(program, PriorSample(), np.random.default_rng(np.random.SeedSequence([self.seed, SIMULATE_STREAM, i])))
            for i in range(n)
        ]
        names = list(program.observation_names)
        write_csv(self.path("observations.csv"), names, [[fmt(v) for v in t.observed_values] for t in traces])
        columns = latent_columns(traces)
        latent_rows = []
        for i, t in enumerate(traces):
            values = {f"{e.address}#{e.instance}": fmt(e.value) for e in t.entries}
            latent_rows.append([i] + [values.get(c, "") for c in columns])
        write_csv(self.path("latents.csv"), ["observation"] + columns, latent_rows)
        return [t.observed_values for t in traces]

    def evaluate(self, program, net, n, k, repeats):
        self.icarus_state = "Evaluating"
        observations = self.simulate(program, n)
        report = ess_report(program, net, observations, repeats, k, self.seed, self.threads)
        self.write_ess(report, "ess.csv")
        self.icarus_state = "idle"
        return report

    def compare(self, program, networks, n, k, repeats):
        """ESS of several proposers on one shared set of simulated observations.

        networks is a list of (label, source, net) with net None for the prior.
        Every proposer sees the same seeds, so rows differ only by the network.
        """
        self.icarus_state = "Comparing"
        observations = self.simulate(program, n)
        rows = []
        for label, source, net in networks:
            report = ess_report(program, net, observations, repeats, k, self.seed, self.threads)
            logger.info("%s: ESS %.3f +- %.3f", label, report.overall_mean, report.overall_std)
            rows.append([label, source, fmt(report.overall_mean), fmt(report.overall_std)]
                        + [fmt(row.mean) for row in report.rows])
        path = self.path("compare.csv")
        write_csv(path, ["network", "checkpoint", "ess_mean", "ess_std"] + [f"ess_{i}" for i in range(n)], rows)
        if self.plots:
            from frontend.plots import plot_ess_comparison
            plot_ess_comparison(path, self.path("compare.svg"))
        self.icarus_state = "idle"
        return rows
