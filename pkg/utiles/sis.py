# Sequential importance sampling with compiled proposals, effective sample size
# and self-normalised posterior estimates.
import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import logsumexp

from utiles.errors import EssUndefinedError, ModelContractError
from utiles.trace import Guided, Trace, run_model

logger = logging.getLogger(__name__)


class _PriorSession:
    def proposal_for(self, site):
        return None

    def register_sampled_value(self, site, value):
        pass


class PriorProposer:
    """Stands in for a network and proposes every latent from its prior (likelihood weighting)."""

    def start_session(self, observed, grow: bool = False):
        return _PriorSession()


PRIOR_PROPOSER = PriorProposer()


@dataclass
class WeightedSampleSet:
    traces: list
    log_weights: np.ndarray
    observed: np.ndarray

    @property
    def size(self) -> int:
        return len(self.traces)

    def normalized_weights(self) -> np.ndarray:
        lw = np.asarray(self.log_weights, dtype=np.float64)
        if lw.size == 0 or np.any(np.isnan(lw)) or not np.any(np.isfinite(lw)):
            raise EssUndefinedError("no sample carries positive weight")
        w = np.exp(lw - lw.max())
        return w / w.sum()


def run_guided(model, net, y, K: int, rng: np.random.Generator, threads: int = 1) -> WeightedSampleSet:
    """Run K guided executions of model conditioned on y.

    net is an InferenceNetwork or PRIOR_PROPOSER (None is treated as the latter).
    Each trace gets its own generator spawned from rng.
    """
    if K < 1:
        raise ModelContractError(f"need at least one sample, got K={K}")
    net = PRIOR_PROPOSER if net is None else net
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    controller = Guided(net, y)
    rngs = rng.spawn(K)

    def one(r):
        return run_model(model, controller, r)

    if threads <= 1 or K == 1:
        traces = [one(r) for r in rngs]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            traces = list(pool.map(one, rngs))
    log_weights = np.array([t.log_weight for t in traces], dtype=np.float64)
    return WeightedSampleSet(traces, log_weights, y)


def ess(sample_set: WeightedSampleSet) -> float:
    """(sum w)^2 / sum w^2 from log weights, clamped to [1, K]."""
    lw = np.asarray(sample_set.log_weights, dtype=np.float64)
    if lw.size == 0 or np.any(np.isnan(lw)) or not np.any(np.isfinite(lw)):
        raise EssUndefinedError("every importance weight is zero")
    value = math.exp(2.0 * logsumexp(lw) - logsumexp(2.0 * lw))
    return min(max(value, 1.0), float(lw.size))


def posterior_expectation(sample_set: WeightedSampleSet, g: Callable[[Trace], object]) -> np.ndarray:
    """Self-normalised estimate of E[g(x) | y]."""
    w = sample_set.normalized_weights()
    values = np.array([np.atleast_1d(np.asarray(g(t), dtype=np.float64)) for t in sample_set.traces])
    return w @ values


def weighted_histogram(sample_set: WeightedSampleSet, g: Callable[[Trace], float], bins=50, value_range=None):
    """Posterior mass per bin of the scalar statistic g; returns (mass, edges)."""
    w = sample_set.normalized_weights()
    values = np.array([float(g(t)) for t in sample_set.traces])
    mass, edges = np.histogram(values, bins=bins, range=value_range, weights=w)
    return mass, edges


def latent_columns(traces) -> list:
    columns = {}
    for t in traces:
        for e in t.entries:
            columns.setdefault(f"{e.address}#{e.instance}", None)
    return list(columns)


def export_csv(sample_set: WeightedSampleSet, path: str) -> None:
    """One row per trace: log_weight then one column per (address, instance); absent latents are blank."""
    columns = latent_columns(sample_set.traces)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["log_weight"] + columns)
        for trace, lw in zip(sample_set.traces, sample_set.log_weights):
            latents = {f"{e.address}#{e.instance}": repr(e.value) for e in trace.entries}
            writer.writerow([repr(float(lw))] + [latents.get(c, "") for c in columns])


@dataclass
class EssRow:
    index: int
    values: list = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def std(self) -> float:
        return float(np.std(self.values))


@dataclass
class EssReport:
    rows: list
    K: int
    repeats: int

    @property
    def overall_mean(self) -> float:
        return float(np.mean([r.mean for r in self.rows]))

    @property
    def overall_std(self) -> float:
        return float(np.std([r.mean for r in self.rows]))


def ess_report(model, net, observations, repeats: int, K: int, seed: int = 0, threads: int = 1,
               on_sample_set: Optional[Callable] = None) -> EssReport:
    """Average ESS over repeated SIS runs for each observation vector.

    Run (i, r) draws from SeedSequence([seed, i, r]), so any row can be reproduced on its own.
    on_sample_set(i, r, sample_set) sees every weighted set before it is dropped.
    """
    if repeats < 1:
        raise ModelContractError("repeats must be at least 1")
    rows = []
    for i, y in enumerate(observations):
        row = EssRow(i)
        for r in range(repeats):
            rng = np.random.default_rng(np.random.SeedSequence([seed, i, r]))
            sample_set = run_guided(model, net, y, K, rng, threads)
            if on_sample_set is not None:
                on_sample_set(i, r, sample_set)
            row.values.append(ess(sample_set))
        logger.debug("observation %d: ESS %.3f +- %.3f", i, row.mean, row.std)
        rows.append(row)
    return EssReport(rows, K, repeats)
