# Inference-compilation training: minimise the expected -log q over prior traces.
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from tqdm import tqdm

from utiles import nncore as nn
from utiles.errors import CheckpointMismatchError, NonFiniteGradientError, TrainingDivergedError
from utiles.icnet import ArchitectureConfig, InferenceNetwork
from utiles.trace import PriorSample, run_model

logger = logging.getLogger(__name__)

# seed-sequence stream tags
BATCH_STREAM = 1
PILOT_STREAM = 2


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    total_traces: int = Field(600_000, ge=1)
    minibatch: int = Field(128, ge=1)
    # (cumulative trace count, learning rate) pairs
    lr_schedule: list[tuple[int, float]] = [(0, 1e-3), (200_000, 1e-4), (400_000, 1e-5)]
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0.0)
    seed: int = 0
    checkpoint_every: int = Field(0, ge=0)
    threads: int = Field(1, ge=1)
    max_skipped: int = Field(10, ge=0)
    pilot_traces: int = Field(1000, ge=0)

    @field_validator("lr_schedule")
    @classmethod
    def _increasing(cls, schedule):
        if not schedule:
            raise ValueError("lr_schedule needs at least one entry")
        thresholds = [t for t, _ in schedule]
        if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
            raise ValueError("lr_schedule thresholds must be strictly increasing")
        if any(lr <= 0 for _, lr in schedule):
            raise ValueError("learning rates must be positive")
        return schedule

    def lr_at(self, traces_seen: int) -> float:
        lr = self.lr_schedule[0][1]
        for threshold, value in self.lr_schedule:
            if traces_seen >= threshold:
                lr = value
        return lr


@dataclass
class TrainReport:
    step: int
    traces_seen: int
    loss: float
    lr: float
    wall_time: float


def draw_prior_traces(model, count: int, seed_seq: np.random.SeedSequence, threads: int = 1) -> list:
    """Sample count prior traces, one generator per trace so the result ignores thread count."""
    rngs = [np.random.default_rng(s) for s in seed_seq.spawn(count)]
    if threads <= 1 or count == 1:
        return [run_model(model, PriorSample(), rng) for rng in rngs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda rng: run_model(model, PriorSample(), rng), rngs))


def loss_estimate(traces, net: InferenceNetwork, grow: bool = False) -> float:
    """Mean of -log q over a batch of prior traces, without recording gradients."""
    if not traces:
        raise ValueError("loss_estimate needs at least one trace")
    with nn.no_grad():
        losses = [-net.trace_log_q(trace, grow=grow).item() for trace in traces]
    return math.fsum(losses) / len(losses)


class Trainer:
    """
    Runs the training loop for one network.

    Args:
        model: Program to compile.
        net: InferenceNetwork being trained; grows its registry as new sites appear.
        cfg: TrainConfig.
        checkpoint_path: Where to write checkpoints (None to skip).
        progress: Show a tqdm bar.
    """

    def __init__(self, model, net: InferenceNetwork, cfg: TrainConfig,
                 checkpoint_path: Optional[str] = None, progress: bool = True, extra_metadata: Optional[dict] = None):
        self.model = model
        self.extra_metadata = dict(extra_metadata or {})
        self.net = net
        self.cfg = cfg
        self.checkpoint_path = checkpoint_path
        self.progress = progress
        self.optimizer = nn.Adam(beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
        self.step = 0
        self.traces_seen = 0
        self.consecutive_skips = 0

    def _batch_seed(self, step: int) -> np.random.SeedSequence:
        return np.random.SeedSequence([self.cfg.seed, BATCH_STREAM, step])

    def train_step(self) -> Optional[TrainReport]:
        """One minibatch and one Adam update. Returns None when the batch was skipped."""
        started = time.perf_counter()
        size = min(self.cfg.minibatch, self.cfg.total_traces - self.traces_seen)
        batch = draw_prior_traces(self.model, size, self._batch_seed(self.step), self.cfg.threads)
        lr = self.cfg.lr_at(self.traces_seen)

        self.net.zero_grad()
        losses = []
        try:
            for trace in batch:
                log_q = self.net.trace_log_q(trace, grow=True)
                value = -log_q.item()
                if not math.isfinite(value):
                    raise NonFiniteGradientError(f"non-finite -log q ({value}) on a trace of length {trace.length}")
                (log_q * (-1.0 / size)).backward()
                losses.append(value)
            self.optimizer.step(dict(self.net.named_parameters()), lr)
        except NonFiniteGradientError as exc:
            self.step += 1
            self.traces_seen += size
            self.consecutive_skips += 1
            logger.warning("skipping batch at step %d: %s", self.step, exc)
            if self.consecutive_skips > self.cfg.max_skipped:
                logger.error("training aborted after %d consecutive skipped batches", self.consecutive_skips)
                raise TrainingDivergedError(
                    f"{self.consecutive_skips} consecutive batches had non-finite loss or gradients"
                ) from exc
            return None

        self.consecutive_skips = 0
        self.step += 1
        self.traces_seen += size
        loss = math.fsum(losses) / size
        return TrainReport(self.step, self.traces_seen, loss, lr, time.perf_counter() - started)

    def run(self) -> Iterator[TrainReport]:
        """Train until cfg.total_traces have been consumed, yielding one report per applied step."""
        cfg = self.cfg
        bar = tqdm(total=cfg.total_traces, initial=self.traces_seen, unit="trace", disable=not self.progress)
        try:
            while self.traces_seen < cfg.total_traces:
                before = self.traces_seen
                report = self.train_step()
                bar.update(self.traces_seen - before)
                if report is not None:
                    bar.set_postfix(loss=f"{report.loss:.4g}", lr=f"{report.lr:.0e}")
                    yield report
                if (cfg.checkpoint_every and self.checkpoint_path
                        and before // cfg.checkpoint_every != self.traces_seen // cfg.checkpoint_every):
                    self.save_checkpoint(self.checkpoint_path)
        finally:
            bar.close()
        if self.checkpoint_path:
            self.save_checkpoint(self.checkpoint_path)

    # checkpoints

    def save_checkpoint(self, path: str) -> None:
        state = self.optimizer.state
        self.net.save(path, extra_arrays=self.optimizer.state_arrays(), extra_metadata={
            **self.extra_metadata,
            "trainer": {
                "step": self.step,
                "traces_seen": self.traces_seen,
                "adam_step": state.step,
                "adam_counts": state.counts,
                "config": self.cfg.model_dump(),
            }
        })

    @classmethod
    def resume(cls, model, path: str, cfg: Optional[TrainConfig] = None,
               checkpoint_path: Optional[str] = None, progress: bool = True,
               extra_metadata: Optional[dict] = None) -> "Trainer":
        """Rebuild a trainer (network, Adam moments and counters) from a checkpoint written by save_checkpoint."""
        arrays, meta = nn.load_checkpoint(path)
        if "trainer" not in meta:
            raise CheckpointMismatchError(f"{path} holds network weights only and cannot resume training")
        if meta["model_name"] != model.name:
            raise CheckpointMismatchError(f"{path} was trained on '{meta['model_name']}', not '{model.name}'")
        net = InferenceNetwork.from_state(arrays, meta)
        saved = meta["trainer"]
        trainer = cls(model, net, cfg or TrainConfig(**saved["config"]), checkpoint_path or path, progress,
                      extra_metadata if extra_metadata is not None else {"model_config": meta.get("model_config", {})})
        trainer.step = saved["step"]
        trainer.traces_seen = saved["traces_seen"]
        trainer.optimizer.load_state(arrays, saved["adam_step"], saved["adam_counts"])
        return trainer


def train(model, arch: ArchitectureConfig, cfg: TrainConfig, checkpoint_path: Optional[str] = None,
          progress: bool = False):
    """Create a network for model and train it; returns (network, list of TrainReport)."""
    pilot_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, PILOT_STREAM]))
    net = InferenceNetwork.for_program(model, arch, seed=cfg.seed, pilot_traces=cfg.pilot_traces, rng=pilot_rng)
    trainer = Trainer(model, net, cfg, checkpoint_path, progress)
    reports = list(trainer.run())
    return net, reports


def reports_to_rows(reports) -> list:
    """CSV rows for a report stream; wall time is left out so reruns compare byte for byte."""
    return [[r.step, r.traces_seen, repr(r.loss), repr(r.lr)] for r in reports]


TRAIN_CSV_HEADER = ["step", "traces_seen", "loss", "lr"]
