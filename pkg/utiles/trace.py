# Probabilistic-programming core: sampling contexts, execution modes and traces.
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Optional, Protocol, Sequence, Union

import numpy as np

from utiles import dist as distributions
from utiles.dist import Distribution
from utiles.errors import AddressingError, ModelContractError

logger = logging.getLogger(__name__)

TRACE_FORMAT_HEADER = "# icarus-trace v1"


@dataclass(frozen=True)
class Site:
    """A sample statement as seen by a proposer: where it is and what prior it carries."""

    address: str
    instance: int
    dist: Distribution

    @property
    def family(self) -> str:
        return self.dist.family

    @property
    def key(self) -> tuple:
        return (self.address, self.instance)


@dataclass
class TraceEntry:
    address: str
    instance: int
    dist: Distribution
    value: float
    log_prob: float
    proposal_log_prob: Optional[float] = None
    from_prior: bool = True


@dataclass
class Observation:
    index: int
    address: str
    dist: Distribution
    value: float
    latent_cursor: int
    log_prob: float


@dataclass
class Trace:
    """One execution of a model: latent entries, observations and the running log weight."""

    entries: list = field(default_factory=list)
    observations: list = field(default_factory=list)
    log_weight: float = 0.0
    result: Any = None

    @property
    def length(self) -> int:
        return len(self.entries)

    @property
    def log_prior(self) -> float:
        return math.fsum(e.log_prob for e in self.entries)

    @property
    def log_likelihood(self) -> float:
        return math.fsum(o.log_prob for o in self.observations)

    @property
    def log_joint(self) -> float:
        return self.log_prior + self.log_likelihood

    @property
    def log_q(self) -> float:
        """Log density of the latents under the proposal that generated them."""
        return math.fsum(e.log_prob if e.proposal_log_prob is None else e.proposal_log_prob for e in self.entries)

    @property
    def observed_values(self) -> np.ndarray:
        return np.array([o.value for o in self.observations], dtype=np.float64)

    def latents(self) -> dict:
        return {(e.address, e.instance): e.value for e in self.entries}

    def value_of(self, address: str, instance: int = 1, default=None):
        for e in self.entries:
            if e.address == address and e.instance == instance:
                return e.value
        if default is None:
            raise KeyError(f"no latent at ({address}, {instance})")
        return default

    def sites(self) -> list:
        return [Site(e.address, e.instance, e.dist) for e in self.entries]


class Proposer(Protocol):
    """Per-trace proposal source used in guided execution."""

    def proposal_for(self, site: Site) -> Optional[Distribution]:
        ...

    def register_sampled_value(self, site: Site, value: float) -> None:
        ...


@dataclass(frozen=True)
class PriorSample:
    """Draw every latent and every observation from the model itself."""


@dataclass(frozen=True)
class Guided:
    """Draw latents from a network's proposals and condition on observed values.

    network must offer start_session(observed) returning a Proposer.
    """

    network: Any
    observed: Sequence[float]


@dataclass(frozen=True)
class Replay:
    """Re-execute with fixed latent values keyed by (address, instance).

    With observed values the trace evaluates the joint density; without them
    observations are simulated afresh.
    """

    values: Mapping
    observed: Optional[Sequence[float]] = None

    @classmethod
    def from_trace(cls, trace: Trace, keep_observations: bool = True) -> "Replay":
        observed = list(trace.observed_values) if keep_observations else None
        return cls(values=trace.latents(), observed=observed)


ExecutionController = Union[PriorSample, Guided, Replay]


@dataclass(frozen=True)
class Program:
    """A generative model bound to its configuration, with its fixed observation count."""

    name: str
    fn: Callable
    num_observations: int
    observation_names: tuple = ()
    config: Any = None

    def __call__(self, ctx: "SamplingContext"):
        return self.fn(ctx)


class SamplingContext:
    """The handle a model receives: `sample` for latents, `observe` for observations."""

    def __init__(self, controller: ExecutionController, rng: np.random.Generator):
        self.controller = controller
        self.rng = rng
        self.trace = Trace()
        self._counts = Counter()
        self._families = {}
        self._proposer = None
        self._observed = None
        if isinstance(controller, Guided):
            self._observed = np.asarray(controller.observed, dtype=np.float64)
            self._proposer = controller.network.start_session(self._observed)
        elif isinstance(controller, Replay) and controller.observed is not None:
            self._observed = np.asarray(controller.observed, dtype=np.float64)

    def instance_of(self, address: str) -> int:
        return self._counts[address] + 1

    def sample(self, address: str, d: Distribution) -> float:
        if not address:
            raise AddressingError("sample statements need a non-empty address")
        family = self._families.setdefault(address, d.family)
        if family != d.family:
            raise AddressingError(f"address '{address}' used with '{family}' and '{d.family}' in one trace")
        instance = self.instance_of(address)
        self._counts[address] += 1
        site = Site(address, instance, d)

        proposal_log_prob = None
        from_prior = True
        controller = self.controller
        if isinstance(controller, Replay):
            if site.key not in controller.values:
                raise ModelContractError(f"replay has no value for latent {site.key}")
            value = float(controller.values[site.key])
        elif isinstance(controller, Guided):
            proposal = self._proposer.proposal_for(site)
            if proposal is None:
                logger.debug("no proposal for %s, sampling from the prior", site.key)
                value = d.sample(self.rng)
            else:
                value = proposal.sample(self.rng)
                proposal_log_prob = proposal.log_pdf(value)
                from_prior = False
        else:
            value = d.sample(self.rng)

        log_prob = d.log_pdf(value)
        if from_prior:
            proposal_log_prob = log_prob
        else:
            self.trace.log_weight += log_prob - proposal_log_prob
        self.trace.entries.append(TraceEntry(address, instance, d, value, log_prob, proposal_log_prob, from_prior))
        if self._proposer is not None:
            self._proposer.register_sampled_value(site, value)
        return value

    def observe(self, address: str, d: Distribution) -> float:
        index = len(self.trace.observations)
        if self._observed is not None:
            if index >= len(self._observed):
                raise ModelContractError(
                    f"model issued more than the {len(self._observed)} observations supplied"
                )
            value = float(self._observed[index])
        else:
            value = d.sample(self.rng)
        log_prob = d.log_pdf(value)
        self.trace.log_weight += log_prob
        self.trace.observations.append(Observation(index, address, d, value, len(self.trace.entries), log_prob))
        return value


def instance_of(trace: Union[Trace, SamplingContext], address: str) -> int:
    """1 + number of earlier entries at address; 1 on first encounter."""
    if isinstance(trace, SamplingContext):
        return trace.instance_of(address)
    return 1 + sum(1 for e in trace.entries if e.address == address)


def run_model(model, controller: ExecutionController, rng: np.random.Generator,
              num_observations: Optional[int] = None) -> Trace:
    """Execute model once under controller and return the complete trace."""
    ctx = SamplingContext(controller, rng)
    result = model(ctx)
    trace = ctx.trace
    trace.result = result

    expected = num_observations
    if expected is None and isinstance(model, Program):
        expected = model.num_observations
    if ctx._observed is not None and len(trace.observations) != len(ctx._observed):
        raise ModelContractError(
            f"model issued {len(trace.observations)} observations but {len(ctx._observed)} were supplied"
        )
    if expected is not None and len(trace.observations) != expected:
        raise ModelContractError(f"model issued {len(trace.observations)} observations, expected {expected}")
    return trace


def _format_params(d: Distribution) -> str:
    return ",".join(repr(float(p)) for p in d.params())


def format_trace(trace: Trace) -> str:
    """Line-oriented text form of a trace (one entry or observation per line)."""
    lines = [TRACE_FORMAT_HEADER]
    for e in trace.entries:
        lines.append("\t".join(["latent", e.address, str(e.instance), e.dist.family, _format_params(e.dist), repr(e.value)]))
    for o in trace.observations:
        lines.append("\t".join([
            "observe", o.address, str(o.index), o.dist.family, _format_params(o.dist), repr(o.value), str(o.latent_cursor),
        ]))
    return "\n".join(lines) + "\n"


def parse_trace(text: str) -> Trace:
    """Inverse of format_trace; log densities are recomputed from the records."""
    trace = Trace()
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        kind = fields[0]
        try:
            if kind == "latent":
                _, address, instance, family, params, value = fields
                d = distributions.from_record(family, params.split(","))
                value = float(value)
                lp = d.log_pdf(value)
                trace.entries.append(TraceEntry(address, int(instance), d, value, lp, lp, True))
            elif kind == "observe":
                _, address, index, family, params, value, cursor = fields
                d = distributions.from_record(family, params.split(","))
                value = float(value)
                trace.observations.append(Observation(int(index), address, d, value, int(cursor), d.log_pdf(value)))
            else:
                raise ValueError(f"unknown record kind '{kind}'")
        except ValueError as exc:
            raise ModelContractError(f"bad trace record on line {lineno}: {exc}") from exc
    trace.log_weight = trace.log_likelihood
    return trace
