# Generative models written against the sampling context, and the registry the CLI picks them from.
import logging
import math
from dataclasses import dataclass, replace
from functools import partial

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from utiles.acsim import Netlist, butterworth_bandpass, frequency_sweep, log_spaced_freqs
from utiles.dist import Bernoulli, MixtureNormalUniform, Normal, Uniform
from utiles.errors import ConfigError
from utiles.sis import WeightedSampleSet, posterior_expectation
from utiles.trace import Program, SamplingContext

logger = logging.getLogger(__name__)


# -------------------------------------------------------------------------
# Magnitude of a random vector with nuisance draws in between
# -------------------------------------------------------------------------

class MagnitudeConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    sigma_p: float = Field(10.0, gt=0.0)
    sigma_l: float = Field(0.5, gt=0.0)
    nuisance: int = Field(10, ge=0)


def magnitude_model(cfg: MagnitudeConfig, ctx: SamplingContext):
    x = ctx.sample("x", Normal(0.0, cfg.sigma_p))
    for m in range(1, cfg.nuisance + 1):
        ctx.sample(f"nuisance_{m}", Normal(0.0, cfg.sigma_p))
    y = ctx.sample("y", Normal(0.0, cfg.sigma_p))
    ctx.observe("r2", Normal(x * x + y * y, cfg.sigma_l))
    return x, y


def magnitude_program(cfg: MagnitudeConfig = None) -> Program:
    cfg = cfg or MagnitudeConfig()
    return Program("magnitude", partial(magnitude_model, cfg), 1, ("r2",), cfg)


@dataclass
class Coverage:
    """Share of samples passing a check, unweighted (the proposal) and importance weighted (the posterior)."""

    statistic: str
    proposal_fraction: float
    weighted_fraction: float


def _coverage(statistic: str, sample_set: WeightedSampleSet, hits) -> Coverage:
    hits = np.asarray(hits, dtype=np.float64)
    return Coverage(statistic, float(hits.mean()), float(sample_set.normalized_weights() @ hits))


def annulus_coverage(sample_set: WeightedSampleSet, r2: float, band: float = 0.2) -> Coverage:
    """Samples whose (x, y) radius lies within sqrt(r2) * (1 +- band)."""
    radius = math.sqrt(max(r2, 0.0))
    hits = [abs(math.hypot(*t.result) - radius) <= band * radius for t in sample_set.traces]
    return _coverage("annulus", sample_set, hits)


# -------------------------------------------------------------------------
# Single possibly faulty resistor
# -------------------------------------------------------------------------

class ResistorConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    voltage_mean: float = 5.0
    voltage_std: float = Field(0.5, gt=0.0)
    fault_prior: float = Field(0.1, ge=0.0, le=1.0)
    faulty_low: float = Field(1.0, gt=0.0)
    faulty_high: float = 100.0
    nominal_mean: float = Field(10.0, gt=0.0)
    nominal_std: float = Field(0.1, gt=0.0)
    noise_std: float = Field(0.001, gt=0.0)

    @model_validator(mode="after")
    def _bounds(self):
        if self.faulty_high <= self.faulty_low:
            raise ValueError("faulty_high must exceed faulty_low")
        return self


def resistor_model(cfg: ResistorConfig, ctx: SamplingContext):
    voltage = ctx.sample("voltage", Normal(cfg.voltage_mean, cfg.voltage_std))
    faulty = ctx.sample("faulty", Bernoulli(cfg.fault_prior))
    if faulty:
        resistance = ctx.sample("resistance_faulty", Uniform(cfg.faulty_low, cfg.faulty_high))
    else:
        resistance = ctx.sample("resistance", Normal(cfg.nominal_mean, cfg.nominal_std))
    ctx.observe("measured_current", Normal(voltage / resistance, cfg.noise_std))
    return voltage, faulty, resistance


def resistor_program(cfg: ResistorConfig = None) -> Program:
    cfg = cfg or ResistorConfig()
    return Program("resistor", partial(resistor_model, cfg), 1, ("measured_current",), cfg)


def simple_resistor_model(ctx: SamplingContext):
    return resistor_model(ResistorConfig(), ctx)


# -------------------------------------------------------------------------
# Conjugate Gaussian: unknown mean, known noise
# -------------------------------------------------------------------------

class GaussianConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    prior_mean: float = 0.0
    prior_std: float = Field(1.0, gt=0.0)
    noise_std: float = Field(1.0, gt=0.0)
    num_observations: int = Field(1, ge=1)


def gaussian_model(cfg: GaussianConfig, ctx: SamplingContext):
    mu = ctx.sample("mu", Normal(cfg.prior_mean, cfg.prior_std))
    for n in range(cfg.num_observations):
        ctx.observe(f"y_{n}", Normal(mu, cfg.noise_std))
    return mu


def gaussian_program(cfg: GaussianConfig = None) -> Program:
    cfg = cfg or GaussianConfig()
    names = tuple(f"y_{n}" for n in range(cfg.num_observations))
    return Program("gaussian", partial(gaussian_model, cfg), cfg.num_observations, names, cfg)


def gaussian_posterior(cfg: GaussianConfig, y) -> Normal:
    """Exact posterior of mu given the observations."""
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    precision = 1.0 / cfg.prior_std ** 2 + y.size / cfg.noise_std ** 2
    mean = (cfg.prior_mean / cfg.prior_std ** 2 + y.sum() / cfg.noise_std ** 2) / precision
    return Normal(float(mean), math.sqrt(1.0 / precision))


# -------------------------------------------------------------------------
# Band-pass filter fault diagnosis
# -------------------------------------------------------------------------

class CircuitModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    center_hz: float = Field(1e4, gt=0.0)
    bandwidth_hz: float = Field(5e3, gt=0.0)
    r0: float = Field(1e3, gt=0.0)
    order: int = Field(5, ge=1)
    connect_prior: float = Field(0.99, ge=0.0, le=1.0)
    short_prior: float = Field(0.01, ge=0.0, le=1.0)
    weight_normal: float = Field(0.98, ge=0.0, le=1.0)
    tight_std_fraction: float = Field(5e-4, gt=0.0)
    uniform_low_fraction: float = Field(0.5, gt=0.0)
    uniform_high_fraction: float = Field(1.5, gt=0.0)
    num_freqs: int = Field(40, ge=1)
    f_min: float = Field(1e3, gt=0.0)
    f_max: float = Field(1e5, gt=0.0)
    noise_fraction: float = Field(0.01, gt=0.0)
    fault_tolerance: float = Field(0.003, gt=0.0)

    @model_validator(mode="after")
    def _brackets(self):
        if not (self.uniform_low_fraction < 1.0 < self.uniform_high_fraction):
            raise ValueError("uniform bounds must bracket the nominal value")
        if self.f_max <= self.f_min:
            raise ValueError("f_max must exceed f_min")
        return self


class CircuitFaultModel:
    """
    Fault model for the band-pass ladder.

    For each R/L/C component it samples whether it is connected and then its
    value; for each short location whether the short is present. The sampled
    netlist is swept and every output voltage is observed as a real and an
    imaginary part.
    """

    def __init__(self, cfg: CircuitModelConfig = None):
        self.cfg = cfg or CircuitModelConfig()
        cfg = self.cfg
        design = butterworth_bandpass(cfg.center_hz, cfg.bandwidth_hz, cfg.r0, cfg.order)
        self.template = design.netlist
        self.freqs = log_spaced_freqs(cfg.f_min, cfg.f_max, cfg.num_freqs)
        self.nominal_response = frequency_sweep(self.template, self.freqs, "out")
        self.noise_std = cfg.noise_fraction * float(np.max(np.abs(self.nominal_response.vout)))
        self.passives = [c for c in self.template.components if c.kind in ("R", "L", "C")]
        self.short_locations = [c for c in self.template.components if c.kind == "S"]

    def value_prior(self, nominal: float) -> MixtureNormalUniform:
        cfg = self.cfg
        return MixtureNormalUniform(cfg.weight_normal, nominal, cfg.tight_std_fraction * nominal,
                                    cfg.uniform_low_fraction * nominal, cfg.uniform_high_fraction * nominal)

    @property
    def observation_names(self) -> tuple:
        return tuple(f"vout/{i}/{part}" for i in range(len(self.freqs)) for part in ("re", "im"))

    def __call__(self, ctx: SamplingContext):
        cfg = self.cfg
        sampled = {}
        for comp in self.passives:
            connected = ctx.sample(f"{comp.name}/connected", Bernoulli(cfg.connect_prior))
            value = ctx.sample(f"{comp.name}/value", self.value_prior(comp.value))
            # proposals can leave the positive axis; the simulator needs a physical value
            sampled[comp.name] = replace(comp, value=max(value, 1e-6 * comp.value), connected=bool(connected))
        for short in self.short_locations:
            active = ctx.sample(f"short/{short.name}", Bernoulli(cfg.short_prior))
            sampled[short.name] = replace(short, connected=bool(active))

        net = Netlist(tuple(sampled.get(c.name, c) for c in self.template.components))
        response = frequency_sweep(net, self.freqs, "out")
        if response.regularized_points:
            logger.debug("trace needed regularisation at %d frequencies", response.regularized_points)
        for i, v in enumerate(response.vout):
            ctx.observe(f"vout/{i}/re", Normal(float(v.real), self.noise_std))
            ctx.observe(f"vout/{i}/im", Normal(float(v.imag), self.noise_std))
        return response


def circuit_fault_model(cfg: CircuitModelConfig, ctx: SamplingContext):
    return CircuitFaultModel(cfg)(ctx)


def circuit_program(cfg: CircuitModelConfig = None) -> Program:
    model = CircuitFaultModel(cfg)
    return Program("circuit", model, 2 * len(model.freqs), model.observation_names, model.cfg)


@dataclass
class FaultProbability:
    location: str
    kind: str
    probability: float


def fault_marginals(sample_set: WeightedSampleSet, model: CircuitFaultModel) -> list:
    """Posterior probability of each fault: value outside tolerance, disconnection, active short."""
    tol = model.cfg.fault_tolerance
    checks = []
    for comp in model.passives:
        nominal = comp.value
        checks.append((comp.name, "value",
                       lambda t, n=comp.name, v=nominal: float(abs(t.value_of(f"{n}/value") / v - 1.0) > tol)))
        checks.append((comp.name, "disconnected",
                       lambda t, n=comp.name: float(t.value_of(f"{n}/connected") == 0.0)))
    for short in model.short_locations:
        checks.append((short.name, "short", lambda t, n=short.name: float(t.value_of(f"short/{n}") == 1.0)))

    probs = posterior_expectation(sample_set, lambda t: [check(t) for _, _, check in checks])
    return [FaultProbability(loc, kind, float(p)) for (loc, kind, _), p in zip(checks, probs)]


def reconstruction_coverage(sample_set: WeightedSampleSet, model: CircuitFaultModel, n_sigma: float = 3.0) -> Coverage:
    """Samples whose response stays within n_sigma noise stds of the observation across the pass band."""
    cfg = model.cfg
    band = np.abs(model.freqs - cfg.center_hz) <= 0.5 * cfg.bandwidth_hz
    observed = np.asarray(sample_set.observed, dtype=np.float64).reshape(-1, 2)
    observed = observed[:, 0] + 1j * observed[:, 1]
    limit = n_sigma * model.noise_std
    hits = []
    for t in sample_set.traces:
        diff = t.result.vout[band] - observed[band]
        hits.append(bool(np.all(np.abs(diff.real) <= limit) and np.all(np.abs(diff.imag) <= limit)))
    return _coverage(f"within_{n_sigma:g}sigma", sample_set, hits)


# -------------------------------------------------------------------------
# Registry
# -------------------------------------------------------------------------

MODEL_REGISTRY = {
    "magnitude": (MagnitudeConfig, magnitude_program),
    "resistor": (ResistorConfig, resistor_program),
    "gaussian": (GaussianConfig, gaussian_program),
    "circuit": (CircuitModelConfig, circuit_program),
}


def build_program(name: str, options: dict = None) -> Program:
    """Instantiate a registered model from a dict of config overrides."""
    if name not in MODEL_REGISTRY:
        raise ConfigError(f"unknown model '{name}', expected one of {', '.join(MODEL_REGISTRY)}")
    config_cls, factory = MODEL_REGISTRY[name]
    return factory(config_cls(**(options or {})))
