# Probability distributions shared by generative models (priors, likelihoods) and proposals.
import math
from dataclasses import dataclass
from typing import ClassVar, Union

import numpy as np
from scipy.special import logsumexp

from utiles.errors import DistributionError

HALF_LOG_TWO_PI = 0.5 * math.log(2.0 * math.pi)


def _normal_log_pdf(x, mean, std):
    z = (x - mean) / std
    return -0.5 * z * z - np.log(std) - HALF_LOG_TWO_PI


def _safe_log(p):
    with np.errstate(divide="ignore"):
        return np.log(p)


@dataclass(frozen=True)
class Normal:
    """Gaussian with mean and standard deviation (not variance)."""

    family: ClassVar[str] = "normal"
    mean: float
    std: float

    def __post_init__(self):
        if not (np.isfinite(self.mean) and np.isfinite(self.std)) or self.std <= 0:
            raise DistributionError(f"Normal needs finite mean and std > 0, got mean={self.mean}, std={self.std}")

    def params(self):
        return (self.mean, self.std)

    def sample(self, rng: np.random.Generator) -> float:
        return float(rng.normal(self.mean, self.std))

    def log_pdf(self, x: float) -> float:
        return float(_normal_log_pdf(x, self.mean, self.std))

    @property
    def expected_value(self):
        return self.mean

    @property
    def variance(self):
        return self.std ** 2


@dataclass(frozen=True)
class Uniform:
    """Continuous uniform on the closed interval [low, high]."""

    family: ClassVar[str] = "uniform"
    low: float
    high: float

    def __post_init__(self):
        if not (np.isfinite(self.low) and np.isfinite(self.high)) or self.high <= self.low:
            raise DistributionError(f"Uniform needs finite low < high, got low={self.low}, high={self.high}")

    def params(self):
        return (self.low, self.high)

    def sample(self, rng: np.random.Generator) -> float:
        return float(rng.uniform(self.low, self.high))

    def log_pdf(self, x: float) -> float:
        # boundary points count as inside the support
        if self.low <= x <= self.high:
            return -math.log(self.high - self.low)
        return -math.inf

    @property
    def expected_value(self):
        return 0.5 * (self.low + self.high)

    @property
    def variance(self):
        return (self.high - self.low) ** 2 / 12.0


@dataclass(frozen=True)
class Bernoulli:
    """Coin flip with outcomes encoded as 0.0 / 1.0."""

    family: ClassVar[str] = "bernoulli"
    p: float

    def __post_init__(self):
        if not (0.0 <= self.p <= 1.0):
            raise DistributionError(f"Bernoulli needs p in [0, 1], got p={self.p}")

    def params(self):
        return (self.p,)

    def sample(self, rng: np.random.Generator) -> float:
        return 1.0 if rng.random() < self.p else 0.0

    def log_pdf(self, x: float) -> float:
        if x == 1.0:
            return float(_safe_log(self.p))
        if x == 0.0:
            return float(_safe_log(1.0 - self.p))
        return -math.inf

    @property
    def expected_value(self):
        return self.p

    @property
    def variance(self):
        return self.p * (1.0 - self.p)


@dataclass(frozen=True)
class MixtureNormalUniform:
    """Two-component mixture: a Normal with probability weight_normal, else a Uniform.

    Used for component values that are either correctly manufactured (tight
    Gaussian around nominal) or faulty (broad uniform).
    """

    family: ClassVar[str] = "mixture_normal_uniform"
    weight_normal: float
    mean: float
    std: float
    low: float
    high: float

    def __post_init__(self):
        if not (0.0 <= self.weight_normal <= 1.0):
            raise DistributionError(f"weight_normal must lie in [0, 1], got {self.weight_normal}")
        # component constructors validate the remaining parameters
        Normal(self.mean, self.std)
        Uniform(self.low, self.high)

    def params(self):
        return (self.weight_normal, self.mean, self.std, self.low, self.high)

    @property
    def normal_component(self) -> Normal:
        return Normal(self.mean, self.std)

    @property
    def uniform_component(self) -> Uniform:
        return Uniform(self.low, self.high)

    def sample(self, rng: np.random.Generator) -> float:
        if rng.random() < self.weight_normal:
            return self.normal_component.sample(rng)
        return self.uniform_component.sample(rng)

    def log_pdf(self, x: float) -> float:
        terms = [
            _safe_log(self.weight_normal) + self.normal_component.log_pdf(x),
            _safe_log(1.0 - self.weight_normal) + self.uniform_component.log_pdf(x),
        ]
        return float(logsumexp(terms))

    @property
    def expected_value(self):
        return self.weight_normal * self.mean + (1.0 - self.weight_normal) * self.uniform_component.expected_value

    @property
    def variance(self):
        u = self.uniform_component
        second = self.weight_normal * (self.std ** 2 + self.mean ** 2)
        second += (1.0 - self.weight_normal) * (u.variance + u.expected_value ** 2)
        return second - self.expected_value ** 2


@dataclass(frozen=True)
class MixtureOfNormals:
    """Finite Gaussian mixture, the full-support proposal family for continuous sites."""

    family: ClassVar[str] = "mixture_of_normals"
    weights: tuple
    means: tuple
    stds: tuple

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        m = np.asarray(self.means, dtype=np.float64)
        s = np.asarray(self.stds, dtype=np.float64)
        if not (w.ndim == m.ndim == s.ndim == 1 and len(w) == len(m) == len(s) and len(w) >= 1):
            raise DistributionError("MixtureOfNormals needs equally sized, non-empty weight/mean/std vectors")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise DistributionError(f"mixture weights must form a simplex, got {self.weights}")
        if not np.all(np.isfinite(m)) or not np.all(np.isfinite(s)) or np.any(s <= 0):
            raise DistributionError(f"mixture needs finite means and positive stds, got {self.means}, {self.stds}")
        # normalise to plain float tuples so equality and hashing behave
        object.__setattr__(self, "weights", tuple(float(v) for v in w))
        object.__setattr__(self, "means", tuple(float(v) for v in m))
        object.__setattr__(self, "stds", tuple(float(v) for v in s))

    def params(self):
        return tuple(self.weights) + tuple(self.means) + tuple(self.stds)

    def sample(self, rng: np.random.Generator) -> float:
        k = rng.choice(len(self.weights), p=self.weights)
        return float(rng.normal(self.means[k], self.stds[k]))

    def log_pdf(self, x: float) -> float:
        comps = _safe_log(np.asarray(self.weights)) + _normal_log_pdf(x, np.asarray(self.means), np.asarray(self.stds))
        return float(logsumexp(comps))

    @property
    def expected_value(self):
        return float(np.dot(self.weights, self.means))

    @property
    def variance(self):
        w, m, s = (np.asarray(v) for v in (self.weights, self.means, self.stds))
        return float(np.dot(w, s ** 2 + m ** 2) - np.dot(w, m) ** 2)


Distribution = Union[Normal, Uniform, Bernoulli, MixtureNormalUniform, MixtureOfNormals]

FAMILIES = {cls.family: cls for cls in (Normal, Uniform, Bernoulli, MixtureNormalUniform, MixtureOfNormals)}


def sample(d: Distribution, rng: np.random.Generator) -> float:
    """Draw one value from d using the caller's random stream."""
    return d.sample(rng)


def log_pdf(d: Distribution, x: float) -> float:
    """Log density (log mass for Bernoulli) of d at x."""
    return d.log_pdf(x)


def from_record(family: str, params) -> Distribution:
    """Rebuild a distribution from its family tag and flat parameter list."""
    if family not in FAMILIES:
        raise DistributionError(f"unknown distribution family '{family}'")
    params = [float(p) for p in params]
    if family == MixtureOfNormals.family:
        if len(params) % 3:
            raise DistributionError("MixtureOfNormals record needs 3K parameters")
        k = len(params) // 3
        return MixtureOfNormals(tuple(params[:k]), tuple(params[k:2 * k]), tuple(params[2 * k:]))
    return FAMILIES[family](*params)
