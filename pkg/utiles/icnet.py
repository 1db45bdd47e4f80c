# Inference networks: observation embedder, per-site embedder registry and the
# four proposal architectures (feedforward or LSTM core, with or without attention).
import contextlib
import logging
import math
import threading
import zlib
from dataclasses import dataclass, replace
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.special import expit, logit as _logit, softmax as _softmax

from utiles import nncore as nn
from utiles.dist import (
    Bernoulli,
    Distribution,
    MixtureNormalUniform,
    MixtureOfNormals,
    Normal,
    Uniform,
)
from utiles.errors import AddressingError, CheckpointMismatchError, ConfigError, ModelContractError
from utiles.nncore import Tensor
from utiles.trace import PriorSample, Site, Trace, run_model

logger = logging.getLogger(__name__)

VARIANTS = ("ff", "ff-att", "lstm", "lstm-att")
HALF_LOG_TWO_PI = 0.5 * math.log(2.0 * math.pi)
# softplus(SOFTPLUS_ONE) == 1, so a zero raw output decodes to the prior scale
SOFTPLUS_ONE = math.log(math.e - 1.0)
STD_FLOOR = 1e-6
BERNOULLI_CLIP = 1e-6


class ArchitectureConfig(BaseModel):
    """Shape of an inference network. Defaults are the desk-scale widths."""

    model_config = ConfigDict(extra="forbid")

    core: Literal["ff", "lstm"] = "lstm"
    attention: bool = True
    obs_embed_dim: int = Field(64, ge=1)
    obs_hidden_dim: int = Field(64, ge=1)
    sample_embed_dim: int = Field(16, ge=1)
    lstm_hidden_dim: int = Field(128, ge=1)
    site_embed_dim: int = Field(8, ge=1)
    query_hidden_dim: int = Field(64, ge=1)
    proposal_hidden_dim: int = Field(64, ge=1)
    num_queries: int = Field(4, ge=1)
    key_dim: int = Field(16, ge=1)
    value_dim: int = Field(8, ge=1)
    normal_proposal: Literal["normal", "mixture"] = "normal"
    mixture_components: int = Field(2, ge=2)

    @classmethod
    def from_variant(cls, variant: str, **overrides) -> "ArchitectureConfig":
        if variant not in VARIANTS:
            raise ConfigError(f"unknown architecture '{variant}', expected one of {', '.join(VARIANTS)}")
        core, _, att = variant.partition("-")
        return cls(core=core, attention=bool(att), **overrides)

    @property
    def variant(self) -> str:
        return self.core + ("-att" if self.attention else "")

    @property
    def attention_spec(self) -> nn.AttentionSpec:
        return nn.AttentionSpec(self.num_queries, self.key_dim, self.value_dim)


# -------------------------------------------------------------------------
# Prior-relative encodings
# -------------------------------------------------------------------------

def prior_location_scale(d: Distribution) -> tuple:
    if isinstance(d, Normal):
        return d.mean, d.std
    if isinstance(d, Uniform):
        return 0.5 * (d.low + d.high), 0.5 * (d.high - d.low)
    if isinstance(d, Bernoulli):
        return 0.5, 0.5
    if isinstance(d, MixtureNormalUniform):
        return d.mean, d.std
    return d.expected_value, math.sqrt(d.variance)


def value_features(d: Distribution, x: float) -> np.ndarray:
    """Two scale-free features of a sampled value, measured against its prior."""
    if isinstance(d, MixtureNormalUniform):
        u = d.uniform_component
        mid, half = u.expected_value, 0.5 * (u.high - u.low)
        return np.array([math.tanh((x - d.mean) / (4.0 * d.std)), (x - mid) / half])
    loc, scale = prior_location_scale(d)
    return np.array([(x - loc) / scale, 0.0])


def _normal_log_prob(x: float, mean: Tensor, std: Tensor) -> Tensor:
    z = (x - mean) / std
    return -0.5 * z * z - nn.log(std) - HALF_LOG_TWO_PI


def _decode_std(raw: Tensor, scale) -> Tensor:
    return (nn.softplus(raw + SOFTPLUS_ONE) + STD_FLOOR) * scale


@dataclass
class NormalProposal:
    mean: Tensor
    std: Tensor

    def log_prob(self, x: float) -> Tensor:
        return _normal_log_prob(x, self.mean, self.std)

    def to_distribution(self) -> Normal:
        return Normal(self.mean.item(), self.std.item())


@dataclass
class BernoulliProposal:
    logit: Tensor

    def log_prob(self, x: float) -> Tensor:
        return nn.log_sigmoid(self.logit) if x == 1.0 else nn.log_sigmoid(-self.logit)

    def to_distribution(self) -> Bernoulli:
        return Bernoulli(float(expit(self.logit.item())))


@dataclass
class MixtureProposal:
    logits: Tensor
    means: Tensor
    stds: Tensor

    def log_prob(self, x: float) -> Tensor:
        return nn.logsumexp(nn.log_softmax(self.logits) + _normal_log_prob(x, self.means, self.stds))

    def to_distribution(self) -> MixtureOfNormals:
        weights = _softmax(self.logits.data)
        return MixtureOfNormals(tuple(weights / weights.sum()), tuple(self.means.data), tuple(self.stds.data))


ProposalParams = NormalProposal | BernoulliProposal | MixtureProposal


def proposal_width(d: Distribution, arch: ArchitectureConfig) -> int:
    """Number of raw network outputs needed to parameterise the proposal for prior d."""
    if isinstance(d, Bernoulli):
        return 1
    if isinstance(d, (Uniform, MixtureNormalUniform)):
        return 6
    if arch.normal_proposal == "mixture" or isinstance(d, MixtureOfNormals):
        return 3 * arch.mixture_components
    return 2


def decode_proposal(d: Distribution, raw: Tensor, arch: ArchitectureConfig) -> ProposalParams:
    """Turn raw outputs into proposal parameters placed relative to the prior.

    A zero raw vector decodes to a proposal close to the prior itself.
    """
    if isinstance(d, Bernoulli):
        p = min(max(d.p, BERNOULLI_CLIP), 1.0 - BERNOULLI_CLIP)
        return BernoulliProposal(raw[0] + float(_logit(p)))

    if isinstance(d, (Uniform, MixtureNormalUniform)):
        if isinstance(d, Uniform):
            mid, half = 0.5 * (d.low + d.high), 0.5 * (d.high - d.low)
            locs = np.array([mid - 0.5 * half, mid + 0.5 * half])
            scales = np.array([0.5 * half, 0.5 * half])
            base = np.log([0.5, 0.5])
        else:
            u = d.uniform_component
            mid, half = u.expected_value, 0.5 * (u.high - u.low)
            locs = np.array([d.mean, mid])
            scales = np.array([d.std, 0.5 * half])
            base = np.log([d.weight_normal, 1.0 - d.weight_normal]) if 0.0 < d.weight_normal < 1.0 else np.zeros(2)
        return MixtureProposal(
            logits=raw[0:2] + base,
            means=raw[2:4] * scales + locs,
            stds=_decode_std(raw[4:6], scales),
        )

    loc, scale = prior_location_scale(d)
    if arch.normal_proposal == "mixture" or isinstance(d, MixtureOfNormals):
        k = arch.mixture_components
        offsets = np.linspace(-1.0, 1.0, k)
        return MixtureProposal(
            logits=raw[0:k],
            means=(raw[k:2 * k] + offsets) * scale + loc,
            stds=_decode_std(raw[2 * k:3 * k], scale),
        )
    return NormalProposal(mean=raw[0] * scale + loc, std=_decode_std(raw[1], scale))


# -------------------------------------------------------------------------
# Embedder registry
# -------------------------------------------------------------------------

def registry_key(address: str, instance: int) -> str:
    return f"{address}#{instance}"


class SiteEmbedders(nn.Module):
    """Everything the network owns for one (address, instance) pair."""

    def __init__(self, site: Site, arch: ArchitectureConfig, proposal_in: int, rng: np.random.Generator):
        self.address = site.address
        self.instance = site.instance
        self.family = site.family
        self.site_embedding = nn.parameter(rng.normal(0.0, 0.1, arch.site_embed_dim))
        self.sample_embedder = nn.Dense(2, arch.sample_embed_dim, rng)
        self.proposal_layer = nn.MLP([proposal_in, arch.proposal_hidden_dim, proposal_width(site.dist, arch)], rng)
        self.key_embedder = self.value_embedder = self.query_embedder = None
        if arch.attention:
            self.key_embedder = nn.Dense(arch.sample_embed_dim, arch.key_dim, rng)
            self.value_embedder = nn.Dense(arch.sample_embed_dim, arch.value_dim, rng)
            self.query_embedder = nn.MLP(
                [arch.obs_embed_dim, arch.query_hidden_dim, arch.num_queries * arch.key_dim], rng
            )

    @property
    def key(self) -> str:
        return registry_key(self.address, self.instance)

    def named_parameters(self):
        params = [("site_embedding", self.site_embedding)]
        parts = [("sample", self.sample_embedder), ("proposal", self.proposal_layer),
                 ("key", self.key_embedder), ("value", self.value_embedder), ("query", self.query_embedder)]
        for prefix, module in parts:
            if module is not None:
                params += [(f"{prefix}.{n}", p) for n, p in module.named_parameters()]
        return params


class EmbedderRegistry:
    """Lazily grown map (address, instance) -> SiteEmbedders, plus one embedding per distribution family.

    Entries are initialised from (seed, key) so their starting values do not
    depend on the order in which sites are first met.
    """

    def __init__(self, arch: ArchitectureConfig, proposal_in: int, seed: int):
        self.arch = arch
        self.proposal_in = proposal_in
        self.seed = seed
        self._entries = {}
        self._families = {}
        self._lock = threading.Lock()

    def __len__(self):
        return len(self._entries)

    def __contains__(self, key) -> bool:
        return registry_key(*key) in self._entries if isinstance(key, tuple) else key in self._entries

    def _rng_for(self, name: str) -> np.random.Generator:
        return np.random.default_rng([self.seed, zlib.crc32(name.encode("utf-8"))])

    def keys(self) -> list:
        return list(self._entries)

    def entries(self) -> list:
        return list(self._entries.values())

    def lookup(self, site: Site) -> Optional[SiteEmbedders]:
        entry = self._entries.get(registry_key(site.address, site.instance))
        if entry is not None and entry.family != site.family:
            raise AddressingError(
                f"site {entry.key} was compiled for '{entry.family}' but the model now draws '{site.family}'"
            )
        return entry

    def get_or_create(self, site: Site) -> SiteEmbedders:
        entry = self.lookup(site)
        if entry is not None:
            return entry
        with self._lock:
            key = registry_key(site.address, site.instance)
            if key not in self._entries:
                self._entries[key] = SiteEmbedders(site, self.arch, self.proposal_in, self._rng_for(key))
                logger.debug("registry grew to %d sites with %s (%s)", len(self._entries), key, site.family)
            self.family_embedding(site.family, create=True)
            return self._entries[key]

    def family_embedding(self, family: str, create: bool = False) -> Optional[Tensor]:
        emb = self._families.get(family)
        if emb is None and create:
            emb = nn.parameter(self._rng_for("family:" + family).normal(0.0, 0.1, self.arch.site_embed_dim))
            self._families[family] = emb
        return emb

    def families(self) -> list:
        return list(self._families)

    def named_parameters(self):
        params = [(f"family/{fam}", emb) for fam, emb in self._families.items()]
        for key, entry in self._entries.items():
            params += [(f"site/{key}/{n}", p) for n, p in entry.named_parameters()]
        return params


# -------------------------------------------------------------------------
# Per-trace proposal state
# -------------------------------------------------------------------------

@dataclass
class AttentionRecord:
    """Weights used when proposing one site, over the sites sampled before it."""

    site: tuple
    attended: tuple
    weights: np.ndarray


class ProposalSession:
    """Proposal state carried through one trace: observe embedding, attention memory, LSTM state."""

    def __init__(self, net: "InferenceNetwork", observed, grow: bool = False, record: bool = False):
        self.net = net
        self.grow = grow
        self.arch = net.arch
        # guided runs only need values, so they build no gradient graph
        self._recording = contextlib.nullcontext if record else nn.no_grad
        with self._recording():
            self.obs_embedding = net.embed_observations(observed)
        self.keys = []
        self.values = []
        self.attended = []
        self.attention_log = []
        arch = net.arch
        self.lstm_state = net.lstm.initial_state() if net.lstm is not None else None
        self.prev_sample = Tensor(np.zeros(arch.sample_embed_dim))
        self.prev_site = Tensor(np.zeros(arch.site_embed_dim))
        self.prev_family = Tensor(np.zeros(arch.site_embed_dim))

    def _entry(self, site: Site) -> Optional[SiteEmbedders]:
        registry = self.net.registry
        return registry.get_or_create(site) if self.grow else registry.lookup(site)

    def _attend(self, entry: SiteEmbedders, site: Site) -> Tensor:
        spec = self.arch.attention_spec
        if not self.keys:
            return Tensor(np.zeros(spec.output_dim))
        queries = entry.query_embedder(self.obs_embedding).reshape(spec.num_queries, spec.key_dim)
        output, weights = nn.attention(queries, nn.stack(self.keys), nn.stack(self.values), spec.scale)
        self.attention_log.append(AttentionRecord(site.key, tuple(self.attended), weights))
        return output

    def propose(self, site: Site) -> Optional[ProposalParams]:
        """Proposal parameters for site, or None when the network has never seen it."""
        entry = self._entry(site)
        if entry is None:
            return None
        parts = [self.obs_embedding]
        if self.lstm_state is not None:
            family = self.net.registry.family_embedding(site.family)
            parts += [self.prev_sample, entry.site_embedding, family, self.prev_site, self.prev_family]
        if self.arch.attention:
            parts.append(self._attend(entry, site))
        features = nn.concat(parts) if len(parts) > 1 else parts[0]
        if self.lstm_state is not None:
            features, self.lstm_state = nn.lstm_step(features, self.lstm_state, self.net.lstm)
        return decode_proposal(site.dist, entry.proposal_layer(features), self.arch)

    def proposal_for(self, site: Site) -> Optional[Distribution]:
        with nn.no_grad():
            params = self.propose(site)
        return None if params is None else params.to_distribution()

    def register_sampled_value(self, site: Site, value: float) -> None:
        entry = self.net.registry.lookup(site)
        if entry is None:
            # unseen sites leave no key or value behind
            return
        with self._recording():
            embedding = nn.relu(entry.sample_embedder(Tensor(value_features(site.dist, value))))
            if self.arch.attention:
                self.keys.append(entry.key_embedder(embedding))
                self.values.append(entry.value_embedder(embedding))
                self.attended.append(site.key)
        self.prev_sample = embedding
        self.prev_site = entry.site_embedding
        self.prev_family = self.net.registry.family_embedding(site.family)


# -------------------------------------------------------------------------
# Network
# -------------------------------------------------------------------------

class InferenceNetwork:
    """
    Compiled proposal network for one model.

    Args:
        arch: ArchitectureConfig describing the variant and widths.
        obs_dim: The model's fixed number of observations.
        seed: Seed for all parameter initialisation.
        obs_mean, obs_std: Per-dimension standardisation of observation vectors.
        model_name: Name of the model the network is compiled for.
    """

    def __init__(self, arch: ArchitectureConfig, obs_dim: int, seed: int = 0,
                 obs_mean=None, obs_std=None, model_name: str = ""):
        if obs_dim < 1:
            raise ModelContractError("a model needs at least one observation to be compiled")
        self.arch = arch
        self.obs_dim = obs_dim
        self.seed = seed
        self.model_name = model_name
        self.obs_mean = np.zeros(obs_dim) if obs_mean is None else np.asarray(obs_mean, dtype=np.float64)
        std = np.ones(obs_dim) if obs_std is None else np.asarray(obs_std, dtype=np.float64)
        self.obs_std = np.where(std > 1e-12, std, 1.0)

        rng = np.random.default_rng(seed)
        self.obs_embedder = nn.MLP([obs_dim, arch.obs_hidden_dim, arch.obs_hidden_dim, arch.obs_embed_dim], rng)
        attention_dim = arch.attention_spec.output_dim if arch.attention else 0
        if arch.core == "lstm":
            lstm_in = arch.obs_embed_dim + arch.sample_embed_dim + 4 * arch.site_embed_dim + attention_dim
            self.lstm = nn.LSTMCell(lstm_in, arch.lstm_hidden_dim, rng)
            proposal_in = arch.lstm_hidden_dim
        else:
            self.lstm = None
            proposal_in = arch.obs_embed_dim + attention_dim
        self.registry = EmbedderRegistry(arch, proposal_in, seed)

    @classmethod
    def for_program(cls, program, arch: ArchitectureConfig, seed: int = 0, pilot_traces: int = 1000,
                    rng: Optional[np.random.Generator] = None) -> "InferenceNetwork":
        """Create a network with observation standardisation estimated from prior traces."""
        rng = rng if rng is not None else np.random.default_rng([seed, 2])
        obs_mean = obs_std = None
        if pilot_traces > 1:
            ys = np.array([run_model(program, PriorSample(), rng).observed_values for _ in range(pilot_traces)])
            obs_mean, obs_std = ys.mean(axis=0), ys.std(axis=0)
        return cls(arch, program.num_observations, seed, obs_mean, obs_std, program.name)

    @property
    def uses_attention(self) -> bool:
        return self.arch.attention

    def embed_observations(self, y) -> Tensor:
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        if y.size != self.obs_dim:
            raise ModelContractError(f"expected {self.obs_dim} observed values, got {y.size}")
        return nn.relu(self.obs_embedder(Tensor((y - self.obs_mean) / self.obs_std)))

    def start_session(self, observed, grow: bool = False, record: bool = False) -> ProposalSession:
        return ProposalSession(self, observed, grow, record)

    def trace_log_q(self, trace: Trace, grow: bool = True) -> Tensor:
        """Sum over latents of log q(x_t | eta_t), rebuilding the proposal state along the trace.

        Sites without registry entries (when grow is False) contribute their prior log density.
        """
        session = self.start_session(trace.observed_values, grow, record=True)
        total = Tensor(0.0)
        for entry in trace.entries:
            site = Site(entry.address, entry.instance, entry.dist)
            params = session.propose(site)
            total = total + (entry.log_prob if params is None else params.log_prob(entry.value))
            session.register_sampled_value(site, entry.value)
        return total

    def attention_weights(self, trace: Trace) -> list:
        """Replay trace through a fresh session and return its AttentionRecords."""
        if not self.arch.attention:
            raise ConfigError(f"architecture '{self.arch.variant}' has no attention")
        session = self.start_session(trace.observed_values)
        with nn.no_grad():
            for entry in trace.entries:
                site = Site(entry.address, entry.instance, entry.dist)
                session.propose(site)
                session.register_sampled_value(site, entry.value)
        return session.attention_log

    def unknown_sites(self, traces) -> list:
        """Sites visited by traces that the registry has no entries for, in first-seen order."""
        missing = {}
        for trace in traces:
            for e in trace.entries:
                key = registry_key(e.address, e.instance)
                if key not in self.registry:
                    missing.setdefault(key, None)
        return list(missing)

    def named_parameters(self) -> list:
        params = [(f"obs_embed.{n}", p) for n, p in self.obs_embedder.named_parameters()]
        if self.lstm is not None:
            params += [(f"lstm.{n}", p) for n, p in self.lstm.named_parameters()]
        return params + self.registry.named_parameters()

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        nn.zero_grad(self.parameters())

    # checkpoints

    def metadata(self) -> dict:
        return {
            "model_name": self.model_name,
            "arch": self.arch.model_dump(),
            "obs_dim": self.obs_dim,
            "obs_mean": self.obs_mean.tolist(),
            "obs_std": self.obs_std.tolist(),
            "seed": self.seed,
            "families": self.registry.families(),
            "registry": [
                {"key": e.key, "address": e.address, "instance": e.instance, "family": e.family}
                for e in self.registry.entries()
            ],
        }

    def state_arrays(self) -> dict:
        return {name: p.data for name, p in self.named_parameters()}

    def save(self, path: str, extra_arrays: Optional[dict] = None, extra_metadata: Optional[dict] = None) -> None:
        arrays = self.state_arrays()
        arrays.update(extra_arrays or {})
        meta = self.metadata()
        meta.update(extra_metadata or {})
        nn.save_checkpoint(path, arrays, meta)
        logger.info("checkpoint written to %s (%d sites)", path, len(self.registry))

    @classmethod
    def from_state(cls, arrays: dict, meta: dict) -> "InferenceNetwork":
        arch = ArchitectureConfig(**meta["arch"])
        net = cls(arch, meta["obs_dim"], meta["seed"], meta["obs_mean"], meta["obs_std"], meta["model_name"])
        for fam in meta["families"]:
            net.registry.family_embedding(fam, create=True)
        for record in meta["registry"]:
            net.registry.get_or_create(Site(record["address"], record["instance"], _placeholder(record["family"])))

        expected = dict(net.named_parameters())
        missing = [name for name in expected if name not in arrays]
        if missing:
            raise CheckpointMismatchError(f"checkpoint lacks parameters: {', '.join(missing[:5])}")
        for name, p in expected.items():
            if arrays[name].shape != p.shape:
                raise CheckpointMismatchError(f"parameter '{name}' has shape {arrays[name].shape}, expected {p.shape}")
            p.data[...] = arrays[name]
        return net

    @classmethod
    def load(cls, path: str) -> "InferenceNetwork":
        arrays, meta = nn.load_checkpoint(path)
        return cls.from_state(arrays, meta)


# stand-in priors used only to rebuild registry entries of the right width
_PLACEHOLDERS = {
    "normal": Normal(0.0, 1.0),
    "uniform": Uniform(0.0, 1.0),
    "bernoulli": Bernoulli(0.5),
    "mixture_normal_uniform": MixtureNormalUniform(0.5, 0.5, 0.1, 0.0, 1.0),
    "mixture_of_normals": MixtureOfNormals((0.5, 0.5), (0.0, 1.0), (1.0, 1.0)),
}


def _placeholder(family: str) -> Distribution:
    if family not in _PLACEHOLDERS:
        raise CheckpointMismatchError(f"checkpoint names unknown distribution family '{family}'")
    return _PLACEHOLDERS[family]


def embed_observations(y, net: InferenceNetwork) -> Tensor:
    return net.embed_observations(y)


def propose(site: Site, context: ProposalSession, net: InferenceNetwork = None) -> Optional[ProposalParams]:
    return context.propose(site)


def register_sampled_value(x: float, site: Site, net: InferenceNetwork, context: ProposalSession) -> ProposalSession:
    context.register_sampled_value(site, x)
    return context


def trace_log_q(trace: Trace, y, net: InferenceNetwork, grow: bool = True) -> Tensor:
    if y is not None:
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        if y.size != len(trace.observations):
            raise ModelContractError(f"trace has {len(trace.observations)} observations, got {y.size} values")
        # condition on the supplied y rather than the trace's own observations
        trace = Trace(trace.entries, [_with_value(o, v) for o, v in zip(trace.observations, y)],
                      trace.log_weight, trace.result)
    return net.trace_log_q(trace, grow)


def _with_value(observation, value):
    return replace(observation, value=float(value))
