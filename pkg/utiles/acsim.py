# Small-signal AC circuit simulation by modified nodal analysis (complex admittances).
import logging
import math
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from utiles.errors import NetlistError

logger = logging.getLogger(__name__)

GROUND = "0"
COMPONENT_KINDS = ("R", "C", "L", "V", "S")
SHORT_ADMITTANCE = 1e9
# shunt from every node to ground, added only when the system is singular
GMIN = 1e-12
SINGULAR_COND = 1e15


@dataclass(frozen=True)
class Component:
    """One two-terminal element. kind S is a short (active when connected); V is a 1-port AC source."""

    kind: str
    name: str
    node_a: str
    node_b: str
    value: float = 0.0
    connected: bool = True

    def __post_init__(self):
        if self.kind not in COMPONENT_KINDS:
            raise NetlistError(f"{self.name}: unknown component kind '{self.kind}'")
        if self.node_a == self.node_b:
            raise NetlistError(f"{self.name}: both terminals on node '{self.node_a}'")
        if self.kind in ("R", "C", "L") and not (math.isfinite(self.value) and self.value > 0):
            raise NetlistError(f"{self.name}: {self.kind} value must be positive and finite, got {self.value}")


@dataclass(frozen=True)
class Netlist:
    components: tuple
    ground: str = GROUND

    def __post_init__(self):
        object.__setattr__(self, "components", tuple(self.components))
        names = [c.name for c in self.components]
        if len(set(names)) != len(names):
            raise NetlistError("component names must be unique")
        if not any(c.kind == "V" for c in self.components):
            raise NetlistError("netlist has no source")
        stranded = self.unreachable_nodes()
        if stranded:
            raise NetlistError(f"nodes not connected to the source: {', '.join(stranded)}")

    def unreachable_nodes(self) -> list:
        """Nodes with no path to the source through any element, connected or not."""
        adjacency = {}
        for c in self.components:
            adjacency.setdefault(c.node_a, []).append(c.node_b)
            adjacency.setdefault(c.node_b, []).append(c.node_a)
        start = next(c for c in self.components if c.kind == "V").node_a
        seen, queue = {start}, deque([start])
        while queue:
            for n in adjacency[queue.popleft()]:
                if n not in seen:
                    seen.add(n)
                    queue.append(n)
        return [n for n in adjacency if n not in seen]

    @property
    def nodes(self) -> tuple:
        """Non-ground nodes in order of first appearance."""
        seen = {}
        for c in self.components:
            for n in (c.node_a, c.node_b):
                if n != self.ground:
                    seen.setdefault(n, None)
        return tuple(seen)

    def component(self, name: str) -> Component:
        for c in self.components:
            if c.name == name:
                return c
        raise KeyError(name)

    def replace(self, name: str, **changes) -> "Netlist":
        if name not in {c.name for c in self.components}:
            raise KeyError(name)
        return Netlist(tuple(replace(c, **changes) if c.name == name else c for c in self.components), self.ground)

    def to_text(self) -> str:
        lines = ["# kind name node_a node_b value connected"]
        for c in self.components:
            lines.append(f"{c.kind} {c.name} {c.node_a} {c.node_b} {c.value!r} {int(c.connected)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Netlist":
        components = []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 6 or parts[5] not in ("0", "1"):
                raise NetlistError(f"line {lineno}: expected 'kind name node_a node_b value connected'")
            kind, name, a, b, value, connected = parts
            try:
                value = float(value)
            except ValueError as exc:
                raise NetlistError(f"line {lineno}: bad value '{value}'") from exc
            components.append(Component(kind, name, a, b, value, connected == "1"))
        return cls(tuple(components))


@dataclass
class FrequencyResponse:
    freqs: np.ndarray
    vout: np.ndarray
    regularized_points: int = 0

    def __post_init__(self):
        if len(self.freqs) != len(self.vout):
            raise ValueError("freqs and vout must be aligned")

    @property
    def magnitude_db(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return 20.0 * np.log10(np.abs(self.vout))

    def to_rows(self) -> list:
        return [[repr(float(f)), repr(float(v.real)), repr(float(v.imag))] for f, v in zip(self.freqs, self.vout)]

    @classmethod
    def from_rows(cls, rows) -> "FrequencyResponse":
        data = np.array([[float(x) for x in row] for row in rows], dtype=np.float64)
        return cls(data[:, 0], data[:, 1] + 1j * data[:, 2])

    def as_observations(self) -> np.ndarray:
        """Interleaved [re_0, im_0, re_1, im_1, ...] vector."""
        return np.column_stack([self.vout.real, self.vout.imag]).reshape(-1)


def log_spaced_freqs(f_min: float = 1e3, f_max: float = 1e5, count: int = 40) -> np.ndarray:
    return np.logspace(math.log10(f_min), math.log10(f_max), count)


def _admittance(c: Component, omegas: np.ndarray) -> np.ndarray:
    if c.kind == "R":
        return np.full(omegas.shape, 1.0 / c.value, dtype=np.complex128)
    if c.kind == "C":
        return 1j * omegas * c.value
    if c.kind == "L":
        return 1.0 / (1j * omegas * c.value)
    return np.full(omegas.shape, SHORT_ADMITTANCE, dtype=np.complex128)


def _assemble(net: Netlist, omegas: np.ndarray):
    index = {n: i for i, n in enumerate(net.nodes)}
    sources = [c for c in net.components if c.kind == "V" and c.connected]
    n = len(index)
    size = n + len(sources)
    A = np.zeros((len(omegas), size, size), dtype=np.complex128)
    b = np.zeros((len(omegas), size), dtype=np.complex128)

    for c in net.components:
        if not c.connected or c.kind == "V":
            continue
        y = _admittance(c, omegas)
        ia, ib = index.get(c.node_a), index.get(c.node_b)
        if ia is not None:
            A[:, ia, ia] += y
        if ib is not None:
            A[:, ib, ib] += y
        if ia is not None and ib is not None:
            A[:, ia, ib] -= y
            A[:, ib, ia] -= y

    for k, src in enumerate(sources):
        row = n + k
        for node, sign in ((src.node_a, 1.0), (src.node_b, -1.0)):
            i = index.get(node)
            if i is not None:
                A[:, i, row] += sign
                A[:, row, i] += sign
        b[:, row] = src.value
    return A, b, n


def _solve(net: Netlist, freqs: np.ndarray):
    freqs = np.asarray(freqs, dtype=np.float64).reshape(-1)
    if np.any(freqs <= 0):
        raise ValueError("AC analysis needs positive frequencies")
    A, b, n = _assemble(net, 2.0 * math.pi * freqs)
    with np.errstate(divide="ignore", invalid="ignore"):
        singular = ~(np.linalg.cond(A) < SINGULAR_COND)
    if np.any(singular):
        A[np.ix_(singular, range(n), range(n))] += np.eye(n) * GMIN
        logger.debug("regularised %d of %d frequency points with a %.0e S shunt", int(singular.sum()), len(freqs), GMIN)
    try:
        x = np.linalg.solve(A, b[..., None])[..., 0]
    except np.linalg.LinAlgError:
        A[:, range(n), range(n)] += GMIN
        x = np.linalg.solve(A, b[..., None])[..., 0]
        singular[:] = True
    return x[:, :n], int(singular.sum())


def ac_solve(net: Netlist, freq: float) -> np.ndarray:
    """Complex node voltages at freq, ordered as net.nodes."""
    voltages, _ = _solve(net, np.array([freq]))
    return voltages[0]


def frequency_sweep(net: Netlist, freqs, out_node: str) -> FrequencyResponse:
    """Voltage at out_node for every frequency in freqs."""
    if out_node not in net.nodes:
        raise NetlistError(f"output node '{out_node}' is not in the netlist")
    voltages, regularized = _solve(net, freqs)
    return FrequencyResponse(np.asarray(freqs, dtype=np.float64).copy(), voltages[:, net.nodes.index(out_node)].copy(),
                             regularized)


def butterworth_prototype(order: int) -> np.ndarray:
    """Normalised low-pass Butterworth element values g_1..g_n for equal terminations."""
    k = np.arange(1, order + 1)
    return 2.0 * np.sin((2 * k - 1) * math.pi / (2 * order))


@dataclass(frozen=True)
class LadderDesign:
    netlist: Netlist
    center_hz: float
    bandwidth_hz: float
    r0: float
    shorts: tuple = field(default=())


def butterworth_bandpass(center_hz: float = 1e4, bandwidth_hz: float = 5e3, r0: float = 1e3,
                         order: int = 5, amplitude: float = 1.0) -> LadderDesign:
    """Doubly terminated band-pass ladder: odd stages are series LC, even stages shunt LC.

    Every shunt stage also gets a short to ground (component kind S), nominally disconnected.
    The output node is "out"; with equal source and load resistors the mid-band gain is 0.5.
    """
    if order < 1:
        raise NetlistError("filter order must be at least 1")
    w0 = 2.0 * math.pi * center_hz
    bw = 2.0 * math.pi * bandwidth_hz
    g = butterworth_prototype(order)

    comps = [Component("V", "V1", "in", GROUND, amplitude), Component("R", "Rs", "in", "n1", r0)]
    node = "n1"
    shorts = []
    for k, gk in enumerate(g, 1):
        last = k == order
        if k % 2:
            mid = f"n{k}a"
            nxt = "out" if last else f"n{k + 1}"
            comps.append(Component("L", f"L{k}", node, mid, gk * r0 / bw))
            comps.append(Component("C", f"C{k}", mid, nxt, bw / (w0 * w0 * gk * r0)))
            node = nxt
        else:
            comps.append(Component("L", f"L{k}", node, GROUND, bw * r0 / (w0 * w0 * gk)))
            comps.append(Component("C", f"C{k}", node, GROUND, gk / (bw * r0)))
            comps.append(Component("S", f"S{k}", node, GROUND, 0.0, connected=False))
            shorts.append(f"S{k}")
            if last:
                # even order ends on a shunt stage; the load sits on the same node
                node = _rename_last(comps, node, "out")
    comps.append(Component("R", "RL", node, GROUND, r0))
    return LadderDesign(Netlist(tuple(comps)), center_hz, bandwidth_hz, r0, tuple(shorts))


def _rename_last(comps: list, old: str, new: str) -> str:
    for i, c in enumerate(comps):
        comps[i] = replace(c, node_a=new if c.node_a == old else c.node_a, node_b=new if c.node_b == old else c.node_b)
    return new
