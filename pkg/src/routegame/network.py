"""Road network data model, config ingestion, and physical-consistency checks.

A network is a directed graph of nodes and links.  Real links carry the
physical parameters used by the discrete-time loading models (length,
free-flow speed, backward wave speed, flow capacity, jam density).  Dummy
links attach virtual source/sink nodes to the real network: vehicles wait
on a dummy origin link before being released, and rest on a dummy sink
link after reaching their destination.  Links may instead carry an
occupancy-based latency (constant plus a per-vehicle slope), which is what
the unconstrained ``latency`` environment uses.

Everything here is immutable after loading and safe to share across
concurrently running episodes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

try:
    import tomllib  # py >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

NodeId = int
LinkId = int

MODELS = ("pq", "sq", "ctm", "ltm", "latency")


class ConfigError(ValueError):
    """Raised when a config cannot be parsed or fails validation."""


@dataclass(frozen=True)
class CapacitySchedule:
    """Piecewise-constant flow capacity in vehicles per step.

    ``steps[i]`` is the first step at which ``rates[i]`` applies;
    ``steps[0]`` is always 0.  A scalar capacity is a one-piece schedule.
    """

    steps: tuple[int, ...] = (0,)
    rates: tuple[float, ...] = (math.inf,)

    def __post_init__(self):
        if len(self.steps) != len(self.rates) or not self.steps or self.steps[0] != 0:
            raise ConfigError(f"malformed capacity schedule: {self.steps} / {self.rates}")
        if any(b <= a for a, b in zip(self.steps, self.steps[1:])):
            raise ConfigError("capacity schedule steps must strictly increase")
        if any(r < 0 for r in self.rates):
            raise ConfigError("capacity rates must be nonnegative")

    @classmethod
    def constant(cls, rate: float) -> "CapacitySchedule":
        return cls((0,), (float(rate),))

    def rate_at(self, t: int) -> float:
        r = self.rates[0]
        for s, rr in zip(self.steps, self.rates):
            if t >= s:
                r = rr
            else:
                break
        return r

    def max_rate(self) -> float:
        return max(self.rates)

    def is_constant(self) -> bool:
        return len(self.rates) == 1


@dataclass(frozen=True)
class Latency:
    """Occupancy-based traversal time: ``const + per_vehicle * x`` steps,
    where x is the number of vehicles on the link right after entry."""

    const: float = 0.0
    per_vehicle: float = 0.0

    def steps_for(self, occupancy: int) -> int:
        return int(round(self.const + self.per_vehicle * occupancy))


@dataclass(frozen=True)
class Link:
    """One directed link with its physical parameters.

    ``capacity_side`` controls whether a time-varying capacity schedule
    caps both boundary flows ("both", the default) or only the downstream
    sending flow ("sending", modelling an incident at the link exit that
    does not prevent vehicles from entering upstream).
    """

    id: LinkId
    tail: NodeId
    head: NodeId
    length: float = math.inf
    free_flow_speed: float = 1.0
    backward_speed: Optional[float] = None
    capacity: CapacitySchedule = field(default_factory=CapacitySchedule)
    jam_density: Optional[float] = None
    is_dummy: bool = False
    capacity_side: str = "both"
    latency: Optional[Latency] = None

    def traversal_steps(self, dt: float = 1.0) -> int:
        """Free-flow traversal time in whole steps (0 for dummy links)."""
        if self.is_dummy:
            return 0
        return int(round(self.length / (self.free_flow_speed * dt)))

    def backward_steps(self, dt: float = 1.0) -> int:
        if self.backward_speed is None:
            raise ValueError(f"link {self.id} has no backward speed")
        return int(round(self.length / (self.backward_speed * dt)))

    def storage(self) -> float:
        """Maximum number of vehicles the link can hold (kj * L)."""
        if self.is_dummy or self.jam_density is None:
            return math.inf
        return self.jam_density * self.length

    def effective_latency(self) -> Latency:
        if self.latency is not None:
            return self.latency
        return Latency(const=float(self.traversal_steps()), per_vehicle=0.0)


@dataclass(frozen=True)
class DemandEntry:
    time: int
    origin: NodeId
    destination: NodeId
    count: int
    group: int
    route: Optional[tuple[LinkId, ...]] = None  # scripted background traffic


@dataclass(frozen=True)
class DemandProfile:
    entries: tuple[DemandEntry, ...]

    def total_count(self) -> int:
        return sum(e.count for e in self.entries)

    def controllable_count(self) -> int:
        return sum(e.count for e in self.entries if e.route is None)

    def groups(self) -> tuple[int, ...]:
        return tuple(sorted({e.group for e in self.entries if e.route is None}))


@dataclass(frozen=True)
class ExperimentSpec:
    """Contents of the [experiment] config section."""

    dt: float = 1.0
    horizon: int = 100
    model: str = "ltm"
    seed: int = 0
    training: Mapping[str, object] = field(default_factory=dict)
    baseline: Mapping[str, object] = field(default_factory=dict)


class Network:
    """Immutable directed network with per-node link orderings.

    Outbound links are kept in ascending id order; inbound links in the
    node's discharge priority order (config-supplied, else ascending id).
    """

    def __init__(self, nodes: Iterable[NodeId], links: Iterable[Link],
                 priority: Optional[Mapping[NodeId, Sequence[LinkId]]] = None):
        self.nodes: tuple[NodeId, ...] = tuple(sorted(set(nodes)))
        self.links: dict[LinkId, Link] = {}
        for link in links:
            if link.id in self.links:
                raise ConfigError(f"duplicate link id {link.id}")
            self.links[link.id] = link
        self._out: dict[NodeId, tuple[LinkId, ...]] = {n: () for n in self.nodes}
        self._in: dict[NodeId, tuple[LinkId, ...]] = {n: () for n in self.nodes}
        for link in self.links.values():
            for end in (link.tail, link.head):
                if end not in self._out:
                    raise ConfigError(f"link {link.id} references undeclared node {end}")
        for lid in sorted(self.links):
            link = self.links[lid]
            self._out[link.tail] = self._out[link.tail] + (lid,)
            self._in[link.head] = self._in[link.head] + (lid,)
        if priority:
            for node, order in priority.items():
                if node not in self._in:
                    raise ConfigError(f"priority given for unknown node {node}")
                if sorted(order) != sorted(self._in[node]):
                    raise ConfigError(
                        f"priority order for node {node} must permute its inbound links "
                        f"{sorted(self._in[node])}, got {list(order)}")
                self._in[node] = tuple(order)
        self._priority_overrides = {n: tuple(o) for n, o in (priority or {}).items()}

        # Origin dummies have a source tail; sink dummies a terminal head.
        self.origin_links: dict[NodeId, LinkId] = {}
        self.sink_links: dict[NodeId, LinkId] = {}
        for lid, link in sorted(self.links.items()):
            if not link.is_dummy:
                continue
            if not self._in[link.tail]:
                if link.head in self.origin_links:
                    raise ConfigError(
                        f"origin node {link.head} has more than one dummy origin link")
                self.origin_links[link.head] = lid
            elif not self._out[link.head]:
                self.sink_links[link.tail] = lid
            else:
                raise ConfigError(
                    f"dummy link {lid} is neither a source nor a sink attachment")

    # -- queries ---------------------------------------------------------

    def outbound_links(self, node: NodeId) -> tuple[LinkId, ...]:
        """All outbound link ids of ``node`` in ascending order."""
        if node not in self._out:
            raise KeyError(f"unknown node {node}")
        return self._out[node]

    def inbound_links(self, node: NodeId) -> tuple[LinkId, ...]:
        """Inbound link ids of ``node`` in discharge-priority order."""
        if node not in self._in:
            raise KeyError(f"unknown node {node}")
        return self._in[node]

    def actions(self, node: NodeId) -> tuple[LinkId, ...]:
        """Outbound links an agent may choose: everything but dummy links."""
        return tuple(l for l in self.outbound_links(node)
                     if not self.links[l].is_dummy)

    def max_out_degree(self) -> int:
        return max((len(self.actions(n)) for n in self.nodes), default=0)

    def is_destination(self, node: NodeId) -> bool:
        """True when vehicles terminate at ``node``: it has a sink dummy
        attached or no non-dummy way out."""
        return node in self.sink_links or not self.actions(node)

    def real_links(self) -> tuple[LinkId, ...]:
        return tuple(l for l in sorted(self.links) if not self.links[l].is_dummy)


# -- loading ---------------------------------------------------------------


def _as_schedule(value, lid) -> CapacitySchedule:
    if value is None:
        return CapacitySchedule()
    if isinstance(value, (int, float)):
        return CapacitySchedule.constant(value)
    if isinstance(value, list):
        try:
            steps = tuple(int(p[0]) for p in value)
            rates = tuple(float(p[1]) for p in value)
            return CapacitySchedule(steps, rates)
        except (TypeError, IndexError) as exc:
            raise ConfigError(f"link {lid}: bad qmax schedule {value!r}") from exc
    raise ConfigError(f"link {lid}: bad qmax value {value!r}")


def _parse_link(raw: Mapping) -> Link:
    try:
        lid = int(raw["id"])
        tail = int(raw["tail"])
        head = int(raw["head"])
    except KeyError as exc:
        raise ConfigError(f"link entry missing field {exc}") from exc
    is_dummy = bool(raw.get("dummy", False))
    latency = None
    if "latency" in raw:
        lat = raw["latency"]
        latency = Latency(const=float(lat.get("const", 0.0)),
                          per_vehicle=float(lat.get("per_vehicle", 0.0)))
        if latency.const < 0 or latency.per_vehicle < 0:
            raise ConfigError(f"link {lid}: latency terms must be nonnegative")
    length = float(raw.get("L", math.inf if is_dummy else 0.0))
    v = float(raw.get("v", 1.0))
    w = raw.get("w")
    kj = raw.get("kj")
    side = raw.get("qmax_side", "both")
    if side not in ("both", "sending"):
        raise ConfigError(f"link {lid}: qmax_side must be 'both' or 'sending'")
    link = Link(
        id=lid, tail=tail, head=head,
        length=length, free_flow_speed=v,
        backward_speed=None if w is None else float(w),
        capacity=_as_schedule(raw.get("qmax"), lid),
        jam_density=None if kj is None else float(kj),
        is_dummy=is_dummy,
        capacity_side=side,
        latency=latency,
    )
    if not is_dummy:
        if link.length <= 0 or not math.isfinite(link.length):
            raise ConfigError(f"link {lid}: length must be positive and finite")
        if link.free_flow_speed <= 0:
            raise ConfigError(f"link {lid}: free-flow speed must be positive")
        if link.backward_speed is not None and not (0 < link.backward_speed <= link.free_flow_speed):
            raise ConfigError(f"link {lid}: backward speed must be in (0, v]")
        if any(r < 0 for r in link.capacity.rates):
            raise ConfigError(f"link {lid}: capacity must be nonnegative")
        if link.jam_density is not None and link.jam_density <= 0:
            raise ConfigError(f"link {lid}: jam density must be positive")
        if link.latency is not None and link.latency.steps_for(1) < 1:
            raise ConfigError(f"link {lid}: latency must be at least one step per traversal")
    return link


def parse_config(text: str) -> tuple[Network, DemandProfile, ExperimentSpec]:
    """Parse a full experiment config (TOML with [network]/[demand]/[experiment])."""
    if not text.strip():
        raise ConfigError("empty config text")
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config parse failure: {exc}") from exc

    netsec = doc.get("network")
    if not netsec:
        raise ConfigError("config has no [network] section")
    nodes = [int(n) for n in netsec.get("nodes", [])]
    if not nodes:
        raise ConfigError("[network] declares no nodes")
    links = [_parse_link(raw) for raw in netsec.get("links", [])]
    if not links:
        raise ConfigError("[network] declares no links")
    priority = {int(k): [int(x) for x in v]
                for k, v in netsec.get("priority", {}).items()}
    net = Network(nodes, links, priority)

    expsec = doc.get("experiment", {})
    model = str(expsec.get("model", "ltm")).lower()
    if model not in MODELS:
        raise ConfigError(f"unknown model {model!r}; expected one of {MODELS}")
    exp = ExperimentSpec(
        dt=float(expsec.get("dt", 1.0)),
        horizon=int(expsec.get("horizon", 100)),
        model=model,
        seed=int(expsec.get("seed", 0)),
        training=dict(expsec.get("training", {})),
        baseline=dict(expsec.get("baseline", {})),
    )

    entries = []
    for raw in doc.get("demand", {}).get("entries", []):
        count = int(raw["count"])
        if count <= 0:
            raise ConfigError(f"demand count must be a positive integer, got {count}")
        t0 = int(raw["time"])
        if not (0 <= t0 <= exp.horizon):
            raise ConfigError(f"departure time {t0} outside [0, {exp.horizon}]")
        origin = int(raw["origin"])
        dest = int(raw["destination"])
        for node, role in ((origin, "origin"), (dest, "destination")):
            if node not in net._out:
                raise ConfigError(f"demand references unknown {role} node {node}")
        if origin not in net.origin_links:
            raise ConfigError(f"origin node {origin} has no dummy origin link")
        route = raw.get("route")
        entries.append(DemandEntry(
            time=t0, origin=origin, destination=dest, count=count,
            group=int(raw.get("group", dest)),
            route=None if route is None else tuple(int(l) for l in route),
        ))
    demand = DemandProfile(tuple(entries))

    _check_connectivity(net, demand)
    return net, demand, exp


def load_network(text: str) -> tuple[Network, DemandProfile]:
    """Load and validate a network plus its demand from config text."""
    net, demand, _ = parse_config(text)
    return net, demand


def _check_connectivity(net: Network, demand: DemandProfile) -> None:
    for entry in demand.entries:
        seen = {entry.origin}
        stack = [entry.origin]
        while stack:
            node = stack.pop()
            for lid in net.outbound_links(node):
                nxt = net.links[lid].head
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        if entry.destination not in seen:
            raise ConfigError(
                f"destination {entry.destination} unreachable from origin {entry.origin}")


def validate_discretization(net: Network, dt: float = 1.0) -> list[str]:
    """Check that every real link's L/v (and L/w) is a whole number of steps.

    Cumulative-count lookups land on grid points only when traversal and
    backward-wave times are integer multiples of the step.  Returns a list
    of human-readable problems; empty means ok.
    """
    problems = []
    for lid in sorted(net.links):
        link = net.links[lid]
        if link.is_dummy:
            continue
        ratio = link.length / (link.free_flow_speed * dt)
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            problems.append(f"link {lid}: L/v = {ratio:.6g} steps is not a positive integer")
        if link.backward_speed is not None:
            ratio = link.length / (link.backward_speed * dt)
            if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
                problems.append(f"link {lid}: L/w = {ratio:.6g} steps is not a positive integer")
    return problems


# -- serialization ---------------------------------------------------------


def _fmt_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int,)):
        return str(v)
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt_value(x) for x in v) + "]"
    raise TypeError(f"cannot serialize {v!r}")


def _link_rows(link: Link) -> list[str]:
    rows = [f"id = {link.id}", f"tail = {link.tail}", f"head = {link.head}"]
    if link.is_dummy:
        rows.append("dummy = true")
        if not (len(link.capacity.rates) == 1 and math.isinf(link.capacity.rates[0])):
            rows.append(f"qmax = {_fmt_value(_schedule_value(link.capacity))}")
        return rows
    rows.append(f"L = {_fmt_value(link.length)}")
    rows.append(f"v = {_fmt_value(link.free_flow_speed)}")
    if link.backward_speed is not None:
        rows.append(f"w = {_fmt_value(link.backward_speed)}")
    rows.append(f"qmax = {_fmt_value(_schedule_value(link.capacity))}")
    if link.jam_density is not None:
        rows.append(f"kj = {_fmt_value(link.jam_density)}")
    if link.capacity_side != "both":
        rows.append(f'qmax_side = "{link.capacity_side}"')
    if link.latency is not None:
        rows.append("latency = { const = %s, per_vehicle = %s }"
                    % (_fmt_value(link.latency.const), _fmt_value(link.latency.per_vehicle)))
    return rows


def _schedule_value(sched: CapacitySchedule):
    if sched.is_constant():
        return sched.rates[0]
    return [[s, r] for s, r in zip(sched.steps, sched.rates)]


def serialize_network(net: Network) -> str:
    """Render a Network back to the [network] config section.

    Reloading the result yields an identical network (round-trip safe).
    """
    out = ["[network]", f"nodes = {_fmt_value(list(net.nodes))}", ""]
    for lid in sorted(net.links):
        out.append("[[network.links]]")
        out.extend(_link_rows(net.links[lid]))
        out.append("")
    if net._priority_overrides:
        out.append("[network.priority]")
        for node in sorted(net._priority_overrides):
            out.append(f'"{node}" = {_fmt_value(list(net._priority_overrides[node]))}')
        out.append("")
    return "\n".join(out)


def serialize_config(net: Network, demand: DemandProfile, exp: ExperimentSpec) -> str:
    """Render a full experiment config (network + demand + experiment)."""
    out = [serialize_network(net)]
    for e in demand.entries:
        out.append("[[demand.entries]]")
        out.append(f"time = {e.time}")
        out.append(f"origin = {e.origin}")
        out.append(f"destination = {e.destination}")
        out.append(f"count = {e.count}")
        out.append(f"group = {e.group}")
        if e.route is not None:
            out.append(f"route = {_fmt_value(list(e.route))}")
        out.append("")
    out.append("[experiment]")
    out.append(f"dt = {_fmt_value(exp.dt)}")
    out.append(f"horizon = {exp.horizon}")
    out.append(f'model = "{exp.model}"')
    out.append(f"seed = {exp.seed}")
    for name, table in (("training", exp.training), ("baseline", exp.baseline)):
        if table:
            out.append("")
            out.append(f"[experiment.{name}]")
            for k in table:
                out.append(f"{k} = {_fmt_value(table[k])}")
    out.append("")
    return "\n".join(out)
