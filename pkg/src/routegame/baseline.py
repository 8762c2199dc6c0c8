"""Iterative fixed-point solver for dynamic user equilibrium.

Route proportions per departure time are updated from measured route costs
with the exponential-smoothing rule

    g(x) = exp(a*x / (1 - x^2)),
    f(x) = p0*g(x) / (p0*g(x) + p1),
    delta = (tau1 - tau0) / (tau1 + tau0),
    p0 <- (1 - eta) * p0 + eta * f(delta),

applied pairwise between each route and the currently cheapest one when
there are more than two routes.  Costs come from loading the network with
an integer apportionment of the demand (largest remainder, seeded shuffle
for the vehicle interleaving); a route carrying no vehicles is priced with
a single probe vehicle simulated on top of the loaded network.  At the
fixed point every used route's cost sits within tolerance of the minimum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .game import RoutingGame, drive_episode
from .network import DemandEntry, DemandProfile, LinkId, Network, NodeId


@dataclass(frozen=True)
class Route:
    """A simple path as a link-id sequence."""

    links: tuple[LinkId, ...]

    def nodes(self, net: Network) -> tuple[NodeId, ...]:
        seq = [net.links[self.links[0]].tail]
        for lid in self.links:
            seq.append(net.links[lid].head)
        return tuple(seq)

    def free_flow_steps(self, net: Network) -> int:
        return sum(net.links[l].traversal_steps() for l in self.links)


@dataclass
class RouteSet:
    origin: NodeId
    destination: NodeId
    routes: tuple[Route, ...]


def enumerate_routes(net: Network, od: tuple[NodeId, NodeId],
                     max_routes: int = 8) -> RouteSet:
    """Up to ``max_routes`` shortest simple paths by free-flow time.

    Paths never repeat a node and never use dummy links.  Deterministic
    order: ascending (free-flow time, link-id sequence).
    """
    origin, dest = od
    found: list[Route] = []

    def extend(node, visited, acc):
        if node == dest:
            found.append(Route(tuple(acc)))
            return
        for lid in net.actions(node):
            head = net.links[lid].head
            if head in visited:
                continue
            visited.add(head)
            acc.append(lid)
            extend(head, visited, acc)
            acc.pop()
            visited.remove(head)

    extend(origin, {origin}, [])
    if not found:
        raise ValueError(f"no route from {origin} to {dest}")
    found.sort(key=lambda r: (r.free_flow_steps(net), r.links))
    return RouteSet(origin, dest, tuple(found[:max_routes]))


@dataclass
class ProportionProfile:
    """Route-choice probabilities per (origin, destination, departure time)."""

    shares: dict  # (origin, dest, time) -> np.ndarray over the OD's routes

    def of(self, key) -> np.ndarray:
        return self.shares[key]


def largest_remainder(shares: Sequence[float], total: int) -> list[int]:
    """Deterministic integer apportionment of ``total`` by ``shares``."""
    raw = [s * total for s in shares]
    counts = [int(math.floor(r + 1e-12)) for r in raw]
    short = total - sum(counts)
    order = sorted(range(len(shares)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in range(short):
        counts[order[i % len(shares)]] += 1
    return counts


def gawron_update(shares: np.ndarray, costs: Sequence[float], eta: float,
                  a: float = 1.0) -> np.ndarray:
    """One smoothing update of a share vector toward cheaper routes.

    For two routes this is exactly the two-link rule; for more, each route
    is paired with the currently cheapest route in index order and the
    pair's joint mass is redistributed, which keeps the simplex intact.
    Equal costs are a fixed point.
    """
    if not 0 < eta <= 1:
        raise ValueError("eta must be in (0, 1]")
    costs = [float(c) for c in costs]
    if any(c < 0 for c in costs):
        raise ValueError("route costs must be nonnegative")
    p = np.asarray(shares, dtype=float).copy()
    if len(p) < 2:
        return p
    best = min(range(len(costs)), key=lambda i: (costs[i], i))
    for k in range(len(p)):
        if k == best:
            continue
        pair = p[best] + p[k]
        if pair <= 0:
            continue
        tau0, tau1 = costs[best], costs[k]
        if tau0 + tau1 <= 0:
            raise ZeroDivisionError("total cost of a route pair is zero")
        delta = (tau1 - tau0) / (tau1 + tau0)
        p0 = p[best] / pair
        g = math.exp(a * delta / (1.0 - delta * delta)) if abs(delta) < 1 else (
            math.inf if delta > 0 else 0.0)
        denom = p0 * g + (1.0 - p0)
        f = 1.0 if math.isinf(g) else (p0 * g / denom if denom > 0 else 1.0)
        p0_new = (1.0 - eta) * p0 + eta * f
        p[best] = pair * p0_new
        p[k] = pair * (1.0 - p0_new)
    total = p.sum()
    if total <= 0:
        raise ValueError("share vector collapsed")
    return p / total


@dataclass
class CostMeasurement:
    costs: dict        # (origin, dest, time) -> list of mean route costs
    counts: dict       # (origin, dest, time) -> list of vehicle counts
    avg_travel_time: float
    assignment: DemandProfile


def _routed_demand(demand: DemandProfile, route_sets: dict,
                   profile: ProportionProfile,
                   rng: np.random.Generator) -> tuple[DemandProfile, dict]:
    """Expand demand into per-vehicle scripted routes by sampling shares.

    Counts per route are fixed by largest-remainder apportionment; the
    interleaving of routes across vehicle ids is a seeded shuffle.
    Returns the scripted demand plus vehicle-id -> (od key, route index).
    """
    entries = []
    tags = {}
    vid = 0
    for entry in demand.entries:
        key = (entry.origin, entry.destination, entry.time)
        routes = route_sets[(entry.origin, entry.destination)].routes
        counts = largest_remainder(profile.of(key), entry.count)
        labels = np.repeat(np.arange(len(routes)), counts)
        rng.shuffle(labels)
        for ridx in labels:
            entries.append(DemandEntry(
                time=entry.time, origin=entry.origin, destination=entry.destination,
                count=1, group=entry.group, route=routes[ridx].links))
            tags[vid] = (key, int(ridx))
            vid += 1
    return DemandProfile(tuple(entries)), tags


def measure_route_costs(net: Network, model: str, profile: ProportionProfile,
                        demand: DemandProfile, route_sets: dict, horizon: int,
                        rng: np.random.Generator,
                        replications: int = 1) -> CostMeasurement:
    """Load the network at the given proportions and price every route.

    Costs are averaged over ``replications`` independent vehicle
    interleavings (integer route counts are the same in each; only the
    shuffle differs), which damps ordering noise in the measured costs.
    Unused routes are priced by re-simulating with one marginal probe
    vehicle added on top of the same assignment.
    """
    sums: dict = {}
    counts: dict = {}
    avg_sum = 0.0
    last_assignment = None
    for _ in range(max(1, replications)):
        routed, tags = _routed_demand(demand, route_sets, profile, rng)
        last_assignment = routed
        env = RoutingGame(net, routed, model, horizon=horizon)
        res = drive_episode(env, None)
        avg_sum += res.avg_travel_time
        for vid, (key, ridx) in tags.items():
            nroutes = len(route_sets[(key[0], key[1])].routes)
            sums.setdefault(key, [0.0] * nroutes)
            counts.setdefault(key, [0] * nroutes)
            sums[key][ridx] += res.travel_times[vid]
            counts[key][ridx] += 1

    costs = {key: [s / c if c else None for s, c in zip(sums[key], counts[key])]
             for key in sums}
    counts = {key: [c // max(1, replications) for c in counts[key]]
              for key in counts}

    # Probe runs for empty routes: same assignment plus one scripted vehicle.
    for key in sorted(costs):
        origin, dest, t0 = key
        routes = route_sets[(origin, dest)].routes
        for ridx, cost in enumerate(costs[key]):
            if cost is not None:
                continue
            probe = DemandEntry(time=t0, origin=origin, destination=dest,
                                count=1, group=0, route=routes[ridx].links)
            probe_env = RoutingGame(
                net, DemandProfile(last_assignment.entries + (probe,)),
                model, horizon=horizon)
            probe_res = drive_episode(probe_env, None)
            probe_id = len(last_assignment.entries)
            costs[key][ridx] = float(probe_res.travel_times[probe_id])

    return CostMeasurement(costs=costs, counts=counts,
                           avg_travel_time=avg_sum / max(1, replications),
                           assignment=last_assignment)


@dataclass
class FixedPointResult:
    profile: ProportionProfile
    route_sets: dict
    costs: dict                 # final measured costs per od-time key
    counts: dict                # final integer assignment per od-time key
    avg_travel_time: float
    iterations: int
    converged: bool
    gap: float
    trace: list = field(default_factory=list)  # per-iteration rows


def relative_gap(costs: Sequence[float], counts: Sequence[int]) -> float:
    """Worst relative excess cost over the minimum among routes carrying
    flow (positive vehicle count)."""
    used = [c for c, n in zip(costs, counts) if n > 0]
    if not used:
        return 0.0
    lo = min(used)
    if lo <= 0:
        return 0.0
    return max((c - lo) / lo for c in used)


def solve_due_fixed_point(net: Network, model: str, demand: DemandProfile,
                          horizon: int, seed: int = 0, eta: float = 0.3,
                          a: float = 1.0, tolerance: float = 0.01,
                          max_iterations: int = 200, max_routes: int = 8,
                          replications: int = 3,
                          route_sets: Optional[dict] = None) -> FixedPointResult:
    """Iterate load-and-update until used-route costs equalize.

    Convergence: the worst relative cost gap among routes carrying flow is
    below ``tolerance`` for every departure cell.  Non-convergence within
    the budget is reported, not raised.
    """
    rng = np.random.default_rng(seed)
    if route_sets is None:
        route_sets = {}
        for entry in demand.entries:
            od = (entry.origin, entry.destination)
            if od not in route_sets:
                route_sets[od] = enumerate_routes(net, od, max_routes)

    shares = {}
    for entry in demand.entries:
        key = (entry.origin, entry.destination, entry.time)
        n = len(route_sets[(entry.origin, entry.destination)].routes)
        shares[key] = np.full(n, 1.0 / n)
    profile = ProportionProfile(shares)

    trace = []
    gap = math.inf
    measurement = None
    iterations = 0
    for it in range(1, max_iterations + 1):
        iterations = it
        measurement = measure_route_costs(net, model, profile, demand,
                                          route_sets, horizon, rng,
                                          replications=replications)
        gap = max(relative_gap(measurement.costs[key], measurement.counts[key])
                  for key in measurement.costs)
        for key in sorted(measurement.costs):
            trace.append((it, key, list(measurement.costs[key]),
                          list(measurement.counts[key]),
                          measurement.avg_travel_time, gap))
        if gap < tolerance:
            break
        for key in sorted(measurement.costs):
            profile.shares[key] = gawron_update(
                profile.of(key), measurement.costs[key], eta, a)

    return FixedPointResult(
        profile=profile, route_sets=route_sets,
        costs=measurement.costs, counts=measurement.counts,
        avg_travel_time=measurement.avg_travel_time,
        iterations=iterations, converged=gap < tolerance, gap=gap, trace=trace)
