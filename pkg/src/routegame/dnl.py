"""Discrete-time dynamic network loading: PQ, SQ, CTM and LTM environments.

Vehicles are atomic.  Each link keeps cumulative upstream/downstream count
histories (``n_up[t]``/``n_down[t]`` are the counts at the *start* of step
``t``) and a FIFO queue of the vehicles currently on it.  During step ``t``
the node model moves vehicles between links, bounded by each link's sending
and receiving flow; the count histories are then extended to index ``t+1``.

Timing convention: a vehicle entering a link during step ``t`` is counted
in ``n_up[t+1]`` and can exit no earlier than step ``t + L/v``.  All flow
formulas reduce to integer caps on the discrete queues; fractional storage
and wave terms are floored.

The node model serves inbound links in discharge-priority order.  Within a
link, vehicles are served in FIFO order per movement: vehicles bound for
the same outbound link never overtake each other, while a vehicle whose
target has no remaining receiving flow waits without holding up vehicles
bound for other links.  (A single-file rule that blocks the whole link
behind one spillback makes a long parallel route individually useless --
the queue position of every follower is fixed regardless of choice -- and
no split equilibrium can exist on diverge bottlenecks.)
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Mapping, Optional

from .network import Link, LinkId, Network

DNL_MODELS = ("pq", "sq", "ctm", "ltm")


class MissingChoiceError(RuntimeError):
    """A vehicle reached the front of a decision node without a chosen link."""


class IllegalChoiceError(RuntimeError):
    """A vehicle's chosen link does not leave the node it is at."""


@dataclass
class LinkState:
    """Dynamic record for one link.

    ``queue`` holds ``(vehicle_id, entry_step)`` in entry order for the
    whole link; for CTM the same vehicles are additionally distributed
    over per-cell FIFO deques.
    """

    link_id: LinkId
    n_up: list[int] = field(default_factory=lambda: [0])
    n_down: list[int] = field(default_factory=lambda: [0])
    queue: deque = field(default_factory=deque)
    cells: Optional[list[deque]] = None
    cell_capacity: int = 0

    def occupancy(self) -> int:
        return len(self.queue)

    def vehicles(self) -> tuple:
        return tuple(v for v, _ in self.queue)


@dataclass(frozen=True)
class TransitFlow:
    """Vehicles moved from one link to another during one step."""

    from_link: LinkId
    to_link: LinkId
    step: int
    vehicles: tuple


@dataclass
class StepResult:
    transfers: list[TransitFlow]
    entered: dict            # link -> list of vehicle ids that entered this step
    arrivals: list           # (vehicle_id, sink_link_id) entering a sink dummy
    post_entry_flow: dict    # link -> n_up[t+1] - n_down[t+1], for entered links


def init_states(net: Network, model: str) -> dict[LinkId, LinkState]:
    """Fresh per-link states for a simulation run under ``model``."""
    if model not in DNL_MODELS:
        raise ValueError(f"unknown loading model {model!r}")
    states = {}
    for lid in sorted(net.links):
        link = net.links[lid]
        state = LinkState(link_id=lid)
        if not link.is_dummy:
            if model in ("sq", "ltm", "ctm") and link.jam_density is None:
                raise ValueError(f"model {model} needs jam density on link {lid}")
            if model in ("ltm", "ctm") and link.backward_speed is None:
                raise ValueError(f"model {model} needs backward speed on link {lid}")
            if model == "ctm":
                ncells = link.traversal_steps()
                cap = int(math.floor(link.jam_density * link.free_flow_speed))
                if cap < 1:
                    raise ValueError(f"link {lid}: CTM cell capacity {cap} < 1")
                state.cells = [deque() for _ in range(ncells)]
                state.cell_capacity = cap
        states[lid] = state
    return states


def _count_at(series: list[int], idx: int) -> int:
    if idx < 0:
        return 0
    return series[idx] if idx < len(series) else series[-1]


def _send_cap(link: Link, t: int) -> float:
    return link.capacity.rate_at(t)


def _recv_cap(link: Link, t: int) -> float:
    # A "sending"-side schedule models a bottleneck at the link exit;
    # entry stays at the base (maximum) capacity.
    if link.capacity_side == "sending":
        return link.capacity.max_rate()
    return link.capacity.rate_at(t)


def _as_int(x: float) -> float:
    return x if math.isinf(x) else int(math.floor(x + 1e-9))


# -- sending flows -----------------------------------------------------------


def sending_flow_ltm(state: LinkState, link: Link, t: int):
    """Vehicles able to exit the downstream end during step t.

    ``S(t) = min(n_up(t - L/v + 1) - n_down(t), qmax)``; indices before the
    start of the run count as zero.  PQ and SQ use the identical rule.
    """
    if link.is_dummy:
        return min(len(state.queue), _as_int(_send_cap(link, t)))
    tau = link.traversal_steps()
    ready = _count_at(state.n_up, t - tau + 1) - _count_at(state.n_down, t)
    return max(0, min(ready, _as_int(_send_cap(link, t))))


sending_flow_pq = sending_flow_ltm
sending_flow_sq = sending_flow_ltm


def cell_sending(n: int, cap) -> int:
    """CTM per-cell sending flow: min(occupancy, capacity)."""
    return int(min(n, cap if not math.isinf(cap) else n))


def cell_receiving(n: int, cell_capacity: int, wv_ratio: float, cap) -> int:
    """CTM per-cell receiving flow: min((w/v)(N - n), capacity), floored."""
    space = math.floor(wv_ratio * (cell_capacity - n) + 1e-9)
    return int(max(0, min(space, cap if not math.isinf(cap) else space)))


def sending_flow_ctm(state: LinkState, link: Link, t: int):
    if link.is_dummy:
        return min(len(state.queue), _as_int(_send_cap(link, t)))
    return cell_sending(len(state.cells[-1]), _as_int(_send_cap(link, t)))


# -- receiving flows ---------------------------------------------------------


def receiving_flow_pq(link: Link, t: int):
    """Point queue: entry is capped by flow capacity only (no storage)."""
    if link.is_dummy:
        return math.inf
    return _as_int(_recv_cap(link, t))


def receiving_flow_sq(state: LinkState, link: Link, t: int):
    """Spatial queue: storage frees as soon as a vehicle exits downstream."""
    if link.is_dummy:
        return math.inf
    space = _count_at(state.n_down, t) + link.storage() - _count_at(state.n_up, t)
    return max(0, min(_as_int(space), _as_int(_recv_cap(link, t))))


def receiving_flow_ltm(state: LinkState, link: Link, t: int):
    """Link transmission: freed storage propagates upstream at speed w.

    ``R(t) = min(n_down(t - L/w + 1) + kj*L - n_up(t), qmax)``.
    """
    if link.is_dummy:
        return math.inf
    tau_w = link.backward_steps()
    space = (_count_at(state.n_down, t - tau_w + 1) + link.storage()
             - _count_at(state.n_up, t))
    return max(0, min(_as_int(space), _as_int(_recv_cap(link, t))))


def receiving_flow_ctm(state: LinkState, link: Link, t: int):
    if link.is_dummy:
        return math.inf
    wv = link.backward_speed / link.free_flow_speed
    return cell_receiving(len(state.cells[0]), state.cell_capacity, wv,
                          _as_int(_recv_cap(link, t)))


_SENDING = {"pq": sending_flow_pq, "sq": sending_flow_sq,
            "ltm": sending_flow_ltm, "ctm": sending_flow_ctm}


def sending_flow(model: str, state: LinkState, link: Link, t: int):
    return _SENDING[model](state, link, t)


def receiving_flow(model: str, state: LinkState, link: Link, t: int):
    if model == "pq":
        return receiving_flow_pq(link, t)
    if model == "sq":
        return receiving_flow_sq(state, link, t)
    if model == "ltm":
        return receiving_flow_ltm(state, link, t)
    if model == "ctm":
        return receiving_flow_ctm(state, link, t)
    raise ValueError(f"unknown loading model {model!r}")


# -- node model --------------------------------------------------------------


def _eligible_count(model: str, state: LinkState, link: Link, t: int) -> int:
    """Vehicles that have reached the downstream end and may be offered."""
    if link.is_dummy:
        return len(state.queue)
    if model == "ctm":
        return len(state.cells[-1])
    tau = link.traversal_steps()
    ready = _count_at(state.n_up, t - tau + 1) - _count_at(state.n_down, t)
    return max(0, min(ready, len(state.queue)))


def node_transfer(net: Network, states: Mapping[LinkId, LinkState],
                  choices: Mapping, t: int, model: str = "ltm") -> list[TransitFlow]:
    """Plan all link-to-link moves for step t.

    Inbound links are served in the node's priority order.  Within a link,
    vehicles that have reached the downstream end are offered in FIFO
    order; each move consumes one unit of the target link's remaining
    receiving flow, total exits per link are capped by its flow capacity,
    and a vehicle whose target is exhausted waits in place without holding
    up vehicles bound for other links.  Does not mutate ``states``.
    """
    moves: list[TransitFlow] = []
    for node in net.nodes:
        outgoing = net.outbound_links(node)
        if not outgoing:
            continue  # terminal dummy node: nothing can leave
        inbound = net.inbound_links(node)
        if not inbound:
            continue
        remaining = {lid: receiving_flow(model, states[lid], net.links[lid], t)
                     for lid in outgoing}
        for in_lid in inbound:
            state = states[in_lid]
            link = net.links[in_lid]
            cap = _as_int(_send_cap(link, t))
            offered = min(_eligible_count(model, state, link, t), cap)
            if offered <= 0:
                continue
            picked: dict[LinkId, list] = {}
            taken = 0
            for i in range(int(offered)):
                if taken >= cap:
                    break
                veh = state.queue[i][0]
                target = choices.get(veh)
                if target is None:
                    raise MissingChoiceError(
                        f"vehicle {veh} has no chosen link at node {node} (step {t})")
                if target not in remaining:
                    raise IllegalChoiceError(
                        f"vehicle {veh} chose link {target}, not outbound from node {node}")
                if remaining[target] < 1:
                    continue  # spillback: waits, later targets may still pass
                remaining[target] -= 1
                taken += 1
                picked.setdefault(target, []).append(veh)
            for target in sorted(picked):
                moves.append(TransitFlow(in_lid, target, t, tuple(picked[target])))
    return moves


def _ctm_advance(state: LinkState, link: Link, t: int, prestep: list[int]) -> None:
    # Simultaneous CTM update: all boundary flows evaluated at pre-step
    # occupancies, then executed.  Execution order cannot starve because
    # every cell still holds at least its planned senders at the front.
    cap = _as_int(_send_cap(link, t))
    wv = link.backward_speed / link.free_flow_speed
    flows = []
    for i in range(len(state.cells) - 1):
        y = min(cell_sending(prestep[i], cap),
                cell_receiving(prestep[i + 1], state.cell_capacity, wv, _as_int(_recv_cap(link, t))))
        flows.append(y)
    for i in range(len(state.cells) - 2, -1, -1):
        for _ in range(flows[i]):
            state.cells[i + 1].append(state.cells[i].popleft())


def dnl_step(model: str, net: Network, states: dict[LinkId, LinkState],
             choices: Mapping, t: int,
             placed: Optional[Mapping[LinkId, int]] = None) -> StepResult:
    """Advance the loading by one step.

    ``choices`` maps every vehicle that may move through a node this step
    to its target link.  ``placed`` counts vehicles appended to dummy
    origin queues at the start of this step (so the count histories see
    them as entries).  Total vehicles are conserved; count histories are
    extended to index ``t + 1``.
    """
    prestep_cells = None
    if model == "ctm":
        prestep_cells = {lid: [len(c) for c in st.cells] if st.cells else None
                         for lid, st in states.items()}

    moves = node_transfer(net, states, choices, t, model)

    # Blocked vehicles may be overtaken by vehicles bound elsewhere, so the
    # moved set is not a queue prefix; rebuild queues preserving order.
    by_src: dict[LinkId, dict] = {}
    for move in moves:
        tgt = by_src.setdefault(move.from_link, {})
        for veh in move.vehicles:
            tgt[veh] = move.to_link

    entered: dict[LinkId, list] = {}
    exits: dict[LinkId, int] = {}
    arrivals = []
    for src_lid in sorted(by_src):
        src = states[src_lid]
        targets = by_src[src_lid]
        found = 0
        kept = deque()
        for veh, entry in src.queue:
            if veh in targets:
                found += 1
                dst_lid = targets[veh]
                dst = states[dst_lid]
                dst.queue.append((veh, t))
                if dst.cells is not None:
                    dst.cells[0].append(veh)
                entered.setdefault(dst_lid, []).append(veh)
                to_link = net.links[dst_lid]
                if to_link.is_dummy and net.sink_links.get(to_link.tail) == dst_lid:
                    arrivals.append((veh, dst_lid))
            else:
                kept.append((veh, entry))
        if found != len(targets):
            raise AssertionError(f"planned move missing from link {src_lid}")
        src.queue = kept
        if src.cells is not None:
            src.cells[-1] = deque(v for v in src.cells[-1] if v not in targets)
        exits[src_lid] = len(targets)

    if model == "ctm":
        for lid in sorted(states):
            st = states[lid]
            if st.cells is not None and len(st.cells) > 1:
                _ctm_advance(st, net.links[lid], t, prestep_cells[lid])

    placed = placed or {}
    for lid in sorted(states):
        st = states[lid]
        ins = len(entered.get(lid, ())) + placed.get(lid, 0)
        st.n_up.append(st.n_up[-1] + ins)
        st.n_down.append(st.n_down[-1] + exits.get(lid, 0))

    post_flow = {lid: states[lid].n_up[-1] - states[lid].n_down[-1]
                 for lid in entered}
    return StepResult(moves, entered, arrivals, post_flow)


def queue_length(state: LinkState, link: Link, t: int) -> int:
    """Standing downstream queue after step t: vehicles that had reached
    the downstream end by step t but had not exited once the step ran.
    Zero under free flow.  Requires count histories through t + 1."""
    if link.is_dummy:
        return len(state.queue)
    tau = link.traversal_steps()
    return max(0, _count_at(state.n_up, t - tau + 1) - _count_at(state.n_down, t + 1))
