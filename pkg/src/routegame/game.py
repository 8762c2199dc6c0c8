"""Markov routing game over a traffic loading environment.

Atomic agents travel from origins to destinations, choosing an outbound
link every time they reach a node.  The environment advances in unit
steps; an agent observes only its own ``(node, time)`` pair.  Rewards are
negative elapsed time, delivered when the agent reaches the head of its
next link, so per-hop rewards always sum to the negative total travel
time.  Alongside the new observation each agent receives the mean action:
the traffic flow on the link it entered, measured right after entry.

Two backends share the same interface:

* the four loading models from :mod:`routegame.dnl` (capacity-constrained,
  FIFO, spillback-capable), and
* a ``latency`` backend where a link's traversal time is a function of its
  occupancy right after entry and storage is unconstrained.

Decisions are sticky: an agent chooses once upon reaching a node, and a
blocked vehicle keeps its standing choice until the move executes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np

from . import dnl
from .network import DemandProfile, LinkId, Network, NodeId

PENDING = "pending"
ENROUTE = "enroute"
DECIDING = "deciding"
ARRIVING = "arriving"   # at destination head, waiting to discharge into the sink
ARRIVED = "arrived"
TIMED_OUT = "timed-out"
STUCK = "stuck"         # dead-end node: waits out the clock


@dataclass(frozen=True)
class Observation:
    node: NodeId
    time: int


@dataclass
class Experience:
    """One agent transition ``(o, a, o', r, mean action)``."""

    obs: Observation
    action: LinkId
    obs_next: Observation
    reward: float
    mean_action: int
    terminal: bool


def reward_of_traversal(entry: int, exit: int) -> int:
    """Negative time elapsed between two consecutive decision points."""
    if exit < entry:
        raise ValueError("exit step before entry step")
    return -(exit - entry)


@dataclass
class Agent:
    id: int
    group: int
    origin: NodeId
    destination: NodeId
    departure: int
    controllable: bool
    scripted_route: Optional[tuple[LinkId, ...]] = None

    status: str = PENDING
    link: Optional[LinkId] = None
    entry_step: Optional[int] = None
    head_time: Optional[int] = None
    decision_obs: Optional[Observation] = None
    standing_choice: Optional[LinkId] = None
    route_pos: int = 0
    arrived_step: Optional[int] = None
    open_obs: Optional[Observation] = None
    open_action: Optional[LinkId] = None
    open_mean_action: Optional[int] = None


@dataclass
class EpisodeResult:
    experiences: dict            # agent id -> list[Experience] (controllables)
    travel_times: dict           # agent id -> steps, every vehicle
    avg_travel_time: float
    timed_out: tuple
    trace: list = field(default_factory=list)


class RoutingGame:
    """Episode-scoped game environment.  Build one per rollout (cheap), or
    call :meth:`reset` to reuse.  Strictly deterministic given the demand,
    network, model and the submitted choices."""

    def __init__(self, net: Network, demand: DemandProfile, model: str,
                 horizon: int, seed: int = 0, record_trace: bool = False):
        if model != "latency" and model not in dnl.DNL_MODELS:
            raise ValueError(f"unknown model {model!r}")
        self.net = net
        self.demand = demand
        self.model = model
        self.horizon = int(horizon)
        self.seed = seed
        self.record_trace = record_trace
        self._template = self._build_agents()
        if model != "latency":
            for ag in self._template:
                if ag.destination not in net.sink_links:
                    raise ValueError(
                        f"destination {ag.destination} needs a dummy sink link under {model}")
        self.reset()

    # -- construction -------------------------------------------------------

    def _build_agents(self) -> list[Agent]:
        agents = []
        for entry in self.demand.entries:
            for _ in range(entry.count):
                agents.append(Agent(
                    id=len(agents), group=entry.group,
                    origin=entry.origin, destination=entry.destination,
                    departure=entry.time,
                    controllable=entry.route is None,
                    scripted_route=entry.route,
                ))
        return agents

    def reset(self) -> dict[int, Observation]:
        """Start a fresh episode; returns observations of agents that must
        decide at step 0."""
        self.clock = 0
        self.done = False
        self.agents: dict[int, Agent] = {}
        for tmpl in self._template:
            self.agents[tmpl.id] = Agent(
                id=tmpl.id, group=tmpl.group, origin=tmpl.origin,
                destination=tmpl.destination, departure=tmpl.departure,
                controllable=tmpl.controllable, scripted_route=tmpl.scripted_route)
        self._events: list[tuple[int, Experience]] = []
        self.trace: list[tuple] = []
        self._placed: dict[LinkId, int] = {}
        self._committed: dict[LinkId, int] = {l: 0 for l in self.net.links}
        if self.model == "latency":
            self._occ: dict[LinkId, int] = {l: 0 for l in self.net.links}
            self._ent = {l: 0 for l in self.net.links}
            self._ext = {l: 0 for l in self.net.links}
            self.states = None
        else:
            self.states = dnl.init_states(self.net, self.model)
        self._begin_step(0)
        if not self.agents:
            self.done = True
        self._events.clear()
        return {aid: ag.decision_obs for aid, ag in sorted(self.agents.items())
                if ag.status == DECIDING and ag.controllable}

    # -- queries --------------------------------------------------------------

    def deciding(self) -> dict[int, tuple[Observation, tuple[LinkId, ...]]]:
        """Controllable agents that need a choice this step, with their
        observation and allowable action set."""
        out = {}
        for aid in sorted(self.agents):
            ag = self.agents[aid]
            if (ag.controllable and ag.status == DECIDING
                    and ag.standing_choice is None):
                out[aid] = (ag.decision_obs, self.net.actions(ag.decision_obs.node))
        return out

    def occupancy(self, link: LinkId) -> int:
        """Vehicles currently on a link (start-of-step view)."""
        if self.model == "latency":
            return self._occ[link]
        return self.states[link].occupancy()

    def flow_estimate(self, link: LinkId) -> int:
        """What the mean action on a link looks like to an agent about to
        commit to it: vehicles already on it, plus vehicles standing
        committed to enter it (their queue is observable congestion), plus
        the agent itself."""
        return self.occupancy(link) + self._committed.get(link, 0) + 1

    def census(self) -> tuple[int, int, int, int]:
        """(waiting on origin dummies, on network, arrived, not yet placed)."""
        waiting = on_net = done = unplaced = 0
        for ag in self.agents.values():
            if ag.status == PENDING:
                unplaced += 1
            elif ag.status in (ARRIVED,):
                done += 1
            elif ag.link is not None and self.net.links[ag.link].is_dummy:
                waiting += 1
            elif ag.status in (DECIDING, STUCK, TIMED_OUT) and ag.link is None:
                waiting += 1  # latency backend: counted at its node
            else:
                on_net += 1
        return waiting, on_net, done, unplaced

    # -- stepping ---------------------------------------------------------------

    def step(self, choices: Mapping[int, LinkId]):
        """Advance one step.  ``choices`` must cover every controllable agent
        listed by :meth:`deciding`.  Returns ``(events, done)`` where events
        are completed ``(agent id, Experience)`` pairs."""
        if self.done:
            raise RuntimeError("episode already finished")
        t = self.clock
        for aid in sorted(choices):
            ag = self.agents[aid]
            act = choices[aid]
            if ag.status != DECIDING:
                raise dnl.IllegalChoiceError(f"agent {aid} is not deciding")
            if ag.standing_choice is not None:
                raise dnl.IllegalChoiceError(
                    f"agent {aid} already has a standing choice")
            if act not in self.net.actions(ag.decision_obs.node):
                raise dnl.IllegalChoiceError(
                    f"agent {aid}: link {act} not allowable at node {ag.decision_obs.node}")
            ag.standing_choice = act
            self._committed[act] += 1
        for aid in sorted(self.agents):
            ag = self.agents[aid]
            if (ag.controllable and ag.status == DECIDING
                    and ag.standing_choice is None):
                raise dnl.MissingChoiceError(
                    f"deciding agent {aid} was given no choice at step {t}")

        if self.model == "latency":
            self._execute_latency(t)
        else:
            self._execute_dnl(t)

        self.clock = t + 1
        self._begin_step(self.clock)

        if self._all_settled():
            self.done = True
        elif self.clock >= self.horizon:
            self._timeout()
            self.done = True
        events = list(self._events)
        self._events.clear()
        return events, self.done

    def _all_settled(self) -> bool:
        return all(ag.status in (ARRIVED, TIMED_OUT) for ag in self.agents.values())

    # -- phase helpers ------------------------------------------------------------

    def _begin_step(self, t: int) -> None:
        if t >= self.horizon:
            return
        self._placed = {}
        for aid in sorted(self.agents):
            ag = self.agents[aid]
            if ag.status == PENDING and ag.departure == t:
                self._place(ag, t)
        for aid in sorted(self.agents):
            ag = self.agents[aid]
            if ag.status == ENROUTE and ag.head_time == t:
                self._reach_head(ag, t)

    def _place(self, ag: Agent, t: int) -> None:
        if self.model == "latency":
            ag.link = None
        else:
            lid = self.net.origin_links[ag.origin]
            self.states[lid].queue.append((ag.id, t))
            self._placed[lid] = self._placed.get(lid, 0) + 1
            ag.link = lid
            ag.entry_step = t
        self._make_deciding(ag, ag.origin, t)

    def _reach_head(self, ag: Agent, t: int) -> None:
        node = self.net.links[ag.link].head
        if self.model == "latency":
            self._occ[ag.link] -= 1
            self._ext[ag.link] += 1
            if node == ag.destination:
                ag.status = ARRIVED
                ag.arrived_step = t
                ag.link = None
                self._close_experience(ag, Observation(node, t), terminal=True)
                return
            ag.link = None
            self._make_deciding(ag, node, t)
            return
        if node == ag.destination:
            ag.status = ARRIVING
            ag.standing_choice = self.net.sink_links[node]
            return
        self._make_deciding(ag, node, t)

    def _make_deciding(self, ag: Agent, node: NodeId, t: int) -> None:
        obs = Observation(node, t)
        if ag.open_obs is not None:
            self._close_experience(ag, obs, terminal=False)
        allowable = self.net.actions(node)
        if not allowable:
            # Dead end for this agent: it can never reach its destination.
            ag.status = STUCK
            return
        ag.status = DECIDING
        ag.decision_obs = obs
        ag.standing_choice = None
        if ag.scripted_route is not None:
            if ag.route_pos >= len(ag.scripted_route):
                raise ValueError(f"scripted route of agent {ag.id} ended at node {node} "
                                 f"short of destination {ag.destination}")
            nxt = ag.scripted_route[ag.route_pos]
            if self.net.links[nxt].tail != node:
                raise ValueError(f"scripted route of agent {ag.id} does not pass node {node}")
            ag.standing_choice = nxt
            self._committed[nxt] += 1
            ag.route_pos += 1

    def _close_experience(self, ag: Agent, obs_next: Observation, terminal: bool,
                          extra_penalty: float = 0.0) -> None:
        if ag.open_obs is None:
            return
        if ag.controllable:
            exp = Experience(
                obs=ag.open_obs, action=ag.open_action, obs_next=obs_next,
                reward=reward_of_traversal(ag.open_obs.time, obs_next.time) + extra_penalty,
                mean_action=ag.open_mean_action, terminal=terminal)
            self._events.append((ag.id, exp))
        ag.open_obs = ag.open_action = ag.open_mean_action = None

    def _open_experience(self, ag: Agent, action: LinkId) -> None:
        ag.open_obs = ag.decision_obs
        ag.open_action = action
        ag.open_mean_action = None  # filled once post-entry flow is known

    # -- backends ----------------------------------------------------------------

    def _execute_dnl(self, t: int) -> None:
        choices = {}
        for ag in self.agents.values():
            if ag.standing_choice is not None and ag.status in (DECIDING, ARRIVING):
                choices[ag.id] = ag.standing_choice
        result = dnl.dnl_step(self.model, self.net, self.states, choices, t,
                              placed=self._placed)
        self._placed = {}
        arrived = dict(result.arrivals)
        for lid in sorted(result.entered):
            link = self.net.links[lid]
            for veh in result.entered[lid]:
                ag = self.agents[veh]
                if veh in arrived and arrived[veh] == lid:
                    ag.status = ARRIVED
                    ag.arrived_step = t
                    ag.link = lid
                    ag.standing_choice = None
                    self._close_experience(ag, Observation(link.tail, t), terminal=True)
                    continue
                self._open_experience(ag, lid)
                self._committed[lid] -= 1
                ag.link = lid
                ag.entry_step = t
                ag.head_time = t + link.traversal_steps()
                ag.status = ENROUTE
                ag.standing_choice = None
        for lid, flow in result.post_entry_flow.items():
            if self.net.links[lid].is_dummy:
                continue
            for veh in result.entered[lid]:
                self.agents[veh].open_mean_action = flow
        if self.record_trace:
            moved = {}
            for tf in result.transfers:
                moved[tf.from_link] = moved.get(tf.from_link, 0) + len(tf.vehicles)
            for lid in sorted(self.states):
                st = self.states[lid]
                self.trace.append((t, lid, st.n_up[-1], st.n_down[-1],
                                   dnl.queue_length(st, self.net.links[lid], t),
                                   moved.get(lid, 0)))

    def _execute_latency(self, t: int) -> None:
        batches: dict[LinkId, list[int]] = {}
        for aid in sorted(self.agents):
            ag = self.agents[aid]
            if ag.status == DECIDING and ag.standing_choice is not None:
                batches.setdefault(ag.standing_choice, []).append(aid)
        for lid in sorted(batches):
            link = self.net.links[lid]
            group = batches[lid]
            self._occ[lid] += len(group)
            self._ent[lid] += len(group)
            post = self._occ[lid]
            steps = max(1, link.effective_latency().steps_for(post))
            for aid in group:
                ag = self.agents[aid]
                self._open_experience(ag, lid)
                self._committed[lid] -= 1
                ag.open_mean_action = post
                ag.link = lid
                ag.entry_step = t
                ag.head_time = t + steps
                ag.status = ENROUTE
                ag.standing_choice = None
        if self.record_trace:
            for lid in sorted(self.net.links):
                self.trace.append((t, lid, self._ent[lid], self._ext[lid],
                                   0, len(batches.get(lid, ()))))

    def _timeout(self) -> None:
        horizon = self.horizon
        for aid in sorted(self.agents):
            ag = self.agents[aid]
            if ag.status in (ARRIVED, TIMED_OUT):
                continue
            if ag.controllable:
                if ag.open_obs is not None:
                    node = self.net.links[ag.link].head if ag.link is not None else ag.origin
                    self._close_experience(ag, Observation(node, horizon),
                                           terminal=True, extra_penalty=-horizon)
                elif ag.decision_obs is not None and ag.standing_choice is not None:
                    # Never even left the node: charge the wait plus the penalty.
                    exp = Experience(
                        obs=ag.decision_obs, action=ag.standing_choice,
                        obs_next=Observation(ag.decision_obs.node, horizon),
                        reward=reward_of_traversal(ag.decision_obs.time, horizon) - horizon,
                        mean_action=1, terminal=True)
                    self._events.append((ag.id, exp))
            ag.status = TIMED_OUT

    # -- episode driving -----------------------------------------------------------

    def travel_times(self) -> dict[int, int]:
        out = {}
        for aid in sorted(self.agents):
            ag = self.agents[aid]
            if ag.status == ARRIVED:
                out[aid] = ag.arrived_step - ag.departure
            elif ag.status in (TIMED_OUT, STUCK):
                out[aid] = self.horizon - ag.departure
        return out

    def result(self, experiences: dict) -> EpisodeResult:
        times = self.travel_times()
        ctrl = [times[aid] for aid, ag in sorted(self.agents.items())
                if ag.controllable and aid in times]
        if not ctrl:  # fully scripted population: average everyone
            ctrl = [times[aid] for aid in sorted(times)]
        avg = float(np.mean(ctrl)) if ctrl else 0.0
        return EpisodeResult(
            experiences=experiences, travel_times=times, avg_travel_time=avg,
            timed_out=tuple(aid for aid, ag in sorted(self.agents.items())
                            if ag.status == TIMED_OUT),
            trace=self.trace)


DecideFn = Callable[[int, Observation, tuple[LinkId, ...]], LinkId]


def drive_episode(env: RoutingGame, decide: Optional[DecideFn],
                  on_experience: Optional[Callable[[int, Experience], None]] = None,
                  ) -> EpisodeResult:
    """Run an episode to completion, asking ``decide`` for each choice.

    ``decide`` may be None when every vehicle is scripted.  Experiences are
    gathered per agent and also forwarded to ``on_experience`` as they
    complete.
    """
    env.reset()
    experiences: dict[int, list[Experience]] = {}
    while not env.done:
        choices = {}
        for aid, (obs, allowable) in env.deciding().items():
            if decide is None:
                raise dnl.MissingChoiceError(f"agent {aid} needs a decision function")
            choices[aid] = decide(aid, obs, allowable)
        events, _ = env.step(choices)
        for aid, exp in events:
            experiences.setdefault(aid, []).append(exp)
            if on_experience is not None:
                on_experience(aid, exp)
    return env.result(experiences)


def run_episode(env: RoutingGame, policies: Mapping[int, Mapping[Observation, LinkId]],
                epsilon: float = 0.0, rng: Optional[np.random.Generator] = None,
                fallback: Optional[Callable] = None) -> EpisodeResult:
    """Replay an episode from per-agent policy dictionaries.

    With probability ``epsilon`` a decision is drawn uniformly from the
    allowable set; otherwise the agent's dictionary entry for the current
    observation is used.  Observations missing from the dictionary defer
    to ``fallback(agent_id, obs, allowable, env)``.
    """
    if epsilon and rng is None:
        raise ValueError("epsilon-greedy replay needs an rng")

    def decide(aid, obs, allowable):
        if epsilon and rng.random() < epsilon:
            return allowable[rng.integers(len(allowable))]
        action = policies.get(aid, {}).get(obs)
        if action is None:
            if fallback is None:
                raise KeyError(f"agent {aid} has no policy entry for {obs}")
            action = fallback(aid, obs, allowable, env)
        if action not in allowable:
            raise dnl.IllegalChoiceError(
                f"policy action {action} not allowable at node {obs.node}")
        return action

    return drive_episode(env, decide)
