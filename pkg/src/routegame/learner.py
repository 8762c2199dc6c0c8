"""Tabular and mean-field deep Q-learning for the routing game.

The multi-agent learner keeps one shared action-value network per agent
group (agents with the same destination share a group by default), a
replay buffer per group, and a periodically snapshotted target network
per group.  Exploration is epsilon-greedy over the allowable actions at
the current node.

Greedy decisions evaluate the shared network at a flow estimate per
candidate link: the vehicles currently on it, plus those that committed
to enter it earlier in the same step, plus the agent itself.  The same
estimate is what the expectation over other agents' behavior in the
shared-Q policy rule is replaced with; replayed transitions instead use
the stored mean action.  Agents deciding in the same step are served in
id order, so a link a peer just claimed is already reflected in the next
agent's estimate; that is what lets identical agents with one shared Q
function settle into asymmetric (split) equilibria.
"""

from __future__ import annotations

from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .approximator import MLPParams, QEncoder, forward_batch, init_params, sgd_step
from .game import Experience, Observation, RoutingGame, drive_episode, run_episode
from .network import DemandProfile, LinkId, Network


# -- tabular single-agent learning -------------------------------------------


@dataclass
class TabularQ:
    """State-action values with default 0; states are hashable keys."""

    values: dict = field(default_factory=dict)

    def get(self, state, action) -> float:
        return self.values.get((state, action), 0.0)

    def best(self, state, actions: Sequence[LinkId]) -> float:
        return max((self.get(state, a) for a in actions), default=0.0)


def tabular_q_update(tq: TabularQ, state, action, reward: float,
                     next_state, next_actions: Sequence[LinkId],
                     eta: float, terminal: bool = False) -> float:
    """One-step value update toward ``r + max_a' Q(s', a')`` (undiscounted).

    ``eta`` in (0, 1]; with eta = 1 the entry is replaced outright.
    Returns the updated value.
    """
    if not 0 < eta <= 1:
        raise ValueError("eta must be in (0, 1]")
    bootstrap = 0.0 if terminal else tq.best(next_state, next_actions)
    old = tq.get(state, action)
    new = old + eta * (reward + bootstrap - old)
    tq.values[(state, action)] = new
    return new


def epsilon_greedy(allowable: Sequence[LinkId], q_eval: Callable[[LinkId], float],
                   epsilon: float, rng: np.random.Generator) -> LinkId:
    """Uniform random action with probability epsilon, else the argmax of
    ``q_eval`` with ties broken toward the lowest link id."""
    if not allowable:
        raise ValueError("empty allowable action set")
    if not 0 <= epsilon <= 1:
        raise ValueError("epsilon must be in [0, 1]")
    if epsilon > 0 and rng.random() < epsilon:
        return allowable[int(rng.integers(len(allowable)))]
    return min(allowable, key=lambda a: (-q_eval(a), a))


@dataclass
class TabularResult:
    q: TabularQ
    policy: dict                # node -> link id
    route_nodes: tuple
    total_reward: float
    episodes: int


def train_tabular(net: Network, demand: DemandProfile, model: str, horizon: int,
                  episodes: int = 300, epsilon: float = 1.0, eta: float = 1.0,
                  seed: int = 0) -> TabularResult:
    """Single-agent tabular Q-learning keyed by node.

    Meant for one agent in a deterministic environment, where dropping the
    time component keeps the table small and the dynamics static.  With
    eta = 1 and full exploration the values converge to the exact
    optimal-return recursion.
    """
    if demand.controllable_count() != 1:
        raise ValueError("tabular training expects exactly one controllable agent")
    rng = np.random.default_rng(seed)
    tq = TabularQ()
    env = RoutingGame(net, demand, model, horizon=horizon)

    def decide(aid, obs, allowable):
        return epsilon_greedy(allowable, lambda a: tq.get(obs.node, a), epsilon, rng)

    def absorb(aid, exp: Experience):
        nxt = net.actions(exp.obs_next.node)
        tabular_q_update(tq, exp.obs.node, exp.action, exp.reward,
                         exp.obs_next.node, nxt, eta, terminal=exp.terminal)

    for _ in range(episodes):
        drive_episode(env, decide, on_experience=absorb)

    greedy = drive_episode(
        env, lambda aid, obs, allow: epsilon_greedy(
            allow, lambda a: tq.get(obs.node, a), 0.0, rng))
    exps = greedy.experiences.get(0, [])
    policy = {e.obs.node: e.action for e in exps}
    route = tuple([exps[0].obs.node] + [e.obs_next.node for e in exps]) if exps else ()
    return TabularResult(q=tq, policy=policy, route_nodes=route,
                         total_reward=sum(e.reward for e in exps),
                         episodes=episodes)


# -- replay machinery ----------------------------------------------------------


class ReplayBuffer:
    """Bounded FIFO of experiences with uniform batch sampling."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.items: deque = deque(maxlen=int(capacity))

    def push(self, exp: Experience) -> None:
        self.items.append(exp)

    def __len__(self) -> int:
        return len(self.items)

    def sample(self, rng: np.random.Generator, k: int) -> list:
        """Uniform sample without replacement within the batch."""
        n = len(self.items)
        if n == 0:
            return []
        idx = rng.choice(n, size=min(k, n), replace=False)
        return [self.items[i] for i in idx]


@dataclass
class QGroup:
    """Shared value approximator for one agent group, plus its target copy."""

    group: int
    params: MLPParams
    target_params: MLPParams

    def sync_target(self) -> None:
        self.target_params = self.params.copy()


def td_target(encoder: QEncoder, target_params: MLPParams, exp: Experience,
              next_allowable: Sequence[LinkId],
              abar_by_action: Mapping[LinkId, float]) -> float:
    """Bootstrapped regression target for one replayed transition.

    Terminal transitions return the raw reward; otherwise the target-net
    value of the best next action, each evaluated at its flow estimate, is
    added (undiscounted).
    """
    if exp.terminal or not next_allowable:
        return float(exp.reward)
    rows = encoder.encode_many(
        [(exp.obs_next, a, abar_by_action[a]) for a in next_allowable])
    return float(exp.reward + forward_batch(target_params, rows).max())


def extract_policy(encoder: QEncoder, params: MLPParams, obs: Observation,
                   allowable: Sequence[LinkId],
                   abar_by_action: Mapping[LinkId, float]) -> LinkId:
    """Greedy action at one observation, ties toward the lowest link id."""
    rows = encoder.encode_many([(obs, a, abar_by_action[a]) for a in allowable])
    q = forward_batch(params, rows)
    best = q.max()
    return min(a for a, v in zip(allowable, q) if v >= best - 1e-12)


@dataclass
class PolicyTable:
    """Per-agent observation -> action dictionaries with a value-based
    fallback for observations never visited during the recording rollout."""

    tables: dict                      # agent id -> {Observation: LinkId}
    group_of: dict                    # agent id -> group id
    groups: dict                      # group id -> QGroup
    encoder: QEncoder

    def action(self, agent_id: int, obs: Observation) -> Optional[LinkId]:
        return self.tables.get(agent_id, {}).get(obs)

    def fallback(self, agent_id: int, obs: Observation,
                 allowable: Sequence[LinkId], env: RoutingGame) -> LinkId:
        grp = self.groups[self.group_of[agent_id]]
        est = {a: float(env.flow_estimate(a)) for a in allowable}
        return extract_policy(self.encoder, grp.params, obs, allowable, est)


# -- mean-field multi-agent deep Q-learning -------------------------------------


@dataclass
class TrainConfig:
    episodes: int = 500
    epsilon0: float = 1.0
    epsilon_min: float = 0.02
    epsilon_anneal_frac: float = 0.6   # fraction of the budget spent decaying
    eta0: float = 1e-3
    eta_decay: float = 0.99
    target_period: int = 5             # episodes between target snapshots
    buffer_capacity: int = 50_000
    batch_size: int = 64
    updates_per_episode: int = 10
    hidden: tuple = (64, 64)
    seed: int = 0
    abar_scale: Optional[float] = None
    convergence_window: int = 20
    convergence_rtol: float = 0.01
    convergence_patience: int = 50
    parallel_rollouts: int = 1

    @classmethod
    def from_mapping(cls, raw: Mapping) -> "TrainConfig":
        cfg = cls()
        for k, v in raw.items():
            if not hasattr(cfg, k):
                raise ValueError(f"unknown training option {k!r}")
            setattr(cfg, k, type(getattr(cfg, k))(v) if getattr(cfg, k) is not None else v)
        return cfg


@dataclass
class TrainResult:
    policies: PolicyTable
    groups: dict
    encoder: QEncoder
    trace: list                      # (episode, avg_tt, eps, eta, {group: loss})
    final_avg_travel_time: float
    final_travel_times: dict
    final_routes: dict               # agent id -> link-id tuple of the greedy rollout
    converged_episode: Optional[int]
    episodes_run: int


class TrainingDiverged(RuntimeError):
    pass


def _epsilon_at(cfg: TrainConfig, episode: int) -> float:
    anneal = max(1, int(cfg.episodes * cfg.epsilon_anneal_frac))
    frac = min(1.0, episode / anneal)
    return cfg.epsilon0 + (cfg.epsilon_min - cfg.epsilon0) * frac


def _greedy_decider(env: RoutingGame, groups: dict, group_of: dict,
                    encoder: QEncoder, epsilon: float,
                    rng: np.random.Generator):
    """Decision function for one rollout; flow estimates include the
    vehicles that committed to a link earlier in the same step."""
    pending: dict[LinkId, int] = {}
    last_clock = [-1]

    def decide(aid, obs, allowable):
        if env.clock != last_clock[0]:
            pending.clear()
            last_clock[0] = env.clock
        grp = groups[group_of[aid]]

        def q_eval(action):
            est = env.flow_estimate(action) + pending.get(action, 0)
            x = encoder.encode(obs, action, float(est))
            return forward_batch(grp.params, x[None, :])[0]

        action = epsilon_greedy(allowable, q_eval, epsilon, rng)
        pending[action] = pending.get(action, 0) + 1
        return action

    return decide


def _train_groups(groups: dict, buffers: dict, encoder: QEncoder, net: Network,
                  cfg: TrainConfig, eta: float, rng: np.random.Generator) -> dict:
    losses = {}
    for gid in sorted(groups):
        grp = groups[gid]
        buf = buffers[gid]
        if len(buf) == 0:
            continue
        got = []
        for _ in range(cfg.updates_per_episode):
            batch = buf.sample(rng, cfg.batch_size)
            xs = encoder.encode_many(
                [(e.obs, e.action, float(e.mean_action)) for e in batch])
            targets = np.empty(len(batch))
            rows = []
            spans = []
            for e in batch:
                if e.terminal:
                    spans.append(None)
                    continue
                nxt = net.actions(e.obs_next.node)
                if not nxt:
                    spans.append(None)
                    continue
                spans.append((len(rows), len(nxt)))
                rows.extend((e.obs_next, a, float(e.mean_action)) for a in nxt)
            if rows:
                boot = forward_batch(grp.target_params, encoder.encode_many(rows))
            for i, e in enumerate(batch):
                span = spans[i]
                if span is None:
                    targets[i] = e.reward
                else:
                    lo, n = span
                    targets[i] = e.reward + boot[lo:lo + n].max()
            loss = sgd_step(grp.params, xs, targets, eta)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"group {gid} loss diverged: {loss}")
            got.append(loss)
        if got:
            losses[gid] = float(np.mean(got))
    return losses


def train_mfmadql(net: Network, demand: DemandProfile, model: str, horizon: int,
                  cfg: Optional[TrainConfig] = None,
                  progress: Optional[Callable[[int, float], None]] = None
                  ) -> TrainResult:
    """Mean-field multi-agent deep Q-learning over shared group networks.

    Each episode rolls out epsilon-greedy decisions, stores experiences in
    per-group replay buffers, then takes ``updates_per_episode`` batched
    gradient steps per group against the target networks, which are
    re-snapshotted every ``target_period`` episodes.  Exploration and the
    learning rate decay across episodes.  Training stops early once the
    rolling mean of the episode average travel time stays within
    ``convergence_rtol`` for ``convergence_patience`` consecutive episodes.
    """
    cfg = cfg or TrainConfig()
    rng_explore = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    rng_batch = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    rng_init = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3]))

    scale = cfg.abar_scale or max(1, demand.total_count())
    encoder = QEncoder(net, horizon, float(scale))
    env = RoutingGame(net, demand, model, horizon=horizon)
    group_of = {ag.id: ag.group for ag in env._template if ag.controllable}
    sizes = (encoder.width, *cfg.hidden, 1)
    groups = {}
    buffers = {}
    for gid in demand.groups():
        params = init_params(sizes, rng_init)
        groups[gid] = QGroup(group=gid, params=params, target_params=params.copy())
        buffers[gid] = ReplayBuffer(cfg.buffer_capacity)

    trace = []
    rolling: deque = deque(maxlen=cfg.convergence_window)
    prev_mean = None
    steady = 0
    converged_at = None
    eta = cfg.eta0
    episode = 0

    def absorb(aid, exp):
        buffers[group_of[aid]].push(exp)

    while episode < cfg.episodes:
        block = min(cfg.parallel_rollouts, cfg.episodes - episode) or 1
        results = []
        if block == 1:
            eps = _epsilon_at(cfg, episode)
            decide = _greedy_decider(env, groups, group_of, encoder, eps, rng_explore)
            results.append((eps, drive_episode(env, decide, on_experience=absorb)))
        else:
            # Concurrent rollouts on cloned environments; experiences merge
            # in episode order, so gradient updates see a fixed stream.
            jobs = []
            with ThreadPoolExecutor(max_workers=block) as pool:
                for j in range(block):
                    eps = _epsilon_at(cfg, episode + j)
                    clone = RoutingGame(net, demand, model, horizon=horizon)
                    job_rng = np.random.default_rng(
                        np.random.SeedSequence([cfg.seed, 1, episode + j]))
                    decide = _greedy_decider(clone, groups, group_of, encoder,
                                             eps, job_rng)
                    jobs.append((eps, pool.submit(drive_episode, clone, decide)))
            for eps, fut in jobs:
                res = fut.result()
                for aid in sorted(res.experiences):
                    for exp in res.experiences[aid]:
                        absorb(aid, exp)
                results.append((eps, res))

        for eps, res in results:
            losses = _train_groups(groups, buffers, encoder, net, cfg, eta, rng_batch)
            episode += 1
            eta *= cfg.eta_decay
            if episode % cfg.target_period == 0:
                for grp in groups.values():
                    grp.sync_target()
            trace.append((episode, res.avg_travel_time, eps, eta, losses))
            if progress is not None:
                progress(episode, res.avg_travel_time)

            rolling.append(res.avg_travel_time)
            anneal_end = int(cfg.episodes * cfg.epsilon_anneal_frac)
            if len(rolling) == rolling.maxlen and episode > anneal_end:
                # Stability during the exploration anneal does not count:
                # a random policy also produces a steady average.
                mean = float(np.mean(rolling))
                if prev_mean is not None and abs(mean - prev_mean) <= (
                        cfg.convergence_rtol * max(1e-9, abs(prev_mean))):
                    steady += 1
                else:
                    steady = 0
                prev_mean = mean
                if steady >= cfg.convergence_patience and converged_at is None:
                    converged_at = episode
        if converged_at is not None:
            break

    # Final greedy rollout: records the realized policy dictionaries.
    tables: dict[int, dict] = {aid: {} for aid in group_of}
    decide_greedy = _greedy_decider(env, groups, group_of, encoder, 0.0, rng_explore)

    def record(aid, obs, allowable):
        action = decide_greedy(aid, obs, allowable)
        tables[aid][obs] = action
        return action

    final = drive_episode(env, record)
    policies = PolicyTable(tables=tables, group_of=group_of, groups=groups,
                           encoder=encoder)
    final_routes = {aid: tuple(e.action for e in exps)
                    for aid, exps in sorted(final.experiences.items())}
    return TrainResult(
        policies=policies, groups=groups, encoder=encoder, trace=trace,
        final_avg_travel_time=final.avg_travel_time,
        final_travel_times=final.travel_times,
        final_routes=final_routes,
        converged_episode=converged_at, episodes_run=episode)


def replay_with_policies(net: Network, demand: DemandProfile, model: str,
                         horizon: int, policies: PolicyTable) -> dict:
    """Deterministic replay of learned policies; returns per-agent returns."""
    env = RoutingGame(net, demand, model, horizon=horizon)
    res = run_episode(env, policies.tables, fallback=policies.fallback)
    return {aid: sum(e.reward for e in exps)
            for aid, exps in sorted(res.experiences.items())}


def unilateral_deviation_return(net: Network, demand: DemandProfile, model: str,
                                horizon: int, policies: PolicyTable,
                                agent_id: int) -> float:
    """Return of ``agent_id`` when its first recorded action is flipped to
    another allowable link while everyone else replays their policy."""
    table = dict(policies.tables[agent_id])
    if not table:
        raise ValueError(f"agent {agent_id} has no recorded decisions")
    first_obs = min(table, key=lambda o: o.time)
    allowable = net.actions(first_obs.node)
    others = [a for a in allowable if a != table[first_obs]]
    if not others:
        raise ValueError(f"agent {agent_id} has a single allowable first action")
    table[first_obs] = others[0]
    forked = dict(policies.tables)
    forked[agent_id] = table
    env = RoutingGame(net, demand, model, horizon=horizon)
    res = run_episode(env, forked, fallback=policies.fallback)
    return sum(e.reward for e in res.experiences.get(agent_id, []))
