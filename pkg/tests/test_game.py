import numpy as np
import pytest

from routegame import dnl
from routegame.game import (Observation, RoutingGame, drive_episode,
                            reward_of_traversal, run_episode)
from routegame.network import DemandProfile, parse_config


def drive_with_map(env, node_to_action):
    return drive_episode(env, lambda aid, obs, allow: node_to_action[obs.node])


def test_reset_two_agents_at_origin(braess_two):
    net, demand, _ = braess_two
    env = RoutingGame(net, demand, "latency", horizon=200)
    obs = env.reset()
    assert obs == {0: Observation(0, 0), 1: Observation(0, 0)}


def test_reset_empty_demand_terminal(braess_two):
    net, _, _ = braess_two
    env = RoutingGame(net, DemandProfile(()), "latency", horizon=50)
    assert env.reset() == {}
    assert env.done


def test_reset_places_all_on_origin_dummy(simple_due):
    net, demand, _ = simple_due
    env = RoutingGame(net, demand, "ltm", horizon=80)
    obs = env.reset()
    assert len(obs) == 50
    assert set(obs.values()) == {Observation(1, 0)}
    waiting, on_net, done, unplaced = env.census()
    assert (waiting, on_net, done, unplaced) == (50, 0, 0, 0)


def test_joint_action_split_matches_hand_values(braess_two):
    net, demand, _ = braess_two

    def decide(aid, obs, allow):
        if obs.node == 0:
            return 1 if aid == 0 else 2
        return {2: 4, 1: 5}[obs.node]

    env = RoutingGame(net, demand, "latency", horizon=200)
    res = drive_episode(env, decide)
    first = {aid: exps[0] for aid, exps in res.experiences.items()}
    assert first[0].obs_next == Observation(1, 45)
    assert first[0].reward == -45 and first[0].mean_action == 1
    assert first[1].obs_next == Observation(2, 40)
    assert first[1].reward == -40 and first[1].mean_action == 1
    assert res.travel_times == {0: 85, 1: 85}


def test_joint_action_same_link_doubles_time(braess_two):
    net, demand, _ = braess_two
    env = RoutingGame(net, demand, "latency", horizon=200)
    res = drive_with_map(env, {0: 2, 2: 4, 1: 5})
    for aid in (0, 1):
        first = res.experiences[aid][0]
        assert first.obs_next == Observation(2, 80)
        assert first.reward == -80
        assert first.mean_action == 2
        assert sum(e.reward for e in res.experiences[aid]) == -125


def test_lone_agent_mean_action_is_one(braess_single):
    net, demand, _ = braess_single
    env = RoutingGame(net, demand, "latency", horizon=200)
    res = drive_with_map(env, {0: 2, 2: 3, 1: 5})
    assert all(e.mean_action == 1 for e in res.experiences[0])


def test_reward_of_traversal():
    assert reward_of_traversal(0, 45) == -45
    assert reward_of_traversal(7, 7) == 0
    with pytest.raises(ValueError):
        reward_of_traversal(5, 4)


def test_rewards_sum_to_negative_travel_time(simple_due):
    net, demand, _ = simple_due
    rng = np.random.default_rng(4)
    env = RoutingGame(net, demand, "ltm", horizon=80)
    res = drive_episode(
        env, lambda aid, obs, allow: allow[rng.integers(len(allow))])
    for aid, exps in res.experiences.items():
        assert exps[-1].terminal
        assert sum(e.reward for e in exps) == -res.travel_times[aid]
        assert exps[0].obs.time == 0  # departure step


def test_mean_action_bounds_and_action_closure(simple_spillback):
    net, demand, _ = simple_spillback
    rng = np.random.default_rng(11)
    env = RoutingGame(net, demand, "ltm", horizon=150)
    res = drive_episode(
        env, lambda aid, obs, allow: allow[rng.integers(len(allow))])
    total = demand.total_count()
    for exps in res.experiences.values():
        for e in exps:
            assert 1 <= e.mean_action <= total
            assert e.action in net.actions(e.obs.node)


def test_deterministic_episodes(simple_due):
    net, demand, _ = simple_due

    def run():
        rng = np.random.default_rng(123)
        env = RoutingGame(net, demand, "ltm", horizon=80, record_trace=True)
        res = drive_episode(
            env, lambda aid, obs, allow: allow[rng.integers(len(allow))])
        return res.travel_times, res.trace, {
            aid: [(e.obs, e.action, e.obs_next, e.reward, e.mean_action)
                  for e in exps]
            for aid, exps in res.experiences.items()}

    assert run() == run()


def test_standing_choice_persists_while_blocked(simple_due):
    net, demand, _ = simple_due
    env = RoutingGame(net, demand, "ltm", horizon=80)
    env.reset()
    asked = {}
    while not env.done:
        dec = env.deciding()
        for aid, (obs, allow) in dec.items():
            asked.setdefault(aid, []).append(obs)
        env.step({aid: 5 if obs.node == 3 else allow[0]
                  for aid, (obs, allow) in dec.items()})
    # every agent is asked exactly once per visited node: no re-asking while
    # waiting on the origin dummy or in the diverge queue
    for aid, obs_list in asked.items():
        nodes = [o.node for o in obs_list]
        assert len(nodes) == len(set(nodes))


def test_step_rejects_illegal_and_missing_choices(braess_two):
    net, demand, _ = braess_two
    env = RoutingGame(net, demand, "latency", horizon=200)
    env.reset()
    with pytest.raises(dnl.IllegalChoiceError):
        env.step({0: 5, 1: 1})       # link 5 does not leave node 0
    env = RoutingGame(net, demand, "latency", horizon=200)
    env.reset()
    with pytest.raises(dnl.MissingChoiceError):
        env.step({0: 1})             # agent 1 is deciding too


def test_timeout_penalty_and_travel_time():
    cfg = """
[network]
nodes = [10, 0, 1, 11]

[[network.links]]
id = 1
tail = 10
head = 0
dummy = true
qmax = 1

[[network.links]]
id = 2
tail = 0
head = 1
L = 0.8
v = 0.2
w = 0.1
qmax = 1
kj = 10

[[network.links]]
id = 3
tail = 1
head = 11
dummy = true

[[demand.entries]]
time = 0
origin = 0
destination = 1
count = 3

[experiment]
horizon = 3
model = "ltm"
"""
    net, demand, _ = parse_config(cfg)
    env = RoutingGame(net, demand, "ltm", horizon=3)
    res = drive_episode(env, lambda aid, obs, allow: allow[0])
    # nobody can finish a 4-step link within 3 steps
    assert res.travel_times == {0: 3, 1: 3, 2: 3}
    assert res.timed_out == (0, 1, 2)
    for aid, exps in res.experiences.items():
        last = exps[-1]
        assert last.terminal
        assert last.reward == -(3 - last.obs.time) - 3


def test_run_episode_replay_and_epsilon(braess_two):
    net, demand, _ = braess_two
    policies = {
        0: {Observation(0, 0): 1, Observation(1, 45): 5},
        1: {Observation(0, 0): 2, Observation(2, 40): 4},
    }
    env = RoutingGame(net, demand, "latency", horizon=200)
    res = run_episode(env, policies)
    assert res.travel_times == {0: 85, 1: 85}

    # epsilon = 1: pure exploration, needs no dictionary at all
    env = RoutingGame(net, demand, "latency", horizon=200)
    res = run_episode(env, {}, epsilon=1.0, rng=np.random.default_rng(0))
    assert set(res.travel_times) == {0, 1}

    env = RoutingGame(net, demand, "latency", horizon=200)
    with pytest.raises(KeyError):
        run_episode(env, {0: {}, 1: {}})


def test_flow_estimate_counts_commitments(simple_due):
    net, demand, _ = simple_due
    env = RoutingGame(net, demand, "ltm", horizon=80)
    env.reset()
    assert env.flow_estimate(2) == 1           # empty link: just the entrant
    dec = env.deciding()
    env.step({aid: allow[0] for aid, (obs, allow) in dec.items()})
    # 20 vehicles entered link 2, 30 still committed to it on the dummy
    assert env.occupancy(2) == 20
    assert env.flow_estimate(2) == 20 + 30 + 1


def test_conservation_census_every_step(simple_spillback):
    net, demand, _ = simple_spillback
    rng = np.random.default_rng(2)
    env = RoutingGame(net, demand, "ltm", horizon=150)
    env.reset()
    total = demand.total_count()
    while not env.done:
        waiting, on_net, done, unplaced = env.census()
        assert waiting + on_net + done + unplaced == total
        dec = env.deciding()
        env.step({aid: allow[rng.integers(len(allow))]
                  for aid, (obs, allow) in dec.items()})
