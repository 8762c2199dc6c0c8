"""Routing-game equilibria over discrete-time traffic loading models.

Public surface: network/config handling, the four loading models plus the
latency environment wrapped as a multi-agent game, a mean-field deep
Q-learning solver, and an iterative fixed-point equilibrium baseline.
"""

from .network import (CapacitySchedule, ConfigError, DemandEntry, DemandProfile,
                      ExperimentSpec, Latency, Link, Network, load_network,
                      parse_config, serialize_config, serialize_network,
                      validate_discretization)
from .dnl import (LinkState, TransitFlow, dnl_step, init_states, node_transfer,
                  queue_length, receiving_flow, receiving_flow_ltm,
                  receiving_flow_pq, receiving_flow_sq, sending_flow,
                  sending_flow_ltm, cell_receiving, cell_sending)
from .game import (Experience, EpisodeResult, Observation, RoutingGame,
                   drive_episode, reward_of_traversal, run_episode)
from .approximator import (MLPParams, QEncoder, forward, forward_batch,
                           gradient_check, init_params, sgd_step)
from .learner import (PolicyTable, QGroup, ReplayBuffer, TabularQ, TrainConfig,
                      TrainResult, epsilon_greedy, extract_policy, td_target,
                      tabular_q_update, train_mfmadql, train_tabular,
                      replay_with_policies, unilateral_deviation_return)
from .baseline import (FixedPointResult, ProportionProfile, Route, RouteSet,
                       enumerate_routes, gawron_update, largest_remainder,
                       measure_route_costs, relative_gap, solve_due_fixed_point)

__version__ = "0.1.0"
