"""Command-line experiment harness.

Subcommands:

* ``simulate`` -- load the network at fixed proportions (or replay a policy
  dump) and write per-step link traces and per-vehicle travel times.
* ``train``    -- run the multi-agent learner; write the convergence trace
  and the learned policy dictionaries.
* ``baseline`` -- run the iterative fixed-point solver; write per-iteration
  route costs/flows and the final proportions.
* ``compare``  -- run both and report the equilibrium gap and wall-clock
  times.

Every command is reproducible: with a fixed config and seed the output
files are byte-identical across runs (single-threaded mode).  Exit codes:
0 success, 1 runtime/convergence failure, 2 usage or config errors.
Set ``ROUTEGAME_LOG`` to change log verbosity (default WARNING).
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np

from . import baseline as bl
from .game import RoutingGame, drive_episode, run_episode, Observation
from .learner import TrainConfig, TrainingDiverged, train_mfmadql
from .network import (ConfigError, DemandEntry, DemandProfile, parse_config,
                      validate_discretization)

log = logging.getLogger("routegame")

BUNDLED = ("braess_single", "braess_two", "simple_due", "simple_spillback", "ow")


def bundled_config_text(name: str) -> str:
    return resources.files("routegame.configs").joinpath(f"{name}.toml").read_text()


def _load(path_or_name: str):
    p = Path(path_or_name)
    if p.exists():
        text = p.read_text()
    elif path_or_name in BUNDLED:
        text = bundled_config_text(path_or_name)
    else:
        raise ConfigError(f"config {path_or_name!r}: no such file or bundled name "
                          f"(bundled: {', '.join(BUNDLED)})")
    return parse_config(text)


def _fmt(x) -> str:
    if isinstance(x, float):
        return "%.10g" % x
    return str(x)


def _write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _route_str(links) -> str:
    return "-".join(str(l) for l in links)


def _proportional_order(counts) -> list[int]:
    """Deterministic interleave of route labels matching the counts
    (quota method): at every position pick the most under-served route."""
    total = sum(counts)
    out = []
    assigned = [0] * len(counts)
    for i in range(total):
        deficits = [(counts[r] * (i + 1) / total) - assigned[r]
                    for r in range(len(counts))]
        pick = max(range(len(counts)), key=lambda r: (deficits[r], -r))
        assigned[pick] += 1
        out.append(pick)
    return out


def _scripted_from_proportions(net, demand, shares_by_key, route_sets):
    entries = []
    for entry in demand.entries:
        if entry.route is not None:
            entries.append(entry)
            continue
        key = (entry.origin, entry.destination, entry.time)
        routes = route_sets[(entry.origin, entry.destination)].routes
        shares = shares_by_key.get(key)
        if shares is None:
            raise ConfigError(f"no proportions for od/time {key}")
        counts = bl.largest_remainder(shares, entry.count)
        for ridx in _proportional_order(counts):
            entries.append(DemandEntry(
                time=entry.time, origin=entry.origin,
                destination=entry.destination, count=1, group=entry.group,
                route=routes[ridx].links))
    return DemandProfile(tuple(entries))


def _read_proportions(path: Path, route_sets):
    shares: dict = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (int(row["origin"]), int(row["destination"]), int(row["time"]))
            od = (key[0], key[1])
            routes = [r.links for r in route_sets[od].routes]
            want = tuple(int(x) for x in row["route"].split("-"))
            if want not in routes:
                raise ConfigError(f"proportions route {row['route']} not among "
                                  f"enumerated routes of od {od}")
            shares.setdefault(key, [0.0] * len(routes))
            shares[key][routes.index(want)] = float(row["share"])
    return shares


def _read_policy(path: Path):
    tables: dict = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            obs = Observation(int(row["node"]), int(row["time"]))
            tables.setdefault(int(row["agent"]), {})[obs] = int(row["action"])
    return tables


def _trace_rows(env_trace):
    for (t, lid, nup, ndn, q, moved) in env_trace:
        yield (t, lid, nup, ndn, q, moved)


# -- subcommands ---------------------------------------------------------------


def cmd_simulate(args) -> int:
    net, demand, exp = _load(args.config)
    model = args.model or exp.model
    seed = exp.seed if args.seed is None else args.seed
    out = Path(args.out)

    problems = validate_discretization(net) if model != "latency" else []
    if problems:
        raise ConfigError("; ".join(problems))

    if args.policy:
        tables = _read_policy(Path(args.policy))
        env = RoutingGame(net, demand, model, exp.horizon, seed=seed,
                          record_trace=True)
        res = run_episode(env, tables)
    else:
        route_sets = {}
        for entry in demand.entries:
            od = (entry.origin, entry.destination)
            if entry.route is None and od not in route_sets:
                route_sets[od] = bl.enumerate_routes(
                    net, od, int(exp.baseline.get("max_routes", 8)))
        if args.proportions:
            shares = _read_proportions(Path(args.proportions), route_sets)
        else:  # uniform split over enumerated routes
            shares = {}
            for entry in demand.entries:
                if entry.route is None:
                    od = (entry.origin, entry.destination)
                    n = len(route_sets[od].routes)
                    shares[(entry.origin, entry.destination, entry.time)] = \
                        [1.0 / n] * n
        scripted = _scripted_from_proportions(net, demand, shares, route_sets)
        env = RoutingGame(net, scripted, model, exp.horizon, seed=seed,
                          record_trace=True)
        res = drive_episode(env, None)

    _write_csv(out / "links.csv",
               ["step", "link", "n_up", "n_down", "queue_length", "transfers"],
               _trace_rows(res.trace))
    _write_csv(out / "vehicles.csv", ["vehicle", "travel_time"],
               sorted(res.travel_times.items()))
    print(f"simulate: {len(res.travel_times)} vehicles, "
          f"avg travel time {_fmt(res.avg_travel_time)}, "
          f"{len(res.timed_out)} timed out -> {out}")
    return 0


def _train(net, demand, exp, args):
    raw = dict(exp.training)
    if args.episodes is not None:
        raw["episodes"] = args.episodes
    if args.seed is not None:
        raw["seed"] = args.seed
    elif "seed" not in raw:
        raw["seed"] = exp.seed
    if args.parallel_rollouts is not None:
        raw["parallel_rollouts"] = args.parallel_rollouts
    cfg = TrainConfig.from_mapping(raw)
    model = args.model or exp.model
    if model != "latency":
        problems = validate_discretization(net)
        if problems:
            raise ConfigError("; ".join(problems))
    t0 = time.monotonic()
    result = train_mfmadql(net, demand, model, exp.horizon, cfg=cfg)
    wall = time.monotonic() - t0
    return result, cfg, wall, model


def cmd_train(args) -> int:
    net, demand, exp = _load(args.config)
    result, cfg, wall, _ = _train(net, demand, exp, args)
    out = Path(args.out)
    rows = []
    for (ep, avg, epsv, eta, losses) in result.trace:
        mean_loss = float(np.mean(list(losses.values()))) if losses else math.nan
        rows.append((ep, avg, epsv, eta, mean_loss))
    _write_csv(out / "convergence.csv",
               ["episode", "avg_travel_time", "epsilon", "eta", "loss"], rows)
    policy_rows = []
    for aid in sorted(result.policies.tables):
        for obs in sorted(result.policies.tables[aid],
                          key=lambda o: (o.time, o.node)):
            policy_rows.append((aid, obs.node, obs.time,
                                result.policies.tables[aid][obs]))
    _write_csv(out / "policy.csv", ["agent", "node", "time", "action"], policy_rows)
    print(f"train: {result.episodes_run} episodes in {wall:.1f}s, "
          f"converged at {result.converged_episode}, "
          f"final greedy avg travel time {_fmt(result.final_avg_travel_time)} -> {out}")
    return 0


def _run_baseline(net, demand, exp, args):
    opts = dict(exp.baseline)
    model = args.model or exp.model
    if model != "latency":
        problems = validate_discretization(net)
        if problems:
            raise ConfigError("; ".join(problems))
    t0 = time.monotonic()
    result = bl.solve_due_fixed_point(
        net, model, demand, horizon=exp.horizon,
        seed=exp.seed if args.seed is None else args.seed,
        eta=float(opts.get("eta", 0.3)), a=float(opts.get("a", 1.0)),
        tolerance=float(opts.get("tolerance", 0.01)),
        max_iterations=int(args.iterations or opts.get("max_iterations", 200)),
        max_routes=int(opts.get("max_routes", 8)),
        replications=int(opts.get("replications", 3)))
    wall = time.monotonic() - t0
    return result, wall


def _write_baseline(out: Path, result) -> None:
    rows = []
    for (it, key, costs, counts, avg, gap) in result.trace:
        routes = result.route_sets[(key[0], key[1])].routes
        for route, cost, count in zip(routes, costs, counts):
            rows.append((it, key[0], key[1], key[2], _route_str(route.links),
                         cost, count, avg, gap))
    _write_csv(out / "iterations.csv",
               ["iteration", "origin", "destination", "time", "route",
                "cost", "count", "avg_travel_time", "gap"], rows)
    rows = []
    for key in sorted(result.profile.shares):
        routes = result.route_sets[(key[0], key[1])].routes
        for route, share, count, cost in zip(
                routes, result.profile.shares[key], result.counts[key],
                result.costs[key]):
            rows.append((key[0], key[1], key[2], _route_str(route.links),
                         share, count, cost))
    _write_csv(out / "proportions.csv",
               ["origin", "destination", "time", "route", "share", "count",
                "cost"], rows)


def cmd_baseline(args) -> int:
    net, demand, exp = _load(args.config)
    result, wall = _run_baseline(net, demand, exp, args)
    out = Path(args.out)
    _write_baseline(out, result)
    print(f"baseline: {result.iterations} iterations in {wall:.1f}s, "
          f"converged={result.converged} gap={_fmt(result.gap)}, "
          f"avg travel time {_fmt(result.avg_travel_time)} -> {out}")
    return 0 if result.converged else 1


def cmd_compare(args) -> int:
    net, demand, exp = _load(args.config)
    base, base_wall = _run_baseline(net, demand, exp, args)
    result, cfg, marl_wall, model = _train(net, demand, exp, args)
    out = Path(args.out)
    _write_baseline(out, base)

    base_avg = base.avg_travel_time
    marl_avg = result.final_avg_travel_time
    gap = abs(marl_avg - base_avg)
    rel = gap / base_avg if base_avg else math.inf
    rows = [
        ("model", model),
        ("baseline_avg_travel_time", base_avg),
        ("marl_avg_travel_time", marl_avg),
        ("abs_gap", gap),
        ("rel_gap", rel),
        ("baseline_iterations", base.iterations),
        ("baseline_converged", base.converged),
        ("baseline_wall_s", base_wall),
        ("marl_episodes", result.episodes_run),
        ("marl_converged_episode", result.converged_episode),
        ("marl_wall_s", marl_wall),
    ]
    # Link-split comparison: vehicles per route, baseline vs learned rollout.
    marl_routes: dict = {}
    for aid, links in result.final_routes.items():
        marl_routes[links] = marl_routes.get(links, 0) + 1
    for key in sorted(base.counts):
        routes = base.route_sets[(key[0], key[1])].routes
        for route, count in zip(routes, base.counts[key]):
            rows.append((f"split_baseline[{_route_str(route.links)}]", count))
            rows.append((f"split_marl[{_route_str(route.links)}]",
                         marl_routes.get(route.links, 0)))
    _write_csv(out / "report.csv", ["metric", "value"], rows)
    print(f"compare: baseline {_fmt(base_avg)} vs marl {_fmt(marl_avg)} "
          f"(rel gap {rel:.2%}) -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="routegame",
        description="Routing-game experiments over discrete-time loading models")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True,
                       help="config file path or bundled name "
                            f"({', '.join(BUNDLED)})")
        p.add_argument("--model", choices=["pq", "sq", "ctm", "ltm", "latency"],
                       help="override the config's loading model")
        p.add_argument("--seed", type=int, help="override the config's seed")
        p.add_argument("--out", default="out", help="output directory")

    p = sub.add_parser("simulate", help="fixed-choice network loading")
    common(p)
    p.add_argument("--proportions", help="CSV of route shares (see baseline output)")
    p.add_argument("--policy", help="CSV policy dump (see train output)")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("train", help="mean-field multi-agent Q-learning")
    common(p)
    p.add_argument("--episodes", type=int, help="episode budget override")
    p.add_argument("--parallel-rollouts", type=int, dest="parallel_rollouts",
                   help="rollouts per training round (determinism is only "
                        "guaranteed at 1)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("baseline", help="iterative fixed-point equilibrium")
    common(p)
    p.add_argument("--iterations", type=int, help="iteration budget override")
    p.set_defaults(fn=cmd_baseline)

    p = sub.add_parser("compare", help="run both solvers and report the gap")
    common(p)
    p.add_argument("--episodes", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--parallel-rollouts", type=int, dest="parallel_rollouts")
    p.set_defaults(fn=cmd_compare)
    return ap


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("ROUTEGAME_LOG", "WARNING").upper())
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDiverged, ValueError, RuntimeError, OSError) as exc:
        log.debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
