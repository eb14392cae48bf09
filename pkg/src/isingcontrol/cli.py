"""Command-line entry point: ``python -m isingcontrol <subcommand> ...``.

Every subcommand accepts ``--config FILE`` (JSON or YAML, same layout as
``Experiment.to_dict()``); explicit flags override values from the file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import yaml

from .control import CONTROLLER_KINDS
from .harness.coupling import ProtocolError, serve_stdio, serve_tcp
from .harness.experiment import Experiment, run_experiment, summary_csv
from .harness.sweeps import sweep_generation_rate, sweep_horizon, sweep_network_size
from .ising import read_instance
from .solvers import SOLVERS, SolverConfig, solve


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def load_config(path: str | None) -> dict:
    if not path:
        return {}
    text = Path(path).read_text()
    data = yaml.safe_load(text) if Path(path).suffix in (".yaml", ".yml") else json.loads(text)
    if not isinstance(data, dict):
        raise SystemExit(f"{path}: top level must be a mapping")
    return data


def _add_solver_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("solver")
    g.add_argument("--solver", choices=sorted(SOLVERS), help="Ising minimizer (default sa)")
    g.add_argument("--num-reads", type=int)
    g.add_argument("--sa-sweeps", type=int)
    g.add_argument("--beta-range", type=_floats, metavar="B0,B1")
    g.add_argument("--solver-seed", type=int)


def _add_experiment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON or YAML experiment file")
    g = p.add_argument_group("network")
    g.add_argument("--rows", type=int)
    g.add_argument("--cols", type=int)
    g.add_argument("--spacing", type=float)
    g.add_argument("--network", help="network JSON file (overrides the lattice)")
    g = p.add_argument_group("simulation")
    g.add_argument("--rate", type=float, help="vehicles generated per second")
    g.add_argument("--duration", type=int, help="simulated seconds")
    g.add_argument("--seeds", type=_ints, metavar="S1,S2,...")
    g.add_argument("--arrival", choices=("road_end", "signal"))
    g.add_argument("--saturation-flow", type=float)
    g = p.add_argument_group("controller")
    g.add_argument("--controller", choices=CONTROLLER_KINDS)
    g.add_argument("--tau", type=int)
    g.add_argument("--kh", type=int, help="prediction horizon in control cycles")
    g.add_argument("--model-convention", choices=("consistent", "doubled"))
    g.add_argument("--turning", choices=("routes", "online"))
    _add_solver_flags(p)
    p.add_argument("--output", help="directory for CSV output")


def _pick(args, **names) -> dict:
    return {field: getattr(args, attr) for field, attr in names.items()
            if getattr(args, attr, None) is not None}


def build_experiment(args) -> Experiment:
    exp = Experiment.from_dict(load_config(args.config))
    net_kw = _pick(args, rows="rows", cols="cols", spacing="spacing", file="network")
    sim_kw = _pick(args, generation_rate="rate", duration="duration", arrival="arrival",
                   saturation_flow="saturation_flow")
    ctrl_kw = _pick(args, kind="controller", tau="tau", k_h="kh", model_convention="model_convention")
    solver_kw = _pick(args, kind="solver", num_reads="num_reads", sa_sweeps="sa_sweeps",
                      beta_range="beta_range", seed="solver_seed")
    if "beta_range" in solver_kw:
        solver_kw["beta_range"] = tuple(solver_kw["beta_range"])
    ctrl = replace(exp.controller, solver=replace(exp.controller.solver, **solver_kw), **ctrl_kw)
    top = _pick(args, seeds="seeds", output="output", turning="turning")
    if "seeds" in top:
        top["seeds"] = tuple(top["seeds"])
    return replace(exp, network=replace(exp.network, **net_kw), sim=replace(exp.sim, **sim_kw),
                   controller=ctrl, **top)


def _emit(rows: list[dict]) -> None:
    sys.stdout.write(summary_csv(rows))


def cmd_run(args) -> int:
    exp = build_experiment(args)
    trace = run_experiment(exp, audit=args.audit)
    _emit(trace.summary())
    return 0


def cmd_sweep_rate(args) -> int:
    exp = build_experiment(args)
    _emit(sweep_generation_rate(exp, args.rates, args.controllers, args.cache, args.workers))
    return 0


def cmd_sweep_size(args) -> int:
    exp = build_experiment(args)
    _emit(sweep_network_size(exp, args.sizes, args.scaled_rates, args.cache, args.workers))
    return 0


def cmd_sweep_horizon(args) -> int:
    exp = build_experiment(args)
    _emit(sweep_horizon(exp, args.horizons, args.cache, args.workers))
    return 0


def cmd_solve(args) -> int:
    instance = read_instance(args.instance)
    kw = _pick(args, kind="solver", num_reads="num_reads", sa_sweeps="sa_sweeps",
               beta_range="beta_range", seed="solver_seed")
    if "beta_range" in kw:
        kw["beta_range"] = tuple(kw["beta_range"])
    result = solve(instance, SolverConfig(**kw))
    print(json.dumps({"energy": result.best_energy, "sigma": [int(s) for s in result.best_sigma],
                      "restarts": result.restarts_used, "wall_time": result.wall_time}))
    return 0


def cmd_couple(args) -> int:
    exp = build_experiment(args)
    net = exp.network.build()
    ctrl = exp.controller
    try:
        if args.tcp:
            host, _, port = args.tcp.rpartition(":")
            serve_tcp(net, ctrl, exp.sim.saturation_flow, host or "127.0.0.1", int(port),
                      timeout=args.timeout, turning=exp.turning,
                      on_listen=lambda p: print(f"listening on port {p}", file=sys.stderr, flush=True))
        else:
            serve_stdio(net, ctrl, exp.sim.saturation_flow, timeout=args.timeout, turning=exp.turning)
    except ProtocolError as exc:
        print(f"coupling stopped: {exc}", file=sys.stderr)
        return 2
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="isingcontrol",
                                     description="Ising-based model predictive traffic signal control")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment over its seeds")
    _add_experiment_flags(p)
    p.add_argument("--audit", action="store_true", help="check vehicle conservation every step")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep-rate", help="sweep the vehicle generation rate")
    _add_experiment_flags(p)
    p.add_argument("--rates", type=_floats, required=True)
    p.add_argument("--controllers", type=lambda s: s.split(","), default=list(CONTROLLER_KINDS))
    p.set_defaults(func=cmd_sweep_rate)

    p = sub.add_parser("sweep-size", help="sweep lattice size at fixed scaled rates")
    _add_experiment_flags(p)
    p.add_argument("--sizes", type=_ints, required=True, help="lattice side lengths")
    p.add_argument("--scaled-rates", type=_floats, required=True)
    p.set_defaults(func=cmd_sweep_size)

    p = sub.add_parser("sweep-horizon", help="sweep the prediction horizon")
    _add_experiment_flags(p)
    p.add_argument("--horizons", type=_ints, required=True)
    p.set_defaults(func=cmd_sweep_horizon)

    for p in (sub.choices["sweep-rate"], sub.choices["sweep-size"], sub.choices["sweep-horizon"]):
        p.add_argument("--cache", help="directory of finished cells (makes the sweep resumable)")
        p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("solve", help="minimize an Ising instance file")
    p.add_argument("instance")
    _add_solver_flags(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("couple", help="serve signal decisions to an external simulator")
    _add_experiment_flags(p)
    p.add_argument("--tcp", metavar="[HOST:]PORT", help="listen on TCP instead of stdio")
    p.add_argument("--timeout", type=float, default=None, help="seconds to wait for each message")
    p.set_defaults(func=cmd_couple)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
