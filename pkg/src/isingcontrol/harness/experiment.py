"""Single experiments: run a controller against the simulator for several seeds."""

from __future__ import annotations

import csv
import io
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from ..control import ControllerConfig
from ..mesosim import SimConfig, Simulator, StepMetrics
from ..network import RoadNetwork, generate_lattice, load_network
from ..solvers import SolverConfig
from .session import ControlSession

INDICATORS = ("mean_velocity", "waiting_ratio", "co2_rate", "squared_bias")
TRACE_COLUMNS = ("seed", "t", "mean_velocity", "waiting_ratio", "co2_rate", "squared_bias",
                 "vehicle_count")
SUMMARY_COLUMNS = ("controller", "rate", "scaled_rate", "N", "k_h", "solver", "seed_count",
                   "indicator", "mean", "stderr")


@dataclass(frozen=True)
class NetworkSpec:
    rows: int = 5
    cols: int = 5
    spacing: float = 100.0
    file: str | None = None

    def build(self) -> RoadNetwork:
        if self.file:
            return load_network(self.file)
        return generate_lattice(self.rows, self.cols, self.spacing)


@dataclass(frozen=True)
class Experiment:
    network: NetworkSpec = field(default_factory=NetworkSpec)
    sim: SimConfig = field(default_factory=SimConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    seeds: tuple[int, ...] = (1,)
    output: str | None = None
    turning: str = "routes"

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.seeds:
            raise ValueError("at least one replication seed is required")
        if self.sim.duration < self.controller.tau:
            raise ValueError("duration must cover at least one control cycle")
        if self.sim.control_cycle != self.controller.tau:
            object.__setattr__(self, "sim", replace(self.sim, control_cycle=self.controller.tau))

    def for_seed(self, seed: int) -> tuple[SimConfig, ControllerConfig]:
        ctrl = replace(self.controller, seed=seed,
                       solver=replace(self.controller.solver, seed=seed))
        return replace(self.sim, seed=seed), ctrl

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "Experiment":
        data = dict(data)
        ctrl = dict(data.get("controller", {}))
        if "solver" in ctrl:
            solver = dict(ctrl["solver"])
            if "beta_range" in solver:
                solver["beta_range"] = tuple(solver["beta_range"])
            ctrl["solver"] = SolverConfig(**solver)
        if ctrl.get("Q") is not None:
            ctrl["Q"] = tuple(ctrl["Q"])
        return cls(
            network=NetworkSpec(**data.get("network", {})),
            sim=SimConfig(**data.get("sim", {})),
            controller=ControllerConfig(**ctrl),
            seeds=tuple(data.get("seeds", (1,))),
            output=data.get("output"),
            turning=data.get("turning", "routes"),
        )


@dataclass
class RunResult:
    seed: int
    rows: list[StepMetrics]
    solve_times: list[float]
    conservation_checked: bool = False

    def time_average(self) -> dict[str, float]:
        return {k: float(np.mean([getattr(r, k) for r in self.rows])) for k in INDICATORS}


@dataclass
class MetricTrace:
    experiment: Experiment
    runs: list[RunResult]

    def summary(self) -> list[dict]:
        return summarize(self.experiment, [r.time_average() for r in self.runs])


def run_single(net: RoadNetwork, sim_config: SimConfig, ctrl_config: ControllerConfig,
               audit: bool = False, turning: str = "routes", session: ControlSession | None = None,
               sim: Simulator | None = None) -> RunResult:
    """One replication: controller update at control instants, then a 1 s step."""
    sim = sim or Simulator(net, sim_config, Q=ctrl_config.Q)
    session = session or ControlSession(net, ctrl_config, sim_config.saturation_flow,
                                        routes=sim.routes, turning=turning)
    tau = ctrl_config.tau
    exited = np.zeros(net.n_roads, dtype=np.int64)
    moves: list = []
    sigma = session.sigma
    rows = []
    for t in range(int(sim_config.duration)):
        if t % tau == 0:
            sigma = session.update(t, sim.observe().counts, exited, moves)
            exited = np.zeros(net.n_roads, dtype=np.int64)
            moves = []
        res = sim.step(sigma)
        exited += res.departures
        if turning == "online":
            moves.extend(res.transitions)
        rows.append(res.metrics)
        if audit:
            sim.check_conservation()
    return RunResult(sim_config.seed, rows, session.solve_times, audit)


def scaled_rate(rate: float, n_intersections: int) -> float:
    return rate / math.sqrt(n_intersections)


def summarize(exp: Experiment, averages: list[dict[str, float]], net: RoadNetwork | None = None) -> list[dict]:
    """Mean and standard error across replications of each time-averaged indicator."""
    net = net or exp.network.build()
    n = net.n_intersections
    out = []
    for key in INDICATORS:
        vals = np.array([a[key] for a in averages])
        se = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
        out.append({
            "controller": exp.controller.kind,
            "rate": exp.sim.generation_rate,
            "scaled_rate": scaled_rate(exp.sim.generation_rate, n),
            "N": n,
            "k_h": exp.controller.k_h,
            "solver": exp.controller.solver.kind if exp.controller.kind == "ampic" else "",
            "seed_count": len(vals),
            "indicator": key,
            "mean": float(vals.mean()),
            "stderr": se,
        })
    return out


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def trace_csv(runs: list[RunResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for run in runs:
        for m in run.rows:
            w.writerow([run.seed, m.t, _fmt(m.mean_velocity), _fmt(m.waiting_ratio),
                        _fmt(m.co2_rate), _fmt(m.squared_bias), m.vehicle_count])
    return buf.getvalue()


def summary_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in SUMMARY_COLUMNS])
    return buf.getvalue()


def write_atomic(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def run_experiment(exp: Experiment, audit: bool = False) -> MetricTrace:
    """Run every seed; write ``trace.csv`` and ``summary.csv`` only after all succeed."""
    net = exp.network.build()
    runs = []
    for seed in exp.seeds:
        sim_cfg, ctrl_cfg = exp.for_seed(seed)
        runs.append(run_single(net, sim_cfg, ctrl_cfg, audit=audit, turning=exp.turning))
    trace = MetricTrace(exp, runs)
    if exp.output:
        out = Path(exp.output)
        tag = exp.controller.kind
        write_atomic(out / f"trace_{tag}.csv", trace_csv(runs))
        write_atomic(out / f"summary_{tag}.csv", summary_csv(summarize(exp, [r.time_average() for r in runs], net)))
        write_atomic(out / f"solve_times_{tag}.csv",
                     "seed,cycle,wall_time\n" + "".join(
                         f"{r.seed},{k},{w!r}\n" for r in runs for k, w in enumerate(r.solve_times)))
    return trace


def read_trace_averages(path: str | Path) -> dict[int, dict[str, float]]:
    """Per-seed time averages recomputed from a trace CSV (audit helper)."""
    sums: dict[int, dict[str, list[float]]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            acc = sums.setdefault(int(row["seed"]), {k: [] for k in INDICATORS})
            for k in INDICATORS:
                acc[k].append(float(row[k]))
    return {s: {k: float(np.mean(v)) for k, v in acc.items()} for s, acc in sums.items()}
