"""Signal controllers: the Ising model-predictive controller and three baselines.

Every controller starts from ``sigma = +1`` everywhere and is consulted only
at control instants ``t = k * tau``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .flowstats import FlowStats
from .ising import RATE_CONVENTIONS, IsingInstance, build_internal_model, compile_ising, compute_bias_vector
from .network import RoadNetwork
from .solvers import SolveResult, SolverConfig, solve

CONTROLLER_KINDS = ("ampic", "local", "random", "pattern")


@dataclass(frozen=True)
class ControllerConfig:
    kind: str = "ampic"
    tau: int = 60
    k_h: int = 1
    Q: tuple[float, ...] | None = None
    solver: SolverConfig = field(default_factory=SolverConfig)
    seed: int = 0
    flip_probability: float = 0.5
    model_convention: str = "consistent"

    def __post_init__(self):
        if self.kind not in CONTROLLER_KINDS:
            raise ValueError(f"unknown controller kind {self.kind!r}; expected one of {CONTROLLER_KINDS}")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.k_h < 1:
            raise ValueError("k_h must be >= 1")
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ValueError("flip_probability must lie in [0, 1]")
        if self.model_convention not in RATE_CONVENTIONS:
            raise ValueError(f"model_convention must be one of {RATE_CONVENTIONS}")


@dataclass(frozen=True)
class SignalPlan:
    sigma: np.ndarray
    horizon_plan: np.ndarray | None = None  # (k_h, N) minimizer, AMPIC only
    instance: IsingInstance | None = None
    solve: SolveResult | None = None


def initial_sigma(net: RoadNetwork) -> np.ndarray:
    return np.ones(net.n_controlled, dtype=np.int64)


def ampic_step(counts: np.ndarray, net: RoadNetwork, stats: FlowStats,
               config: ControllerConfig) -> SignalPlan:
    """Compile the horizon objective for the current bias, solve it, keep the first cycle."""
    x = compute_bias_vector(net, counts)
    model = build_internal_model(net, stats, config.tau, config.k_h, config.Q,
                                 convention=config.model_convention)
    instance = compile_ising(model, x)
    result = solve(instance, config.solver)
    plan = np.asarray(result.best_sigma, dtype=np.int64).reshape(config.k_h, net.n_controlled)
    return SignalPlan(plan[0].copy(), plan, instance, result)


def local_step(counts: np.ndarray, net: RoadNetwork, previous_sigma: np.ndarray) -> SignalPlan:
    """Green to the heavier side: ``sigma_i = sign(x_i)``, held when ``x_i == 0``."""
    x = compute_bias_vector(net, counts)
    prev = np.asarray(previous_sigma, dtype=np.int64)
    sigma = np.where(x > 0, 1, np.where(x < 0, -1, prev))
    return SignalPlan(sigma.astype(np.int64))


def random_step(rng: np.random.Generator, previous_sigma: np.ndarray,
                flip_probability: float = 0.5) -> SignalPlan:
    prev = np.asarray(previous_sigma, dtype=np.int64)
    flips = rng.random(prev.shape[0]) < flip_probability
    return SignalPlan(np.where(flips, -prev, prev))


def pattern_step(cycle_index: int, initial: np.ndarray) -> SignalPlan:
    """All signals flip together every second control cycle (period 4 cycles)."""
    sign = -1 if (cycle_index // 2) % 2 else 1
    return SignalPlan(sign * np.asarray(initial, dtype=np.int64))


class Controller:
    """Stateful wrapper that dispatches to the step function of ``config.kind``."""

    def __init__(self, net: RoadNetwork, config: ControllerConfig):
        self.net = net
        self.config = config
        self.reset()

    def reset(self) -> None:
        self.sigma = initial_sigma(self.net)
        self.cycle = 0
        self.rng = np.random.default_rng(self.config.seed)
        self.last_plan: SignalPlan | None = None

    def decide(self, counts: np.ndarray, stats: FlowStats | None = None) -> np.ndarray:
        cfg = self.config
        if cfg.kind == "ampic":
            if stats is None:
                raise ValueError("the ampic controller needs flow statistics")
            plan = ampic_step(counts, self.net, stats, cfg)
        elif cfg.kind == "local":
            plan = local_step(counts, self.net, self.sigma)
        elif cfg.kind == "random":
            if self.cycle == 0:
                plan = SignalPlan(self.sigma.copy())
            else:
                plan = random_step(self.rng, self.sigma, cfg.flip_probability)
        else:
            plan = pattern_step(self.cycle, initial_sigma(self.net))
        self.sigma = plan.sigma
        self.last_plan = plan
        self.cycle += 1
        return self.sigma.copy()
