"""Controller-side loop state shared by internal and external coupling."""

from __future__ import annotations

import time

import numpy as np

from ..control import Controller, ControllerConfig
from ..flowstats import (StatsLog, compute_inflow, compute_turning_probs, init_stats,
                         record_transitions, update_outflow)
from ..network import RoadNetwork


class ControlSession:
    """Receives observations at control instants and returns signal states.

    Green time is credited from the states this session issued, so the
    observer only has to report vehicle counts and, optionally, stop-line
    departures and turning moves since the previous instant.
    """

    def __init__(self, net: RoadNetwork, config: ControllerConfig, prior_flow: float,
                 routes=None, turning: str = "routes"):
        if turning not in ("routes", "online"):
            raise ValueError("turning must be 'routes' or 'online'")
        self.net = net
        self.config = config
        self.turning = turning
        p_turn = compute_turning_probs(net, routes) if routes is not None and turning == "routes" else None
        self.stats = init_stats(net, prior_flow, p_turn)
        self.controller = Controller(net, config)
        self.t_last: int | None = None
        self.solve_times: list[float] = []
        self.stats_log = StatsLog()

    @property
    def sigma(self) -> np.ndarray:
        return self.controller.sigma

    def update(self, t: int, counts: np.ndarray, exited: np.ndarray | None = None,
               transitions=None) -> np.ndarray:
        net = self.net
        if self.t_last is not None:
            if t <= self.t_last:
                raise ValueError(f"observation time {t} does not advance past {self.t_last}")
            green = net.green_mask(self.controller.sigma)
            departures = np.zeros(net.n_roads) if exited is None else exited
            update_outflow(self.stats, net, green, departures, seconds=t - self.t_last)
        if self.turning == "online" and transitions:
            record_transitions(self.stats, net, transitions)
        compute_inflow(self.stats, net)
        self.stats_log.record(t, self.stats)
        start = time.perf_counter()
        sigma = self.controller.decide(np.asarray(counts), self.stats)
        plan = self.controller.last_plan
        self.solve_times.append(plan.solve.wall_time if plan.solve is not None
                                else time.perf_counter() - start)
        self.t_last = t
        return sigma
