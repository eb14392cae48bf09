"""Per-second link-queue traffic simulator.

Vehicles cross each road at free-flow speed until they reach the back of the
stop-line queue, wait there, and discharge at the saturation flow while their
approach shows green.  Each road stores at most ``length / jam_spacing``
vehicles; a full road blocks upstream discharge (spillback) and new insertions,
which then wait in a per-road insertion backlog outside the network.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.csgraph import dijkstra

from .ising import compute_bias_vector
from .network import RoadNetwork

log = logging.getLogger(__name__)

CO2_IDLE = 2.5e-4  # kg/s
CO2_PER_METER = 5.0e-5  # kg/m
STOPPED_SPEED = 0.1  # m/s
MAX_OD_RETRIES = 100


def surrogate_co2(speed: float, accel_flag: str = "cruise") -> float:
    """CO2 emission rate of one vehicle in kg/s; ``idle`` ignores ``speed``.

    Non-calibrated surrogate: a constant idling rate plus a per-meter term.
    """
    if speed < 0:
        raise ValueError("speed must be non-negative")
    if accel_flag not in ("idle", "cruise"):
        raise ValueError(f"unknown accel_flag {accel_flag!r}")
    if accel_flag == "idle":
        speed = 0.0
    return CO2_IDLE + CO2_PER_METER * speed


@dataclass(frozen=True)
class SimConfig:
    generation_rate: float = 1.0
    seed: int = 0
    duration: int = 3600
    free_flow_speed: float = 13.89
    saturation_flow: float = 0.5
    jam_spacing: float = 7.5
    control_cycle: int = 60
    arrival: str = "road_end"

    def __post_init__(self):
        if self.generation_rate < 0:
            raise ValueError("generation_rate must be >= 0")
        for name in ("duration", "free_flow_speed", "saturation_flow", "jam_spacing", "control_cycle"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if int(self.control_cycle) != self.control_cycle or int(self.duration) != self.duration:
            raise ValueError("control_cycle and duration must be whole seconds")
        if self.arrival not in ("road_end", "signal"):
            raise ValueError(f"arrival must be 'road_end' or 'signal', got {self.arrival!r}")


@dataclass
class Vehicle:
    __slots__ = ("id", "route", "route_index", "entered", "reached", "queued")
    id: int
    route: tuple[int, ...]
    route_index: int
    entered: float  # time the vehicle entered its current road
    reached: float  # time it reached the queue back (valid while queued)
    queued: bool

    @property
    def road(self) -> int:
        return self.route[self.route_index]


@dataclass(frozen=True)
class TrafficSnapshot:
    t: int
    counts: np.ndarray  # vehicles per road, network road order
    sigma: np.ndarray | None = None  # signal states currently applied


@dataclass(frozen=True)
class StepMetrics:
    t: int
    mean_velocity: float
    waiting_ratio: float
    co2_rate: float
    squared_bias: float
    vehicle_count: int


@dataclass
class StepResult:
    metrics: StepMetrics
    departures: np.ndarray  # vehicles that crossed each road's stop line this step
    green: np.ndarray
    transitions: list[tuple[int, int]] = field(default_factory=list)  # (from_road, to_road)


def shortest_path_routes(net: RoadNetwork, free_flow_speed: float):
    """Predecessor matrix of free-flow travel-time shortest paths."""
    adj = net.adjacency(net.road_length / free_flow_speed)
    _, pred = dijkstra(adj, directed=True, return_predecessors=True)
    return pred


def route_between(net: RoadNetwork, pred: np.ndarray, origin: int, dest: int) -> tuple[int, ...] | None:
    """Road indices from ``origin`` to ``dest``, or ``None`` if unreachable."""
    nodes = [dest]
    while nodes[-1] != origin:
        p = pred[origin, nodes[-1]]
        if p < 0:
            return None
        nodes.append(int(p))
    nodes.reverse()
    idx = net.road_index
    return tuple(idx[a, b] for a, b in zip(nodes, nodes[1:]))


def spawn_counts(rate: float, duration: int) -> np.ndarray:
    """Vehicles created in each second by a deterministic rate accumulator."""
    t = np.arange(duration + 1)
    cum = np.floor(rate * t + 1e-9).astype(np.int64)
    return np.diff(cum)


def generate_demand(net: RoadNetwork, config: SimConfig, rng: np.random.Generator | None = None):
    """Pre-draw every trip of the run: a list of ``(second, route)`` pairs.

    Origins and destinations are independent uniform draws, redrawn when equal
    or unconnected.
    """
    rng = np.random.default_rng(config.seed) if rng is None else rng
    pred = shortest_path_routes(net, config.free_flow_speed)
    n = net.n_intersections
    trips = []
    for sec, k in enumerate(spawn_counts(config.generation_rate, int(config.duration))):
        for _ in range(k):
            for _attempt in range(MAX_OD_RETRIES):
                o, d = (int(v) for v in rng.integers(0, n, size=2))
                if o == d:
                    continue
                route = route_between(net, pred, o, d)
                if route:
                    trips.append((sec, route))
                    break
            else:
                log.warning("no routable origin/destination pair after %d draws at t=%d",
                            MAX_OD_RETRIES, sec)
    return trips


class Simulator:
    """Single-run simulation state.  Call :meth:`step` once per second."""

    def __init__(self, net: RoadNetwork, config: SimConfig, Q=None, trips=None):
        self.net = net
        self.config = config
        self.Q = np.ones(net.n_controlled) if Q is None else np.asarray(Q, float)
        self.trips = generate_demand(net, config) if trips is None else list(trips)
        self.t = 0
        self.spawned = 0
        self.arrived = 0
        R = net.n_roads
        self.capacity = np.maximum(1, np.floor(net.road_length / config.jam_spacing + 1e-9)).astype(int)
        self.moving: list[deque[Vehicle]] = [deque() for _ in range(R)]
        self.queue: list[deque[Vehicle]] = [deque() for _ in range(R)]
        self.count = np.zeros(R, dtype=np.int64)
        self.backlog: list[deque[Vehicle]] = [deque() for _ in range(R)]
        self.pending = 0
        self.credit = np.zeros(R)
        self._next_trip = 0
        self._sigma = np.ones(net.n_controlled, dtype=np.int64)

    @property
    def routes(self) -> list[tuple[int, ...]]:
        return [r for _, r in self.trips]

    @property
    def in_network(self) -> int:
        return int(self.count.sum())

    def vehicles(self):
        for r in range(self.net.n_roads):
            yield from self.queue[r]
            yield from self.moving[r]

    def link_position(self, v: Vehicle) -> float:
        L = self.net.roads[v.road].length
        if v.queued:
            back = L - self.config.jam_spacing * self._queue_rank(v)
            return max(0.0, back)
        return min(L, self.config.free_flow_speed * (self.t - v.entered))

    def _queue_rank(self, v: Vehicle) -> int:
        return list(self.queue[v.road]).index(v)

    def speed(self, v: Vehicle) -> float:
        return 0.0 if v.queued else self.config.free_flow_speed

    def observe(self) -> TrafficSnapshot:
        return TrafficSnapshot(self.t, self.count.copy(), self._sigma.copy())

    def place(self, road: int, route: tuple[int, ...] | None = None, position: float = 0.0,
              queued: bool = False) -> Vehicle:
        """Put a vehicle directly on ``road`` (test and scenario hook)."""
        route = route or (road,)
        v = Vehicle(self.spawned, tuple(route), route.index(road),
                    self.t - position / self.config.free_flow_speed, float(self.t), queued)
        (self.queue if queued else self.moving)[road].append(v)
        self.count[road] += 1
        self.spawned += 1
        return v

    def _spawn(self, t_now: float) -> None:
        for r in range(self.net.n_roads):
            bl = self.backlog[r]
            while bl and self.count[r] < self.capacity[r]:
                v = bl.popleft()
                v.entered = t_now
                self.moving[r].append(v)
                self.count[r] += 1
                self.pending -= 1
        while self._next_trip < len(self.trips) and self.trips[self._next_trip][0] < self.t:
            _, route = self.trips[self._next_trip]
            self._next_trip += 1
            v = Vehicle(self.spawned, route, 0, t_now, t_now, False)
            self.spawned += 1
            r = route[0]
            if not self.backlog[r] and self.count[r] < self.capacity[r]:
                self.moving[r].append(v)
                self.count[r] += 1
            else:
                self.backlog[r].append(v)
                self.pending += 1

    def step(self, sigma=None) -> StepResult:
        """Advance one second under signal states ``sigma`` (controlled intersections)."""
        net, cfg = self.net, self.config
        if sigma is not None:
            sigma = np.asarray(sigma, dtype=np.int64)
            if not np.all(np.abs(sigma) == 1):
                raise ValueError("signal states must be +1 or -1")
            self._sigma = sigma
        green = net.green_mask(self._sigma)
        t_end = self.t + 1
        v_ff = cfg.free_flow_speed
        jam = cfg.jam_spacing
        lengths = net.road_length

        for r in range(net.n_roads):
            mv = self.moving[r]
            if not mv:
                continue
            q = self.queue[r]
            back = lengths[r] - len(q) * jam
            while mv and v_ff * (t_end - mv[0].entered) >= back:
                v = mv.popleft()
                v.queued = True
                # only a vehicle arriving at an empty stop line may pass without stopping
                v.reached = v.entered + back / v_ff if not q else -math.inf
                q.append(v)
                back -= jam

        departures = np.zeros(net.n_roads, dtype=np.int64)
        transitions = []
        sat = cfg.saturation_flow
        road_end = cfg.arrival == "road_end"
        for r in range(net.n_roads):
            q = self.queue[r]
            if road_end:
                while q and q[0].route_index + 1 == len(q[0].route):
                    q.popleft()
                    self.count[r] -= 1
                    self.arrived += 1
            if not green[r]:
                self.credit[r] = 0.0
                continue
            credit = self.credit[r] + sat
            while q and credit >= 1.0:
                v = q[0]
                if v.route_index + 1 == len(v.route):
                    q.popleft()
                    self.count[r] -= 1
                    self.arrived += 1
                else:
                    nxt = v.route[v.route_index + 1]
                    if self.count[nxt] >= self.capacity[nxt]:
                        break
                    q.popleft()
                    self.count[r] -= 1
                    v.entered = v.reached if v.reached > self.t else float(t_end)
                    v.route_index += 1
                    v.queued = False
                    self.moving[nxt].append(v)
                    self.count[nxt] += 1
                    transitions.append((r, nxt))
                departures[r] += 1
                credit -= 1.0
            self.credit[r] = min(credit, 1.0) if not q or credit >= 1.0 else credit

        self.t = t_end
        self._spawn(float(t_end))
        metrics = self.metrics()
        return StepResult(metrics, departures, green, transitions)

    def metrics(self) -> StepMetrics:
        cfg = self.config
        n = self.in_network
        queued = sum(len(q) for q in self.queue)
        moving = n - queued
        if n:
            mean_v = cfg.free_flow_speed * (moving / n)
            waiting = queued / n
        else:
            mean_v, waiting = cfg.free_flow_speed, 0.0
        co2 = moving * surrogate_co2(cfg.free_flow_speed) + queued * surrogate_co2(0.0)
        x = compute_bias_vector(self.net, self.count)
        return StepMetrics(self.t, mean_v, waiting, co2, float(np.sum(self.Q * x * x)), n)

    def check_conservation(self) -> None:
        on_roads = sum(len(m) + len(q) for m, q in zip(self.moving, self.queue))
        if on_roads != self.in_network:
            raise AssertionError(f"t={self.t}: per-road counts {self.in_network} != vehicles {on_roads}")
        if self.spawned != on_roads + self.arrived + self.pending:
            raise AssertionError(
                f"t={self.t}: spawned {self.spawned} != in-network {on_roads} + arrived "
                f"{self.arrived} + backlog {self.pending}"
            )
        if np.any(self.count > self.capacity):
            raise AssertionError(f"t={self.t}: road storage exceeded")
