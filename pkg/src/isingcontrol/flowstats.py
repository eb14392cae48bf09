"""Adaptive estimates of the flow rates feeding the internal model.

Outflow is pooled over all roads into signalized intersections
(``o_g = sum N_e / sum T_g``); inflow to road ``(i, j)`` is the outflow of
each upstream road ``(j, k)`` released under a given state of ``sigma_j``,
weighted by the turning probability ``p_ijk``.
"""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.sparse import csr_matrix

from .network import RoadNetwork


@dataclass
class FlowStats:
    o_g: float
    p_turn: csr_matrix  # p_turn[down, up]: share of vehicles leaving road ``up`` that enter ``down``
    a0: np.ndarray
    a1: np.ndarray
    green_seconds: np.ndarray  # T_g per road
    exited: np.ndarray  # N_e per road
    prior: float
    o_r: float = 0.0
    transition_counts: Counter = field(default_factory=Counter)

    @property
    def a_bar(self) -> np.ndarray:
        return self.a0 + self.a1

    @property
    def a_delta(self) -> np.ndarray:
        return self.a0 - self.a1

    @property
    def o_bar(self) -> float:
        return self.o_g + self.o_r

    @property
    def o_delta(self) -> float:
        return self.o_g - self.o_r

    def turning_probability(self, net: RoadNetwork, i: int, j: int, k: int) -> float:
        """``p_ijk``: probability that a vehicle leaving road ``k -> j`` enters ``j -> i``."""
        idx = net.road_index
        if (j, i) not in idx or (k, j) not in idx:
            return 0.0
        return float(self.p_turn[idx[j, i], idx[k, j]])


def init_stats(net: RoadNetwork, prior: float, p_turn: csr_matrix | None = None) -> FlowStats:
    R = net.n_roads
    if p_turn is None:
        p_turn = csr_matrix((R, R))
    stats = FlowStats(
        o_g=float(prior), p_turn=p_turn, a0=np.zeros(R), a1=np.zeros(R),
        green_seconds=np.zeros(R), exited=np.zeros(R), prior=float(prior),
    )
    return compute_inflow(stats, net)


def _signal_roads(net: RoadNetwork) -> np.ndarray:
    return net.control_index[net.road_dst] >= 0


def update_outflow(stats: FlowStats, net: RoadNetwork, green: np.ndarray,
                   departures: np.ndarray, seconds: float = 1.0) -> FlowStats:
    """Accumulate green time and stop-line departures, then re-pool ``o_g``.

    Only roads into signalized intersections contribute.  Returns ``stats``
    (updated in place).
    """
    sel = _signal_roads(net)
    green = np.asarray(green, dtype=bool)
    stats.green_seconds[sel & green] += seconds
    stats.exited[sel] += np.asarray(departures)[sel]
    total_green = stats.green_seconds.sum()
    stats.o_g = float(stats.exited.sum() / total_green) if total_green > 0 else stats.prior
    return stats


def compute_turning_probs(net: RoadNetwork, routes: Iterable[Sequence[int]]) -> csr_matrix:
    """Turning probabilities counted from complete routes (road-index sequences).

    The denominator is the number of onward transitions out of each road, so
    every used row sums to one.
    """
    pairs: Counter = Counter()
    for route in routes:
        for up, down in zip(route, route[1:]):
            pairs[up, down] += 1
    return _normalize(net, pairs)


def _normalize(net: RoadNetwork, pairs: Counter) -> csr_matrix:
    R = net.n_roads
    if not pairs:
        return csr_matrix((R, R))
    ups = np.array([u for u, _ in pairs], dtype=np.int64)
    downs = np.array([d for _, d in pairs], dtype=np.int64)
    n = np.array(list(pairs.values()), dtype=float)
    totals = np.bincount(ups, weights=n, minlength=R)
    return csr_matrix((n / totals[ups], (downs, ups)), shape=(R, R))


def record_transitions(stats: FlowStats, net: RoadNetwork,
                       transitions: Iterable[tuple[int, int]]) -> FlowStats:
    """Online counting mode: fold observed road-to-road moves into ``p_turn``."""
    stats.transition_counts.update(transitions)
    stats.p_turn = _normalize(net, stats.transition_counts)
    return stats


def released_by(net: RoadNetwork, state: int) -> np.ndarray:
    """Roads whose downstream light lets them out when that light is in ``state``."""
    ctrl = net.control_index[net.road_dst]
    return (ctrl < 0) | (net.road_sign == state)


def compute_inflow(stats: FlowStats, net: RoadNetwork) -> FlowStats:
    """``a0`` (``sigma_j = +1``) and ``a1`` (``sigma_j = -1``) for every road."""
    P = stats.p_turn
    stats.a0 = stats.o_g * (P @ released_by(net, +1).astype(float))
    stats.a1 = stats.o_g * (P @ released_by(net, -1).astype(float))
    return stats


class StatsLog:
    """Per-control-cycle CSV dump of the estimates."""

    header = ("t", "o_g", "a0_min", "a0_max", "a1_min", "a1_max")

    def __init__(self):
        self.rows: list[tuple] = []

    def record(self, t: int, stats: FlowStats) -> None:
        self.rows.append((t, stats.o_g, stats.a0.min(initial=0.0), stats.a0.max(initial=0.0),
                          stats.a1.min(initial=0.0), stats.a1.max(initial=0.0)))

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.header)
            w.writerows(self.rows)
