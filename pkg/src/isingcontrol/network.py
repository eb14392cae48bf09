"""Directed road networks with signal-group signs and bias weights.

A road ``(i, j)`` runs from intersection ``j`` (``src``) to intersection ``i``
(``dst``).  The light at ``i`` shows green to that road when
``sigma_i * sign == +1``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

DEFAULT_L_REF = 100.0
DEFAULT_N_REF = 10.0


class InvalidGeometryError(ValueError):
    """Raised when approach headings cannot be split into two signal groups."""


class NetworkFormatError(ValueError):
    """Raised for malformed or invariant-violating network files."""


@dataclass(frozen=True)
class Intersection:
    id: int
    x: float
    y: float
    signalized: bool = True


@dataclass(frozen=True)
class Road:
    src: int
    dst: int
    length: float
    sign: int = 0
    coeff: int = 0
    eta: float = 0.0


@dataclass(frozen=True)
class RoadNetwork:
    intersections: tuple[Intersection, ...]
    roads: tuple[Road, ...]
    l_ref: float = DEFAULT_L_REF
    n_ref: float = DEFAULT_N_REF

    def __post_init__(self):
        object.__setattr__(self, "intersections", tuple(self.intersections))
        object.__setattr__(self, "roads", tuple(self.roads))

    @property
    def n_intersections(self) -> int:
        return len(self.intersections)

    @property
    def n_roads(self) -> int:
        return len(self.roads)

    @cached_property
    def road_index(self) -> dict[tuple[int, int], int]:
        """Map ``(src, dst)`` to the road's position in ``roads``."""
        return {(r.src, r.dst): k for k, r in enumerate(self.roads)}

    @cached_property
    def incoming(self) -> tuple[tuple[int, ...], ...]:
        inc: list[list[int]] = [[] for _ in self.intersections]
        for k, r in enumerate(self.roads):
            inc[r.dst].append(k)
        return tuple(tuple(v) for v in inc)

    @cached_property
    def outgoing(self) -> tuple[tuple[int, ...], ...]:
        out: list[list[int]] = [[] for _ in self.intersections]
        for k, r in enumerate(self.roads):
            out[r.src].append(k)
        return tuple(tuple(v) for v in out)

    @cached_property
    def controlled(self) -> tuple[int, ...]:
        """Intersection ids that carry a decision variable, in spin order."""
        return tuple(n.id for n in self.intersections if n.signalized)

    @property
    def n_controlled(self) -> int:
        return len(self.controlled)

    @cached_property
    def control_index(self) -> np.ndarray:
        """Spin index per intersection, -1 for unsignalized ones."""
        idx = np.full(self.n_intersections, -1, dtype=np.int64)
        for k, i in enumerate(self.controlled):
            idx[i] = k
        return idx

    @cached_property
    def road_src(self) -> np.ndarray:
        return np.array([r.src for r in self.roads], dtype=np.int64)

    @cached_property
    def road_dst(self) -> np.ndarray:
        return np.array([r.dst for r in self.roads], dtype=np.int64)

    @cached_property
    def road_sign(self) -> np.ndarray:
        return np.array([r.sign for r in self.roads], dtype=np.int64)

    @cached_property
    def road_eta(self) -> np.ndarray:
        return np.array([r.eta for r in self.roads], dtype=float)

    @cached_property
    def road_length(self) -> np.ndarray:
        return np.array([r.length for r in self.roads], dtype=float)

    def green_mask(self, sigma: np.ndarray) -> np.ndarray:
        """Per-road green indicator for controlled-intersection states ``sigma``.

        Roads into unsignalized intersections are always green.
        """
        sigma = np.asarray(sigma)
        if sigma.shape != (self.n_controlled,):
            raise ValueError(
                f"sigma has shape {sigma.shape}, expected ({self.n_controlled},)"
            )
        ctrl = self.control_index[self.road_dst]
        green = np.ones(self.n_roads, dtype=bool)
        sig = ctrl >= 0
        green[sig] = sigma[ctrl[sig]] * self.road_sign[sig] == 1
        return green

    def adjacency(self, weights: Iterable[float] | None = None) -> csr_matrix:
        """Sparse ``src -> dst`` adjacency, optionally weighted."""
        w = np.ones(self.n_roads) if weights is None else np.asarray(list(weights), float)
        n = self.n_intersections
        return csr_matrix((w, (self.road_src, self.road_dst)), shape=(n, n))


def approach_angle(net_or_nodes, road: Road) -> float:
    """Heading in degrees [0, 360) from the downstream intersection toward the
    upstream one, measured counter-clockwise from east."""
    nodes = net_or_nodes.intersections if isinstance(net_or_nodes, RoadNetwork) else net_or_nodes
    a, b = nodes[road.dst], nodes[road.src]
    return math.degrees(math.atan2(b.y - a.y, b.x - a.x)) % 360.0


def _is_east_west(angle: float) -> bool:
    off_axis = min(angle % 180.0, 180.0 - angle % 180.0)
    return off_axis <= 45.0 + 1e-9


def _lone_coefficients(signs: list[int]) -> list[int]:
    return [2 if signs.count(s) == 1 else 1 for s in signs]


def assign_signal_groups(net: RoadNetwork) -> RoadNetwork:
    """Give every road a sign by approach heading and the lone-approach coefficient.

    Approaches within 45 degrees of the east-west axis get ``+1`` (ties go
    east-west), the rest ``-1``.  A road that is the lone member of its group at an
    intersection gets ``coeff = 2``.
    """
    signs = [0] * net.n_roads
    coeffs = [0] * net.n_roads
    for node in net.intersections:
        inc = net.incoming[node.id]
        if not inc:
            continue
        s = [1 if _is_east_west(approach_angle(net, net.roads[k])) else -1 for k in inc]
        if node.signalized:
            if len(set(s)) == 1:
                raise InvalidGeometryError(
                    f"intersection {node.id}: all {len(s)} approaches fall in one signal group"
                )
            if len(inc) == 4 and sum(s) != 0:
                raise InvalidGeometryError(
                    f"intersection {node.id}: 4-way approaches split {s.count(1)}/{s.count(-1)}"
                )
        for k, sk, ck in zip(inc, s, _lone_coefficients(s)):
            signs[k] = sk
            coeffs[k] = ck
    roads = [replace(r, sign=signs[k], coeff=coeffs[k]) for k, r in enumerate(net.roads)]
    return replace(net, roads=tuple(roads))


def compute_eta(net: RoadNetwork) -> RoadNetwork:
    """Set ``eta = coeff * l_ref / (n_ref * length)`` on every road."""
    if net.l_ref <= 0 or net.n_ref <= 0:
        raise ValueError("l_ref and n_ref must be positive")
    roads = []
    for r in net.roads:
        if r.coeff not in (1, 2):
            raise ValueError(f"road {r.src}->{r.dst} has no group coefficient assigned")
        roads.append(replace(r, eta=r.coeff * net.l_ref / (net.n_ref * r.length)))
    return replace(net, roads=tuple(roads))


def validate_network(net: RoadNetwork) -> None:
    """Check structural invariants, raising ``ValueError`` on the first violation."""
    n = net.n_intersections
    for k, node in enumerate(net.intersections):
        if node.id != k:
            raise ValueError(f"intersection at position {k} has id {node.id}")
    seen = set()
    for r in net.roads:
        if not (0 <= r.src < n and 0 <= r.dst < n):
            raise ValueError(f"road {r.src}->{r.dst} references a missing intersection")
        if r.src == r.dst:
            raise ValueError(f"road {r.src}->{r.dst} is a self-loop")
        if (r.src, r.dst) in seen:
            raise ValueError(f"duplicate road {r.src}->{r.dst}")
        seen.add((r.src, r.dst))
        if not r.length > 0:
            raise ValueError(f"road {r.src}->{r.dst} has non-positive length")
        if r.sign not in (-1, 1):
            raise ValueError(f"road {r.src}->{r.dst} has sign {r.sign}")
        if r.coeff not in (1, 2):
            raise ValueError(f"road {r.src}->{r.dst} has coeff {r.coeff}")
    for node in net.intersections:
        if not node.signalized:
            continue
        inc = net.incoming[node.id]
        if len(inc) not in (3, 4):
            raise ValueError(f"signalized intersection {node.id} has degree {len(inc)}")
        s = [net.roads[k].sign for k in inc]
        if len(inc) == 4 and sum(s) != 0:
            raise ValueError(f"4-way intersection {node.id} is not sign-balanced")
        if len(inc) == 3 and sum(c == 2 for c in (net.roads[k].coeff for k in inc)) != 1:
            raise ValueError(f"3-way intersection {node.id} needs exactly one coeff=2 road")
    if n > 1:
        ncomp, _ = connected_components(net.adjacency(), directed=True, connection="strong")
        if ncomp != 1:
            raise ValueError("network is not strongly connected")


def generate_lattice(rows: int, cols: int, spacing: float = 100.0, *,
                     l_ref: float = DEFAULT_L_REF, n_ref: float = DEFAULT_N_REF) -> RoadNetwork:
    """Square lattice with two opposite directed roads between neighbours.

    Corner intersections (degree 2) are left unsignalized; edges are 3-way and
    the interior 4-way.
    """
    if rows < 2 or cols < 2:
        raise ValueError(f"lattice dimensions must be >= 2, got {rows}x{cols}")
    if not spacing > 0:
        raise ValueError("spacing must be positive")

    def nid(r, c):
        return r * cols + c

    nodes = []
    for r in range(rows):
        for c in range(cols):
            corner = r in (0, rows - 1) and c in (0, cols - 1)
            nodes.append(Intersection(nid(r, c), c * spacing, r * spacing, signalized=not corner))
    roads = []
    for r in range(rows):
        for c in range(cols):
            for dr, dc in ((0, 1), (1, 0)):
                r2, c2 = r + dr, c + dc
                if r2 < rows and c2 < cols:
                    a, b = nid(r, c), nid(r2, c2)
                    roads.append(Road(a, b, float(spacing)))
                    roads.append(Road(b, a, float(spacing)))
    net = RoadNetwork(tuple(nodes), tuple(roads), l_ref=l_ref, n_ref=n_ref)
    return compute_eta(assign_signal_groups(net))


def network_to_dict(net: RoadNetwork) -> dict:
    return {
        "intersections": [
            {"id": n.id, "x": n.x, "y": n.y, "signalized": n.signalized}
            for n in net.intersections
        ],
        "roads": [
            {"from": r.src, "to": r.dst, "length": r.length, "s": r.sign, "c": r.coeff}
            for r in net.roads
        ],
        "l_ref": net.l_ref,
        "n_ref": net.n_ref,
    }


def _field(obj: dict, key: str, where: str, kind=float, default=None):
    if key not in obj:
        if default is not None:
            return default
        raise NetworkFormatError(f"{where}: missing field '{key}'")
    value = obj[key]
    try:
        if kind is bool:
            if not isinstance(value, bool):
                raise TypeError
            return value
        if kind is int and (isinstance(value, bool) or float(value) != int(value)):
            raise TypeError
        return kind(value)
    except (TypeError, ValueError):
        raise NetworkFormatError(f"{where}: field '{key}' has invalid value {value!r}") from None


def network_from_dict(data: dict) -> RoadNetwork:
    if not isinstance(data, dict):
        raise NetworkFormatError("top level must be an object")
    for key in ("intersections", "roads"):
        if not isinstance(data.get(key), list):
            raise NetworkFormatError(f"top level: '{key}' must be a list")
    nodes = []
    for k, obj in enumerate(data["intersections"]):
        where = f"intersections[{k}]"
        nodes.append(Intersection(
            _field(obj, "id", where, int),
            _field(obj, "x", where),
            _field(obj, "y", where),
            _field(obj, "signalized", where, bool, default=True),
        ))
    nodes.sort(key=lambda n: n.id)
    if [n.id for n in nodes] != list(range(len(nodes))):
        raise NetworkFormatError("intersections: ids must be exactly 0..N-1")

    roads = []
    seen = {}
    partial = False
    for k, obj in enumerate(data["roads"]):
        where = f"roads[{k}]"
        src = _field(obj, "from", where, int)
        dst = _field(obj, "to", where, int)
        length = _field(obj, "length", where)
        if (src, dst) in seen:
            raise NetworkFormatError(f"{where}: duplicate road {src}->{dst} (first at roads[{seen[src, dst]}])")
        seen[src, dst] = k
        if not (0 <= src < len(nodes) and 0 <= dst < len(nodes)):
            raise NetworkFormatError(f"{where}: endpoint not among intersections")
        if not length > 0:
            raise NetworkFormatError(f"{where}: field 'length' must be positive")
        sign = _field(obj, "s", where, int) if "s" in obj else 0
        coeff = _field(obj, "c", where, int) if "c" in obj else 0
        if "s" in obj and sign not in (-1, 1):
            raise NetworkFormatError(f"{where}: field 's' must be +1 or -1, got {obj['s']!r}")
        if "c" in obj and coeff not in (1, 2):
            raise NetworkFormatError(f"{where}: field 'c' must be 1 or 2, got {obj['c']!r}")
        partial |= sign == 0 or coeff == 0
        roads.append(Road(src, dst, length, sign, coeff))

    l_ref = _field(data, "l_ref", "top level", default=DEFAULT_L_REF)
    n_ref = _field(data, "n_ref", "top level", default=DEFAULT_N_REF)
    net = RoadNetwork(tuple(nodes), tuple(roads), l_ref=l_ref, n_ref=n_ref)
    if partial:
        grouped = assign_signal_groups(net)
        # explicit values in the file win over the heading rule
        roads = [
            replace(r, sign=r.sign or g.sign, coeff=r.coeff or g.coeff)
            for r, g in zip(net.roads, grouped.roads)
        ]
        net = replace(net, roads=tuple(roads))
    net = compute_eta(net)
    try:
        validate_network(net)
    except ValueError as exc:
        raise NetworkFormatError(str(exc)) from None
    return net


def load_network(path: str | Path) -> RoadNetwork:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise NetworkFormatError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    return network_from_dict(data)


def save_network(net: RoadNetwork, path: str | Path) -> None:
    Path(path).write_text(json.dumps(network_to_dict(net), indent=1) + "\n")
