"""Internal linear model of the vehicle bias and its compilation to an Ising problem.

Spin layout: spin ``k * N + i`` is the state of controlled intersection ``i``
during control cycle ``k`` of the horizon (``k = 0`` is the cycle being
decided now).  The objective covers the predicted biases at the ends of the
``k_h`` cycles.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .network import RoadNetwork


def compute_bias_vector(net: RoadNetwork, counts: np.ndarray) -> np.ndarray:
    """Vehicle bias ``x_i = sum_j eta_ij s_ij q_ij`` per controlled intersection."""
    counts = np.asarray(counts, dtype=float)
    if counts.shape != (net.n_roads,):
        raise ValueError(f"counts has shape {counts.shape}, expected ({net.n_roads},)")
    ctrl = net.control_index[net.road_dst]
    sel = ctrl >= 0
    weighted = net.road_eta[sel] * net.road_sign[sel] * counts[sel]
    return np.bincount(ctrl[sel], weights=weighted, minlength=net.n_controlled)


@dataclass(frozen=True)
class InternalModel:
    """``dx/dt = A sigma + b`` with flow statistics frozen over the horizon."""

    A: np.ndarray
    b: np.ndarray
    tau: float
    k_h: int
    Q: np.ndarray  # diagonal weights

    @property
    def n(self) -> int:
        return self.b.shape[0]

    @property
    def A_tilde(self) -> np.ndarray:
        return self.A * self.tau

    @property
    def b_tilde(self) -> np.ndarray:
        return self.b * self.tau


RATE_CONVENTIONS = ("consistent", "doubled")


def build_internal_model(net: RoadNetwork, stats, tau: float = 60.0, k_h: int = 1,
                         Q=None, convention: str = "consistent") -> InternalModel:
    """Assemble ``A`` and ``b`` from the network and the current flow estimates.

    ``stats`` supplies per-road arrays ``a0``, ``a1``, ``o_g`` and ``o_r``
    (scalars broadcast).

    Road ``(i, j)`` gains ``(a_bar + a_delta sigma_j) / 2`` and loses
    ``(o_bar + o_delta s_ij sigma_i) / 2`` vehicles per second.  The
    ``"consistent"`` convention keeps those halves in ``A`` and ``b``;
    ``"doubled"`` drops them, which doubles every predicted change.
    """
    if convention not in RATE_CONVENTIONS:
        raise ValueError(f"convention must be one of {RATE_CONVENTIONS}")
    if tau <= 0:
        raise ValueError("tau must be positive")
    if k_h < 1:
        raise ValueError("k_h must be >= 1")
    n = net.n_controlled
    q = np.ones(n) if Q is None else _diag_weights(Q, n)

    R = net.n_roads
    a0 = np.broadcast_to(np.asarray(stats.a0, float), (R,))
    a1 = np.broadcast_to(np.asarray(stats.a1, float), (R,))
    o_g = np.broadcast_to(np.asarray(stats.o_g, float), (R,))
    o_r = np.broadcast_to(np.asarray(stats.o_r, float), (R,))
    a_bar, a_delta = a0 + a1, a0 - a1
    o_bar, o_delta = o_g + o_r, o_g - o_r

    eta, sign = net.road_eta, net.road_sign
    ci = net.control_index[net.road_dst]  # row (downstream)
    cj = net.control_index[net.road_src]  # column (upstream)
    A = np.zeros((n, n))
    b = np.zeros(n)
    rows = ci >= 0
    np.add.at(A, (ci[rows], ci[rows]), -eta[rows] * o_delta[rows])
    np.add.at(b, ci[rows], eta[rows] * sign[rows] * (a_bar[rows] - o_bar[rows]))
    off = rows & (cj >= 0)
    np.add.at(A, (ci[off], cj[off]), eta[off] * sign[off] * a_delta[off])
    if convention == "consistent":
        A *= 0.5
        b *= 0.5
    return InternalModel(A=A, b=b, tau=float(tau), k_h=int(k_h), Q=q)


def _diag_weights(Q, n: int) -> np.ndarray:
    Q = np.asarray(Q, dtype=float)
    if Q.ndim == 2:
        if np.count_nonzero(Q - np.diag(np.diag(Q))):
            raise ValueError("Q must be diagonal")
        Q = np.diag(Q)
    if Q.shape != (n,):
        raise ValueError(f"Q has {Q.shape[0]} weights, expected {n}")
    if np.any(Q <= 0):
        raise ValueError("Q entries must be positive")
    return Q.copy()


def predict_bias(model: InternalModel, x0: np.ndarray, sigma_seq: np.ndarray) -> np.ndarray:
    """Iterate ``x <- x + A_tilde sigma_k + b_tilde``; row ``k`` is the bias after cycle ``k``."""
    x0 = np.asarray(x0, dtype=float)
    sigma_seq = np.asarray(sigma_seq, dtype=float)
    if sigma_seq.ndim == 1 and sigma_seq.size == model.n * model.k_h:
        sigma_seq = sigma_seq.reshape(model.k_h, model.n)
    if x0.shape != (model.n,) or sigma_seq.shape != (model.k_h, model.n):
        raise ValueError(
            f"expected x0 of shape ({model.n},) and sigma of shape ({model.k_h}, {model.n}), "
            f"got {x0.shape} and {sigma_seq.shape}"
        )
    At, bt = model.A_tilde, model.b_tilde
    out = np.empty((model.k_h, model.n))
    x = x0
    for k in range(model.k_h):
        x = x + At @ sigma_seq[k] + bt
        out[k] = x
    return out


def horizon_objective(model: InternalModel, x0: np.ndarray, sigma_seq: np.ndarray) -> float:
    """Sum of ``x^T Q x`` over the predicted horizon."""
    xs = predict_bias(model, x0, sigma_seq)
    return float(np.sum(xs * xs * model.Q))


@dataclass(frozen=True)
class IsingInstance:
    """``E(s) = sum_{i<j} J_ij s_i s_j + sum_i h_i s_i + offset`` with ``J`` strictly upper-triangular."""

    J: np.ndarray
    h: np.ndarray
    offset: float = 0.0

    def __post_init__(self):
        J = np.asarray(self.J, dtype=float)
        h = np.asarray(self.h, dtype=float)
        n = h.shape[0]
        if J.shape != (n, n):
            raise ValueError(f"J has shape {J.shape}, expected ({n}, {n})")
        if np.count_nonzero(np.tril(J)):
            raise ValueError("J must be strictly upper-triangular")
        object.__setattr__(self, "J", J)
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "offset", float(self.offset))

    @property
    def n_spins(self) -> int:
        return self.h.shape[0]

    def symmetric(self) -> np.ndarray:
        return self.J + self.J.T

    def energy(self, sigma) -> float | np.ndarray:
        """Energy of one state (1-D) or of each row of a 2-D state matrix."""
        s = np.asarray(sigma, dtype=float)
        e = np.einsum("...i,ij,...j->...", s, self.J, s) + s @ self.h + self.offset
        return float(e) if s.ndim == 1 else e

    def scaled(self, factor: float) -> "IsingInstance":
        return IsingInstance(self.J * factor, self.h * factor, self.offset * factor)


def compile_ising(model: InternalModel, x0: np.ndarray) -> IsingInstance:
    """Expand the horizon objective into couplings, fields and a constant.

    With stacked ``X = 1 x0 + B`` and block lower-triangular ``M`` the objective
    is ``s^T M^T Q M s + 2 X^T Q M s + X^T Q X``; the diagonal of the quadratic
    form collapses into the constant since ``s_i^2 = 1``.
    """
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (model.n,):
        raise ValueError(f"x0 has shape {x0.shape}, expected ({model.n},)")
    k = model.k_h
    big_A = np.kron(np.tril(np.ones((k, k))), model.A_tilde)
    drift = np.tile(x0, k) + np.kron(np.arange(1, k + 1, dtype=float), model.b_tilde)
    qd = np.tile(model.Q, k)
    quad = big_A.T @ (qd[:, None] * big_A)
    J = 2.0 * np.triu(quad, 1)
    h = 2.0 * (drift * qd) @ big_A
    offset = float(drift @ (qd * drift) + np.trace(quad))
    return IsingInstance(J, h, offset)


def write_instance(instance: IsingInstance, path: str | Path) -> None:
    """Plain-text instance: a header, the offset, then one line per nonzero term.

    ::

        p ising <n_spins>
        o <offset>
        h <i> <value>
        J <i> <j> <value>
    """
    lines = [f"p ising {instance.n_spins}", f"o {float(instance.offset)!r}"]
    for i in np.flatnonzero(instance.h):
        lines.append(f"h {i} {float(instance.h[i])!r}")
    for i, j in zip(*np.nonzero(instance.J)):
        lines.append(f"J {i} {j} {float(instance.J[i, j])!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_instance(path: str | Path) -> IsingInstance:
    n = None
    offset = 0.0
    terms: list[tuple] = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if parts[0] == "p":
                if parts[1] != "ising":
                    raise ValueError(f"unsupported problem type {parts[1]!r}")
                n = int(parts[2])
            elif parts[0] == "o":
                offset = float(parts[1])
            elif parts[0] == "h":
                terms.append((int(parts[1]), float(parts[2])))
            elif parts[0] == "J":
                terms.append((int(parts[1]), int(parts[2]), float(parts[3])))
            else:
                raise ValueError(f"unknown record {parts[0]!r}")
        except (IndexError, ValueError) as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    if n is None:
        raise ValueError(f"{path}: missing 'p ising <n>' header")
    J = np.zeros((n, n))
    h = np.zeros(n)
    for t in terms:
        if len(t) == 2:
            h[t[0]] += t[1]
        else:
            i, j, v = t
            if i == j:
                raise ValueError(f"{path}: self-coupling J {i} {j}")
            J[min(i, j), max(i, j)] += v
    return IsingInstance(J, h, offset)
