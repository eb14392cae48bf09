"""Ising minimizers: exhaustive enumeration, steepest descent and simulated annealing.

All solvers return a :class:`SolveResult` whose energy is re-evaluated from
the instance, never taken from incremental bookkeeping.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numba
import numpy as np

from .ising import IsingInstance

EXACT_MAX_SPINS = 24


class SolverSizeError(ValueError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    kind: str = "sa"
    num_reads: int = 1000
    sa_sweeps: int = 100
    beta_range: tuple[float, float] = (0.1, 10.0)
    seed: int = 0

    def __post_init__(self):
        if self.num_reads < 1:
            raise ValueError("num_reads must be >= 1")
        if self.sa_sweeps < 1:
            raise ValueError("sa_sweeps must be >= 1")
        b0, b1 = self.beta_range
        if not 0 < b0 < b1:
            raise ValueError("beta_range must satisfy 0 < beta0 < beta1")
        object.__setattr__(self, "beta_range", (float(b0), float(b1)))


@dataclass(frozen=True)
class SolveResult:
    best_sigma: np.ndarray
    best_energy: float
    restarts_used: int
    wall_time: float


def _lex_key(sigma: np.ndarray) -> tuple:
    return tuple(int(v) for v in sigma)


def _tol(e: float) -> float:
    return 1e-12 * max(1.0, abs(e))


def _pick_best(states: np.ndarray, energies: np.ndarray) -> np.ndarray:
    """Lowest energy, ties broken by the lexicographically smallest state."""
    e_min = float(energies.min())
    tied = states[energies <= e_min + _tol(e_min)]
    return min(tied, key=_lex_key).astype(np.int8)


def _neighbours(instance: IsingInstance):
    """CSR view of the symmetric coupling matrix."""
    Js = instance.symmetric()
    n = instance.n_spins
    rows, cols = np.nonzero(Js)
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=n), out=indptr[1:])
    return indptr, cols.astype(np.int64), Js[rows, cols].astype(np.float64)


def _chain_seeds(seed: int, n: int) -> np.ndarray:
    # one child per chain, so chain c sees the same stream whatever num_reads is
    children = np.random.SeedSequence(seed).spawn(n)
    seeds = np.array([c.generate_state(1, dtype=np.uint64)[0] for c in children], dtype=np.uint64)
    seeds[seeds == 0] = 0x9E3779B97F4A7C15  # xorshift state must be nonzero
    return seeds


@numba.njit(cache=True, inline="always")
def _uniform(state):
    """xorshift64* draw in [0, 1); ``state`` is a one-element uint64 array."""
    x = state[0]
    x ^= x >> np.uint64(12)
    x ^= x << np.uint64(25)
    x ^= x >> np.uint64(27)
    state[0] = x
    return float((x * np.uint64(2685821657736338717)) >> np.uint64(11)) * (1.0 / 9007199254740992.0)


@numba.njit(cache=True)
def _random_start(h, indptr, indices, data, state):
    n = h.shape[0]
    spins = np.empty(n)
    for i in range(n):
        spins[i] = 1.0 if _uniform(state) < 0.5 else -1.0
    field = h.copy()
    for i in range(n):
        for p in range(indptr[i], indptr[i + 1]):
            field[i] += data[p] * spins[indices[p]]
    return spins, field


@numba.njit(cache=True)
def _descend(spins, field, indptr, indices, data, eps):
    n = spins.shape[0]
    while True:
        best_i = -1
        best_d = -eps
        for i in range(n):
            d = -2.0 * spins[i] * field[i]
            if d < best_d:
                best_d = d
                best_i = i
        if best_i < 0:
            return
        spins[best_i] = -spins[best_i]
        s2 = 2.0 * spins[best_i]
        for p in range(indptr[best_i], indptr[best_i + 1]):
            field[indices[p]] += data[p] * s2


@numba.njit(cache=True)
def _greedy_reads(h, indptr, indices, data, seeds, eps):
    n = h.shape[0]
    out = np.empty((seeds.shape[0], n), dtype=np.int8)
    state = np.empty(1, dtype=np.uint64)
    for c in range(seeds.shape[0]):
        state[0] = seeds[c]
        spins, field = _random_start(h, indptr, indices, data, state)
        _descend(spins, field, indptr, indices, data, eps)
        for i in range(n):
            out[c, i] = np.int8(spins[i])
    return out


@numba.njit(cache=True)
def _anneal_reads(h, indptr, indices, data, seeds, betas):
    n = h.shape[0]
    out = np.empty((seeds.shape[0], n), dtype=np.int8)
    state = np.empty(1, dtype=np.uint64)
    for c in range(seeds.shape[0]):
        state[0] = seeds[c]
        spins, field = _random_start(h, indptr, indices, data, state)
        for b in range(betas.shape[0]):
            beta = betas[b]
            for i in range(n):
                d = -2.0 * spins[i] * field[i]
                # beta*d > 40 accepts with probability < 5e-18; skip the draw
                if d <= 0.0 or (beta * d < 40.0 and _uniform(state) < np.exp(-beta * d)):
                    spins[i] = -spins[i]
                    s2 = 2.0 * spins[i]
                    for p in range(indptr[i], indptr[i + 1]):
                        field[indices[p]] += data[p] * s2
        for i in range(n):
            out[c, i] = np.int8(spins[i])
    return out


def solve_exact(instance: IsingInstance, config: SolverConfig | None = None) -> SolveResult:
    """Enumerate all ``2**n`` states in lexicographic order (-1 before +1)."""
    n = instance.n_spins
    if n > EXACT_MAX_SPINS:
        raise SolverSizeError(f"exact solver is capped at {EXACT_MAX_SPINS} spins, got {n}")
    start = time.perf_counter()
    if n == 0:
        return SolveResult(np.zeros(0, np.int8), instance.offset, 1, 0.0)
    chunk_bits = min(n, 16)
    shifts = np.arange(n - 1, -1, -1, dtype=np.int64)
    best_e, best_idx = 0.0, -1
    for base in range(0, 1 << n, 1 << chunk_bits):
        k = base + np.arange(1 << chunk_bits, dtype=np.int64)
        states = ((k[:, None] >> shifts) & 1) * 2.0 - 1.0
        e = instance.energy(states)
        m = float(e.min())
        # near-ties (rounding) resolve to the earlier, lexicographically smaller state
        if best_idx < 0 or m < best_e - _tol(best_e):
            i = int(np.flatnonzero(e <= m + _tol(m))[0])
            best_e, best_idx = float(e[i]), int(k[i])
    sigma = (((best_idx >> shifts) & 1) * 2 - 1).astype(np.int8)
    return SolveResult(sigma, instance.energy(sigma), 1 << n, time.perf_counter() - start)


def _scale(instance: IsingInstance) -> float:
    return 1.0 + np.abs(instance.J).max(initial=0.0) + np.abs(instance.h).max(initial=0.0)


def solve_greedy(instance: IsingInstance, config: SolverConfig | None = None) -> SolveResult:
    """Steepest single-spin descent from ``num_reads`` random starts."""
    config = config or SolverConfig(kind="greedy")
    start = time.perf_counter()
    indptr, indices, data = _neighbours(instance)
    seeds = _chain_seeds(config.seed, config.num_reads)
    states = _greedy_reads(instance.h.copy(), indptr, indices, data, seeds, 1e-12 * _scale(instance))
    energies = instance.energy(states.astype(float))
    sigma = _pick_best(states, energies)
    return SolveResult(sigma, instance.energy(sigma), config.num_reads, time.perf_counter() - start)


def beta_schedule(config: SolverConfig) -> np.ndarray:
    b0, b1 = config.beta_range
    return np.geomspace(b0, b1, config.sa_sweeps)


def solve_sa(instance: IsingInstance, config: SolverConfig | None = None) -> SolveResult:
    """Independent Metropolis chains under a geometric inverse-temperature ramp."""
    config = config or SolverConfig(kind="sa")
    start = time.perf_counter()
    indptr, indices, data = _neighbours(instance)
    seeds = _chain_seeds(config.seed, config.num_reads)
    states = _anneal_reads(instance.h.copy(), indptr, indices, data, seeds, beta_schedule(config))
    energies = instance.energy(states.astype(float))
    sigma = _pick_best(states, energies)
    return SolveResult(sigma, instance.energy(sigma), config.num_reads, time.perf_counter() - start)


SOLVERS: dict[str, Callable[[IsingInstance, SolverConfig], SolveResult]] = {
    "exact": solve_exact,
    "greedy": solve_greedy,
    "sa": solve_sa,
}


def register_solver(kind: str, fn: Callable[[IsingInstance, SolverConfig], SolveResult]) -> None:
    """Plug in another minimizer, e.g. a quantum annealing client under ``"qa"``."""
    SOLVERS[kind] = fn


def solve(instance: IsingInstance, config: SolverConfig) -> SolveResult:
    try:
        fn = SOLVERS[config.kind]
    except KeyError:
        raise ValueError(
            f"no solver registered for {config.kind!r}; available: {sorted(SOLVERS)}"
        ) from None
    return fn(instance, config)
