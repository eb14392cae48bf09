"""Parameter sweeps over generation rate, lattice size and prediction horizon.

Every (experiment, seed) pair is a *cell*.  Finished cells are cached as
small JSON files named by a hash of their configuration, so an interrupted
sweep picks up where it stopped and repeated sweeps are free.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .experiment import (INDICATORS, Experiment, NetworkSpec, run_single, summarize, summary_csv,
                         write_atomic)

SOLVE_TIME = "solve_wall_time"


@dataclass(frozen=True)
class CellResult:
    averages: dict[str, float]
    solve_time: float  # mean wall time per control decision


def cell_key(exp: Experiment, seed: int) -> str:
    """Content hash of everything that determines one replication's output."""
    cfg = replace(exp, seeds=(seed,), output=None).to_dict()
    blob = json.dumps(cfg, sort_keys=True, default=list).encode()
    return hashlib.sha256(blob).hexdigest()[:24]


def _run_cell(exp: Experiment, seed: int, audit: bool = False) -> CellResult:
    net = exp.network.build()
    sim_cfg, ctrl_cfg = exp.for_seed(seed)
    run = run_single(net, sim_cfg, ctrl_cfg, audit=audit, turning=exp.turning)
    times = run.solve_times
    return CellResult(run.time_average(), float(np.mean(times)) if times else 0.0)


class CellCache:
    """Directory of ``<key>.json`` files, one per finished cell."""

    def __init__(self, directory: str | Path | None):
        self.directory = Path(directory) if directory else None

    def _path(self, key: str) -> Path:
        return self.directory / f"{key}.json"

    def get(self, key: str) -> CellResult | None:
        if self.directory is None or not self._path(key).exists():
            return None
        data = json.loads(self._path(key).read_text())
        return CellResult(data["averages"], data["solve_time"])

    def put(self, key: str, exp: Experiment, seed: int, result: CellResult) -> None:
        if self.directory is None:
            return
        payload = {"key": key, "seed": seed, "experiment": replace(exp, output=None).to_dict(),
                   "averages": result.averages, "solve_time": result.solve_time}
        write_atomic(self._path(key), json.dumps(payload, sort_keys=True, default=list) + "\n")


def run_cells(experiments: Sequence[Experiment], cache_dir: str | Path | None = None,
              workers: int = 1, audit: bool = False) -> list[list[CellResult]]:
    """Run every seed of every experiment, skipping cached cells.

    Returns, per experiment, the cell results in seed order.  With ``audit``
    the simulator checks vehicle conservation after every step of the cells
    that actually run.
    """
    cache = CellCache(cache_dir)
    todo: list[tuple[int, int, Experiment, int, str]] = []
    results: list[list[CellResult | None]] = []
    for e_idx, exp in enumerate(experiments):
        row: list[CellResult | None] = []
        for s_idx, seed in enumerate(exp.seeds):
            key = cell_key(exp, seed)
            hit = cache.get(key)
            row.append(hit)
            if hit is None:
                todo.append((e_idx, s_idx, exp, seed, key))
        results.append(row)

    def store(item, res: CellResult) -> None:
        e_idx, s_idx, exp, seed, key = item
        cache.put(key, exp, seed, res)
        results[e_idx][s_idx] = res

    if workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [(item, pool.submit(_run_cell, item[2], item[3], audit)) for item in todo]
            for item, fut in futures:
                store(item, fut.result())
    else:
        for item in todo:
            store(item, _run_cell(item[2], item[3], audit))
    return results  # type: ignore[return-value]


def _summary_rows(exp: Experiment, cells: list[CellResult]) -> list[dict]:
    net = exp.network.build()
    rows = summarize(exp, [c.averages for c in cells], net)
    times = np.array([c.solve_time for c in cells])
    extra = dict(rows[0])
    extra.update(indicator=SOLVE_TIME, mean=float(times.mean()),
                 stderr=float(times.std(ddof=1) / math.sqrt(len(times))) if len(times) > 1 else 0.0)
    return rows + [extra]


def _write(base: Experiment, name: str, rows: list[dict]) -> None:
    if base.output:
        write_atomic(Path(base.output) / name, summary_csv(rows))


def _lookup(rows: Iterable[dict], **match) -> dict:
    for r in rows:
        if all(r[k] == v for k, v in match.items()):
            return r
    raise KeyError(match)


def sweep_generation_rate(base: Experiment, rates: Sequence[float],
                          controllers: Sequence[str] = ("ampic", "local", "random", "pattern"),
                          cache_dir: str | Path | None = None, workers: int = 1,
                          audit: bool = False) -> list[dict]:
    """One summary block per (rate, controller)."""
    exps = [replace(base, sim=replace(base.sim, generation_rate=float(p)),
                    controller=replace(base.controller, kind=kind))
            for p in rates for kind in controllers]
    cells = run_cells(exps, cache_dir, workers, audit)
    rows = [r for exp, c in zip(exps, cells) for r in _summary_rows(exp, c)]
    _write(base, "sweep_rate.csv", rows)
    return rows


def sweep_network_size(base: Experiment, sizes: Sequence[int | tuple[int, int]],
                       scaled_rates: Sequence[float], cache_dir: str | Path | None = None,
                       workers: int = 1, audit: bool = False) -> list[dict]:
    """AMPIC and local control on square (or given) lattices at ``p = p_scaled * sqrt(N)``.

    Besides the absolute rows, each (size, p_scaled) gets ``relative_<indicator>``
    rows under the controller label ``ampic/local`` holding the ratio of means.
    """
    exps = []
    for size in sizes:
        rows_, cols_ = (size, size) if isinstance(size, int) else size
        net_spec = NetworkSpec(rows_, cols_, base.network.spacing)
        n = rows_ * cols_
        for pt in scaled_rates:
            for kind in ("ampic", "local"):
                exps.append(replace(base, network=net_spec,
                                    sim=replace(base.sim, generation_rate=float(pt) * math.sqrt(n)),
                                    controller=replace(base.controller, kind=kind)))
    cells = run_cells(exps, cache_dir, workers, audit)
    rows = []
    for k in range(0, len(exps), 2):
        amp = _summary_rows(exps[k], cells[k])
        loc = _summary_rows(exps[k + 1], cells[k + 1])
        rows += amp + loc
        for key in INDICATORS:
            a, b = _lookup(amp, indicator=key), _lookup(loc, indicator=key)
            ratio = a["mean"] / b["mean"] if b["mean"] else math.nan
            rel_se = math.hypot(a["stderr"] / a["mean"] if a["mean"] else 0.0,
                                b["stderr"] / b["mean"] if b["mean"] else 0.0)
            rel = dict(a)
            rel.update(controller="ampic/local", indicator=f"relative_{key}", mean=ratio,
                       stderr=abs(ratio) * rel_se if math.isfinite(ratio) else math.nan)
            rows.append(rel)
    _write(base, "sweep_size.csv", rows)
    return rows


def sweep_horizon(base: Experiment, horizons: Sequence[int], cache_dir: str | Path | None = None,
                  workers: int = 1, audit: bool = False) -> list[dict]:
    """AMPIC at each prediction horizon; rows include mean solver wall time per decision."""
    exps = [replace(base, controller=replace(base.controller, kind="ampic", k_h=int(k)))
            for k in horizons]
    cells = run_cells(exps, cache_dir, workers, audit)
    rows = [r for exp, c in zip(exps, cells) for r in _summary_rows(exp, c)]
    _write(base, "sweep_horizon.csv", rows)
    return rows
