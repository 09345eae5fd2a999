"""Exhaustive adapter-architecture search.

Every cell of the Cartesian product of the grid axes trains one ST-A per
probe task and seed with the same train config. Cells are ranked by their
mean per-task rank; marginal tables average dev accuracy over the axes that
are not being inspected.
"""

from __future__ import annotations

import csv
import io
import itertools
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .adapters import AdapterConfig, adapter_shapes, param_count
from .backbone import BackboneConfig, BackboneParams
from .config import GridConfig
from .errors import BudgetError, ConfigError, UsageError
from .tasks import Suite
from .training import TrainConfig, train_st_adapter

# Nested granularity levels for the marginal tables, coarse to fine.
LEVELS = {
    "a": ("placement",),
    "b": ("placement", "pretrained_ln"),
    "c": ("placement", "pretrained_ln", "new_ln"),
    "r": ("reduction_factor",),
    "nonlinearity": ("nonlinearity",),
}


@dataclass(frozen=True)
class Cell:
    index: int
    placement: str
    pretrained_ln: str
    new_ln: str
    reduction_factor: int
    nonlinearity: str

    def adapter_config(self) -> AdapterConfig:
        return AdapterConfig(self.placement, self.reduction_factor, self.nonlinearity,
                             pretrained_ln=self.pretrained_ln, new_ln=self.new_ln)

    def axes(self) -> dict:
        return {a: getattr(self, a) for a in GridConfig.AXES}


def cell_count(grid: GridConfig) -> int:
    return int(np.prod([len(getattr(grid, a)) for a in GridConfig.AXES]))


def enumerate_cells(grid: GridConfig) -> list[Cell]:
    values = [getattr(grid, a) for a in GridConfig.AXES]
    return [Cell(i, *combo) for i, combo in enumerate(itertools.product(*values))]


def check_budget(grid: GridConfig, max_cells: int | None = None) -> int:
    n = cell_count(grid)
    limit = grid.max_cells if max_cells is None else max_cells
    if n > limit:
        raise BudgetError(f"grid has {n} cells, budget allows {limit}")
    return n


def validate_cells(cells: Sequence[Cell], bcfg: BackboneConfig) -> None:
    """Build every cell's adapter config up front so bad axes fail before training."""
    bad = []
    for c in cells:
        try:
            c.adapter_config().bottleneck_dim(bcfg.hidden_dim)
        except ConfigError as exc:
            bad.append(f"cell {c.index}: {exc}")
    if bad:
        raise ConfigError(f"{len(bad)} invalid grid cells, first: {bad[0]}")


def count_check(cells: Sequence[Cell], bcfg: BackboneConfig) -> list[tuple[int, int, int]]:
    """``(index, closed form, traversal)`` for every cell whose counts disagree."""
    out = []
    for c in cells:
        acfg = c.adapter_config()
        traversed = sum(int(np.prod(s)) for s in adapter_shapes(acfg, bcfg).values())
        closed = param_count(acfg, bcfg)
        if traversed != closed:
            out.append((c.index, closed, traversed))
    return out


# ---------------------------------------------------------------------------
# execution

_WORKER: dict = {}


def _init_worker(theta: BackboneParams, suite: Suite) -> None:
    _WORKER["theta"] = theta
    _WORKER["suite"] = suite


def _run_job(job: tuple) -> tuple[int, str, int, float]:
    cell, task_name, seed, cfg = job
    res = train_st_adapter(_WORKER["theta"], _WORKER["suite"][task_name], cell.adapter_config(), replace(cfg, seed=seed))
    return cell.index, task_name, seed, res.record.best_dev_accuracy


@dataclass
class GridResult:
    cells: list
    tasks: list
    seeds: list
    scores: np.ndarray  # [cells, tasks, seeds] best dev accuracy
    rank: np.ndarray = field(init=False)
    best: int = field(init=False)

    def __post_init__(self):
        means = self.task_means()
        per_task = np.stack([_average_ranks(-means[:, j]) for j in range(means.shape[1])], axis=1)
        self.rank = per_task.mean(axis=1)
        self.best = int(np.lexsort((np.arange(len(self.cells)), self.rank))[0])

    def task_means(self) -> np.ndarray:
        return self.scores.mean(axis=2)

    def ranked(self) -> list[dict]:
        means = self.task_means()
        rows = []
        for i in np.lexsort((np.arange(len(self.cells)), self.rank)):
            c = self.cells[i]
            rows.append({
                "index": c.index,
                **c.axes(),
                **{f"dev_{t}": float(means[i, j]) for j, t in enumerate(self.tasks)},
                "mean_dev": float(means[i].mean()),
                "rank": float(self.rank[i]),
                "best": bool(i == self.best),
            })
        return rows

    def marginal(self, axes: Sequence[str]) -> list[dict]:
        means = self.task_means().mean(axis=1)
        groups: dict[tuple, list[float]] = {}
        for c, m in zip(self.cells, means):
            groups.setdefault(tuple(getattr(c, a) for a in axes), []).append(float(m))
        return [{**dict(zip(axes, k)), "mean_dev": float(np.mean(v)), "cells": len(v)} for k, v in groups.items()]

    def marginals(self) -> dict[str, list[dict]]:
        return {name: self.marginal(axes) for name, axes in LEVELS.items()}

    def best_config(self) -> AdapterConfig:
        return self.cells[self.best].adapter_config()

    def to_dict(self) -> dict:
        return {
            "tasks": list(self.tasks),
            "seeds": list(self.seeds),
            "best": self.best,
            "best_preset": self.best_config().preset,
            "ranked": self.ranked(),
            "marginals": self.marginals(),
        }


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks of ascending ``x``; tied values share their mean rank."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    xs = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def grid_search(grid: GridConfig, theta: BackboneParams, suite: Suite, probe_tasks: Sequence[str],
                cfg: TrainConfig, seeds: Sequence[int], workers: int = 1, max_cells: int | None = None) -> GridResult:
    check_budget(grid, max_cells)
    cells = enumerate_cells(grid)
    validate_cells(cells, theta.config)
    if not probe_tasks:
        raise UsageError("grid search needs at least one probe task")
    missing = [n for n in probe_tasks if n not in suite.names]
    if missing:
        raise UsageError(f"probe tasks not in suite: {missing}")
    jobs = [(c, t, s, cfg) for c in cells for t in probe_tasks for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(theta, suite)) as pool:
            results = list(pool.map(_run_job, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        _init_worker(theta, suite)
        results = [_run_job(j) for j in jobs]
    t_idx = {t: j for j, t in enumerate(probe_tasks)}
    s_idx = {s: k for k, s in enumerate(seeds)}
    scores = np.full((len(cells), len(probe_tasks), len(seeds)), np.nan)
    for ci, t, s, acc in results:
        scores[ci, t_idx[t], s_idx[s]] = acc
    return GridResult(cells, list(probe_tasks), list(seeds), scores)


def rows_to_csv(rows: Sequence[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()
