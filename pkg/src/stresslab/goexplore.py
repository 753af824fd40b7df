"""Go-Explore phase 1 over a black-box simulator.

Cells are keyed by a hash of (step, discretized action), carry the action
history that reaches them, and are returned to by replaying that history.
Cell selection is proportional to a fitness score built from visit-count
subscores and a ScoreWeight derived from each cell's value estimate.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .core import Simulator, Trajectory, UsageError, replay, reward

ATTRIBUTES = ("times_chosen", "times_chosen_since_improvement", "times_seen")


@dataclass
class GEParams:
    # count-subscore weights, in ATTRIBUTES order
    weights: tuple = (0.1, 0.0, 0.3)
    exponent: float = 0.5
    eps1: float = 1e-3
    eps2: float = 1e-5
    gamma: float = 0.99
    # bin widths; None means one standard deviation of each action component
    granularity: tuple | None = None
    batch_size: int = 500
    iterations: int = 100
    temperature: float = 100.0

    def __post_init__(self):
        if len(self.weights) != len(ATTRIBUTES):
            raise ValueError(f"need {len(ATTRIBUTES)} weights")
        if not (self.eps1 > 0 and self.eps2 > 0):
            raise ValueError("eps1 and eps2 must be > 0")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.granularity is not None and not all(g > 0 for g in self.granularity):
            raise ValueError("granularity components must be > 0")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")

    def resolved_granularity(self, sim: Simulator) -> np.ndarray:
        if self.granularity is None:
            return sim.action_model.std.copy()
        return np.asarray(self.granularity, dtype=np.float64)


class ActionTrace:
    """Persistent singly-linked action history; cells share common prefixes."""

    __slots__ = ("action", "prev", "length")

    def __init__(self, action: np.ndarray, prev: "ActionTrace | None"):
        self.action = action
        self.prev = prev
        self.length = 1 if prev is None else prev.length + 1

    def to_list(self) -> list[np.ndarray]:
        out = []
        node = self
        while node is not None:
            out.append(node.action)
            node = node.prev
        out.reverse()
        return out

    @classmethod
    def from_list(cls, actions) -> "ActionTrace | None":
        node = None
        for a in actions:
            node = cls(np.asarray(a, dtype=np.float64), node)
        return node


def _hash_ints(values) -> int:
    raw = np.asarray(values, dtype=np.int64).tobytes()
    return int.from_bytes(hashlib.blake2b(raw, digest_size=8).digest(), "little")


def discretize(a, granularity) -> np.ndarray:
    return np.floor(np.asarray(a, dtype=np.float64) / granularity).astype(np.int64)


def cell_index(t: int, a, granularity) -> int:
    """64-bit stable hash of the step number and the binned action."""
    return _hash_ints(np.concatenate(([t], discretize(a, granularity))))


ROOT_INDEX = _hash_ints([-1])


@dataclass(eq=False)
class Cell:
    index: int
    trace: ActionTrace | None = None
    cumulative_return: float = 0.0
    reward: float = 0.0
    value_est: float = 0.0
    times_chosen: int = 0
    times_chosen_since_improvement: int = 0
    times_seen: int = 0
    parent_index: int | None = None
    child_indices: set = field(default_factory=set)
    is_failure: bool = False
    terminal: bool = False

    @property
    def traj_len(self) -> int:
        return 0 if self.trace is None else self.trace.length

    @property
    def action_history(self) -> list[np.ndarray]:
        return [] if self.trace is None else self.trace.to_list()


def count_subscore(cell: Cell, attribute: str, params: GEParams) -> float:
    """w_a * (1 / (v + eps1))**p + eps2 for one visit-count attribute."""
    w = params.weights[ATTRIBUTES.index(attribute)]
    v = getattr(cell, attribute)
    return w * (1.0 / (v + params.eps1)) ** params.exponent + params.eps2


def score_weight(value_est: float, params: GEParams) -> float:
    # values are non-positive and unbounded below; exp keeps the weight positive and monotone
    return math.exp(value_est / params.temperature)


def log_cell_score(cell: Cell, params: GEParams) -> float:
    cnt = sum(count_subscore(cell, a, params) for a in ATTRIBUTES)
    return cell.value_est / params.temperature + math.log1p(cnt)


def cell_score(cell: Cell, params: GEParams) -> float:
    """Unnormalized fitness: ScoreWeight * (1 + sum of count subscores).

    May underflow to 0.0 for very negative values; sampling works on
    :func:`log_cell_score` instead.
    """
    cnt = sum(count_subscore(cell, a, params) for a in ATTRIBUTES)
    return score_weight(cell.value_est, params) * (1.0 + cnt)


class CellPool:
    """Archive of cells keyed by index, seeded with an empty-history root."""

    def __init__(self, params: GEParams):
        self.params = params
        self.cells: dict[int, Cell] = {}
        root = Cell(ROOT_INDEX, times_seen=1)
        self.cells[ROOT_INDEX] = root

    def __len__(self):
        return len(self.cells)

    def __iter__(self) -> Iterator[Cell]:
        return iter(self.cells.values())

    def __contains__(self, index):
        return index in self.cells

    def __getitem__(self, index) -> Cell:
        return self.cells[index]

    @property
    def root(self) -> Cell:
        return self.cells[ROOT_INDEX]

    def selectable(self) -> list[Cell]:
        return [c for c in self.cells.values() if not c.terminal]

    def probabilities(self, cells: list[Cell] | None = None) -> tuple[list[Cell], np.ndarray]:
        """Normalized selection probabilities, computed in log space."""
        cells = self.selectable() if cells is None else cells
        p = self.params
        w = np.asarray(p.weights, dtype=np.float64)
        counts = np.array([[c.times_chosen, c.times_chosen_since_improvement, c.times_seen]
                           for c in cells], dtype=np.float64)
        values = np.fromiter((c.value_est for c in cells), dtype=np.float64, count=len(cells))
        cnt = (w * (1.0 / (counts + p.eps1)) ** p.exponent + p.eps2).sum(axis=1)
        logits = values / p.temperature + np.log1p(cnt)
        logits -= logits.max()
        probs = np.exp(logits)
        probs /= probs.sum()
        return cells, probs


def _mark_chosen(cell: Cell) -> None:
    cell.times_chosen += 1
    cell.times_chosen_since_improvement += 1


def select_cell(pool: CellPool, rng: np.random.Generator) -> Cell:
    """Sample one non-terminal cell with probability score / sum(score)."""
    return select_cells(pool, rng, 1)[0]


def select_cells(pool: CellPool, rng: np.random.Generator, n: int) -> list[Cell]:
    """Draw ``n`` start cells from the same score snapshot (an iteration barrier)."""
    if not pool.selectable():
        raise UsageError("cannot select from an empty cell pool")
    cells, probs = pool.probabilities()
    picks = rng.choice(len(cells), size=n, p=probs)
    chosen = [cells[i] for i in picks]
    for c in chosen:
        _mark_chosen(c)
    return chosen


INSERTED, REPLACED, IGNORED = "inserted", "replaced", "ignored"


def insert_or_update(pool: CellPool, candidate: Cell) -> str:
    """Add an unseen cell, or replace a seen one if the candidate is better.

    Better means higher cumulative return, or equal return reached with a
    shorter trajectory. Replacement keeps the stored visit counts. The seen
    count is incremented in every case.
    """
    old = pool.cells.get(candidate.index)
    if old is None:
        candidate.times_seen += 1
        pool.cells[candidate.index] = candidate
        _link(pool, candidate, candidate.parent_index)
        return INSERTED
    old.times_seen += 1
    better = (candidate.cumulative_return > old.cumulative_return
              or (candidate.cumulative_return == old.cumulative_return
                  and candidate.traj_len < old.traj_len))
    if not better:
        return IGNORED
    if old.parent_index != candidate.parent_index:
        parent = pool.cells.get(old.parent_index)
        if parent is not None:
            parent.child_indices.discard(old.index)
        _link(pool, old, candidate.parent_index)
    old.parent_index = candidate.parent_index
    old.trace = candidate.trace
    old.cumulative_return = candidate.cumulative_return
    old.reward = candidate.reward
    old.is_failure = candidate.is_failure
    old.terminal = candidate.terminal
    return REPLACED


def _link(pool: CellPool, cell: Cell, parent_index) -> None:
    cell.parent_index = parent_index
    if parent_index is not None and parent_index in pool.cells and parent_index != cell.index:
        pool.cells[parent_index].child_indices.add(cell.index)


def _best_child_value(pool: CellPool, cell: Cell) -> float:
    best = None
    for ci in cell.child_indices:
        v = pool.cells[ci].value_est
        if best is None or v > best:
            best = v
    return 0.0 if best is None else best


def _apply_value_update(pool: CellPool, cell: Cell, r: float) -> None:
    target = r + pool.params.gamma * _best_child_value(pool, cell)
    cell.value_est += (target - cell.value_est) / cell.times_seen


def update_value(pool: CellPool, index: int, r: float | None = None) -> None:
    """Running-mean value update toward ``r + gamma * max child value``,
    then the same update on each ancestor with its own stored reward."""
    cell = pool.cells[index]
    _apply_value_update(pool, cell, cell.reward if r is None else r)
    seen = {index}
    parent = cell.parent_index
    while parent is not None and parent in pool.cells and parent not in seen:
        seen.add(parent)
        cell = pool.cells[parent]
        _apply_value_update(pool, cell, cell.reward)
        parent = cell.parent_index


def update_values(pool: CellPool, indices) -> None:
    """Update a set of cells and all their ancestors once each, deepest first.

    Equivalent to one leaf-to-root pass per touched branch: every cell is
    refreshed after all of its touched descendants.
    """
    todo = {}
    for idx in indices:
        while idx is not None and idx in pool.cells and idx not in todo:
            cell = pool.cells[idx]
            todo[idx] = cell
            idx = cell.parent_index
    for cell in sorted(todo.values(), key=lambda c: -c.traj_len):
        _apply_value_update(pool, cell, cell.reward)


@dataclass
class RolloutResult:
    start: Cell
    candidates: list[Cell]
    failure_return: float | None
    failure_trace: ActionTrace | None


def _rollout(sim: Simulator, start: Cell, granularity: np.ndarray, rng: np.random.Generator) -> RolloutResult:
    spec = sim.reward_spec
    handle = sim.initialize()
    trace = start.trace
    for a in start.action_history:
        handle.step(a)
    ret = start.cumulative_return
    parent = start.index
    low, high = sim.action_low, sim.action_high
    candidates = []
    out = None
    while not handle.is_terminal():
        t = handle.t
        a = rng.uniform(low, high)
        out = handle.step(a)
        r = reward(out, spec)
        ret += r
        trace = ActionTrace(a, trace)
        idx = cell_index(t, a, granularity)
        candidates.append(Cell(idx, trace, ret, r, parent_index=parent,
                               is_failure=out.event, terminal=out.terminal))
        parent = idx
    if out is not None and out.event:
        return RolloutResult(start, candidates, ret, trace)
    return RolloutResult(start, candidates, None, None)


@dataclass
class SearchResult:
    """Outcome of a falsification search.

    ``log[i]`` is the best failure return known after iteration ``i + 1``
    (``-inf`` until the first failure).
    """

    best_failure: Trajectory | None
    log: list[float]
    wall_ms: list[float] = field(default_factory=list)
    info: dict = field(default_factory=dict)


def explore(sim: Simulator, params: GEParams, seed: int = 0, pool: CellPool | None = None) -> SearchResult:
    """Run phase-1 exploration for ``params.iterations`` iterations.

    Each iteration selects ``batch_size`` start cells from one score snapshot,
    runs one uniform-action rollout from each (seeded per rollout id, so the
    result does not depend on execution order), then merges the rollouts into
    the pool in rollout order and propagates value estimates.
    """
    if params.iterations < 0 or params.batch_size < 1:
        raise ValueError("iterations must be >= 0 and batch_size >= 1")
    granularity = params.resolved_granularity(sim)
    pool = pool if pool is not None else CellPool(params)
    select_rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    best_return, best_trace = -math.inf, None
    log, wall = [], []
    for it in range(params.iterations):
        t0 = time.perf_counter()
        starts = select_cells(pool, select_rng, params.batch_size)
        results = [
            _rollout(sim, start, granularity,
                     np.random.default_rng(np.random.SeedSequence([seed, 1, it, i])))
            for i, start in enumerate(starts)
        ]
        for res in results:
            touched = []
            for cand in res.candidates:
                if insert_or_update(pool, cand) != IGNORED:
                    touched.append(cand.index)
            if touched:
                res.start.times_chosen_since_improvement = 0
                update_values(pool, touched)
            if res.failure_return is not None and res.failure_return > best_return:
                best_return, best_trace = res.failure_return, res.failure_trace
        log.append(best_return)
        wall.append((time.perf_counter() - t0) * 1e3)

    best = None
    if best_trace is not None:
        best = replay(sim, None, best_trace.to_list())
        if best.total_reward != best_return or not best.ends_in_failure:
            raise RuntimeError("replay of the best failure diverged from its recorded return")
    return SearchResult(best, log, wall, {"pool_size": len(pool), "pool": pool})


# -- checkpointing -----------------------------------------------------------

def save_pool(pool: CellPool, path) -> None:
    """Write params and all cells; histories are stored once as a shared trace table."""
    trace_ids: dict[int, int] = {}
    table = []

    def trace_id(node):
        if node is None:
            return -1
        stack = []
        while node is not None and id(node) not in trace_ids:
            stack.append(node)
            node = node.prev
        for n in reversed(stack):
            trace_ids[id(n)] = len(table)
            table.append([trace_ids[id(n.prev)] if n.prev is not None else -1, n.action.tolist()])
        return trace_ids[id(stack[0])] if stack else trace_ids[id(node)]

    cells = []
    for c in pool:
        cells.append({
            "index": str(c.index), "trace": trace_id(c.trace),
            "cumulative_return": c.cumulative_return, "reward": c.reward, "value_est": c.value_est,
            "times_chosen": c.times_chosen,
            "times_chosen_since_improvement": c.times_chosen_since_improvement,
            "times_seen": c.times_seen,
            "parent_index": None if c.parent_index is None else str(c.parent_index),
            "is_failure": c.is_failure, "terminal": c.terminal,
        })
    doc = {"params": asdict(pool.params), "traces": table, "cells": cells}
    Path(path).write_text(json.dumps(doc))


def load_pool(path) -> CellPool:
    doc = json.loads(Path(path).read_text())
    p = doc["params"]
    params = GEParams(**{**p, "weights": tuple(p["weights"]),
                         "granularity": None if p["granularity"] is None else tuple(p["granularity"])})
    nodes: list[ActionTrace] = []
    for prev, action in doc["traces"]:
        nodes.append(ActionTrace(np.asarray(action, dtype=np.float64), nodes[prev] if prev >= 0 else None))
    pool = CellPool(params)
    pool.cells.clear()
    for d in doc["cells"]:
        idx = int(d["index"])
        pool.cells[idx] = Cell(
            idx, nodes[d["trace"]] if d["trace"] >= 0 else None, d["cumulative_return"], d["reward"],
            d["value_est"], d["times_chosen"], d["times_chosen_since_improvement"], d["times_seen"],
            None if d["parent_index"] is None else int(d["parent_index"]), set(), d["is_failure"], d["terminal"],
        )
    for c in pool:
        if c.parent_index is not None and c.parent_index in pool.cells:
            pool.cells[c.parent_index].child_indices.add(c.index)
    return pool
