"""Monte Carlo tree search with progressive widening, used as a baseline solver.

The simulator is deterministic given the action sequence, so only the action
side of double progressive widening is needed: a tree node is identified by
the path of edge actions from the root, and stepping an edge always lands in
the same child.
"""

from __future__ import annotations

import json
import math
import time
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .core import Simulator, UsageError, replay, reward
from .goexplore import SearchResult, discretize


@dataclass
class MCTSParams:
    c_explore: float = 100.0
    k_dpw: float = 0.5
    alpha_dpw: float = 0.5
    batch_size: int = 500
    iterations: int = 100
    max_depth: int | None = None
    granularity: tuple | None = None

    def __post_init__(self):
        if self.c_explore < 0:
            raise ValueError("c_explore must be >= 0")
        if self.k_dpw <= 0:
            raise ValueError("k_dpw must be > 0")
        if not 0 < self.alpha_dpw < 1:
            raise ValueError("alpha_dpw must lie in (0, 1)")


class Edge:
    __slots__ = ("action", "n", "q", "child", "step_reward")

    def __init__(self, action: np.ndarray):
        self.action = action
        self.n = 0
        self.q = 0.0
        self.child: TreeNode | None = None
        self.step_reward = 0.0


class TreeNode:
    __slots__ = ("n", "edges")

    def __init__(self):
        self.n = 0
        self.edges: dict[tuple, Edge] = {}


def ucb_select(node: TreeNode, c: float) -> Edge:
    """argmax_a Q(s,a) + c * sqrt(log N(s) / N(s,a)).

    Unvisited edges win outright; ties go to the earliest-inserted edge.
    """
    if not node.edges:
        raise UsageError("node has no edges; expand before selecting")
    best, best_score = None, -math.inf
    log_n = math.log(node.n) if node.n > 0 else 0.0
    for edge in node.edges.values():
        if edge.n == 0:
            return edge
        score = edge.q + c * math.sqrt(log_n / edge.n)
        if score > best_score:
            best, best_score = edge, score
    return best


def dpw_allow_new_action(node: TreeNode, params: MCTSParams) -> bool:
    """Widen while |edges| < k * N(s)**alpha; a node without edges always widens."""
    n_edges = len(node.edges)
    return n_edges == 0 or n_edges < params.k_dpw * node.n ** params.alpha_dpw


class RolloutOutcome(NamedTuple):
    ret: float
    actions: list
    rewards: list
    failed: bool


def rollout(handle, sim: Simulator, rng: np.random.Generator) -> RolloutOutcome:
    """Uniform random actions until terminal; undiscounted sum of rewards."""
    spec = sim.reward_spec
    low, high = sim.action_low, sim.action_high
    ret, actions, rewards, failed = 0.0, [], [], False
    while not handle.is_terminal():
        a = rng.uniform(low, high)
        out = handle.step(a)
        r = reward(out, spec)
        ret += r
        actions.append(a)
        rewards.append(r)
        failed = out.event
    return RolloutOutcome(ret, actions, rewards, failed)


def backpropagate(path: list[tuple[TreeNode, Edge]], step_rewards: list[float], tail_return: float = 0.0) -> None:
    """Leaf-to-root running-mean backup of the return from each edge onward."""
    g = tail_return
    for (node, edge), r in zip(reversed(path), reversed(step_rewards)):
        g = r + g
        node.n += 1
        edge.n += 1
        edge.q += (g - edge.q) / edge.n


class MCTS:
    def __init__(self, sim: Simulator, params: MCTSParams, seed: int = 0):
        self.sim = sim
        self.params = params
        self.rng = np.random.default_rng(seed)
        self.root = TreeNode()
        g = params.granularity
        self.granularity = sim.action_model.std.copy() if g is None else np.asarray(g, dtype=np.float64)
        self.max_depth = params.max_depth or sim.reward_spec.horizon
        self.best_return = -math.inf
        self.best_actions: list | None = None

    def simulate(self) -> None:
        sim, params, rng = self.sim, self.params, self.rng
        spec = sim.reward_spec
        handle = sim.initialize()
        node = self.root
        path, rewards, actions = [], [], []
        failed = False
        depth = 0
        while not handle.is_terminal() and depth < self.max_depth:
            expanded = False
            if dpw_allow_new_action(node, params):
                a = rng.uniform(sim.action_low, sim.action_high)
                key = tuple(discretize(a, self.granularity).tolist())
                if key not in node.edges:
                    node.edges[key] = Edge(a)
                    expanded = True
                edge = node.edges[key]
            else:
                edge = ucb_select(node, params.c_explore)
            out = handle.step(edge.action)
            r = reward(out, spec)
            edge.step_reward = r
            path.append((node, edge))
            rewards.append(r)
            actions.append(edge.action)
            failed = out.event
            depth += 1
            if edge.child is None:
                edge.child = TreeNode()
                expanded = True
            node = edge.child
            if expanded:
                break
        tail = 0.0
        rewards_all = rewards
        if not handle.is_terminal() and depth < self.max_depth:
            ro = rollout(handle, sim, rng)
            tail = ro.ret
            actions.extend(ro.actions)
            rewards_all = rewards + ro.rewards
            failed = ro.failed
        backpropagate(path, rewards, tail)
        if failed:
            # same summation order as replay, so the recorded return is bit-exact
            total = 0.0
            for r in rewards_all:
                total += r
            if total > self.best_return:
                self.best_return, self.best_actions = total, actions

    def stats(self) -> dict:
        nodes, edges = 0, 0
        depth_hist: Counter = Counter()
        stack = [(self.root, 0)]
        while stack:
            node, d = stack.pop()
            nodes += 1
            depth_hist[d] += 1
            for e in node.edges.values():
                edges += 1
                if e.child is not None:
                    stack.append((e.child, d + 1))
        return {"nodes": nodes, "edges": edges, "root_visits": self.root.n,
                "depth_histogram": {str(k): depth_hist[k] for k in sorted(depth_hist)}}


def search(sim: Simulator, params: MCTSParams, seed: int = 0) -> SearchResult:
    """``iterations`` x ``batch_size`` simulations of selection, widening, rollout and backup."""
    tree = MCTS(sim, params, seed)
    log, wall = [], []
    for _ in range(params.iterations):
        t0 = time.perf_counter()
        for _ in range(params.batch_size):
            tree.simulate()
        log.append(tree.best_return)
        wall.append((time.perf_counter() - t0) * 1e3)
    best = None
    if tree.best_actions is not None:
        # rollouts stop at the horizon, so recorded actions never exceed it
        best = replay(sim, None, tree.best_actions)
        if best.total_reward != tree.best_return or not best.ends_in_failure:
            raise RuntimeError("replay of the best failure diverged from its recorded return")
    return SearchResult(best, log, wall, {"tree": tree.stats(), "mcts": tree})


def write_tree_report(result: SearchResult, path) -> None:
    Path(path).write_text(json.dumps(result.info["tree"], indent=1))
