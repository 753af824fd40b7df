"""Black-box simulator contract, likelihood reward and deterministic replay.

Every scenario implements :class:`Simulator` / :class:`SimHandle` and every
solver talks to a scenario only through :func:`initialize`, :func:`step`,
:func:`is_terminal` and :func:`replay`. Simulators must not hold hidden
randomness: all stochasticity is carried by the action vector, which is what
makes action-history replay exact.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Protocol, Sequence

import numpy as np

ACTION_DIM = 6
ACTION_FIELDS = ("ped_accel_x", "ped_accel_y", "noise_pos_x", "noise_pos_y",
                 "noise_vel_x", "noise_vel_y")


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class UsageError(RuntimeError):
    """An operation was called in a state that does not allow it."""


def as_action(a: Iterable[float]) -> np.ndarray:
    """Validate and return ``a`` as a float64 ActionVector.

    Layout: ``(ped_accel_x, ped_accel_y, noise_pos_x, noise_pos_y,
    noise_vel_x, noise_vel_y)``.
    """
    arr = np.asarray(a, dtype=np.float64).reshape(-1)
    if arr.shape != (ACTION_DIM,):
        raise ValueError(f"action must have {ACTION_DIM} components, got {arr.shape[0]}")
    # a sum is finite only if every term is
    if not math.isfinite(arr.sum()):
        raise ValueError("action components must be finite")
    return arr


def action_vector(ped_accel=(0.0, 0.0), noise_pos=(0.0, 0.0), noise_vel=(0.0, 0.0)) -> np.ndarray:
    return as_action([*ped_accel, *noise_pos, *noise_vel])


class ActionModel:
    """Nominal action distribution: mean and SPD covariance.

    The Cholesky factor is computed once here; distances use the inverse of the
    lower factor (a triangular solve against the identity), never ``inv(cov)``.
    """

    def __init__(self, mean, covariance):
        mean = np.asarray(mean, dtype=np.float64).reshape(-1)
        cov = np.asarray(covariance, dtype=np.float64)
        n = mean.shape[0]
        if cov.shape != (n, n):
            raise ConfigError("action_model.covariance", f"expected shape {(n, n)}, got {cov.shape}")
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-12 * max(1.0, np.abs(cov).max())):
            raise ConfigError("action_model.covariance", "matrix is not symmetric")
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise ConfigError("action_model.covariance", "matrix is not positive definite") from None
        from scipy.linalg import solve_triangular

        self.mean = mean
        self.covariance = cov
        self.chol = chol
        self._whiten = solve_triangular(chol, np.eye(n), lower=True)
        self.std = np.sqrt(np.diag(cov))
        self.log_det = 2.0 * float(np.sum(np.log(np.diag(chol))))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def mahalanobis(self, a) -> float:
        z = self._whiten @ (np.asarray(a, dtype=np.float64) - self.mean)
        # hypot scales internally, so tiny displacements do not underflow to 0
        return math.hypot(*z)

    def mahalanobis_batch(self, actions) -> np.ndarray:
        d = np.asarray(actions, dtype=np.float64) - self.mean
        z = d @ self._whiten.T
        return np.hypot.reduce(z, axis=1)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "covariance": self.covariance.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ActionModel":
        return cls(d["mean"], d["covariance"])

    def __eq__(self, other):
        return (isinstance(other, ActionModel) and np.array_equal(self.mean, other.mean)
                and np.array_equal(self.covariance, other.covariance))

    def __repr__(self):
        return f"ActionModel(mean={self.mean.tolist()}, std={self.std.tolist()})"


def mahalanobis(a, model: ActionModel) -> float:
    """sqrt((a - mu)^T Sigma^-1 (a - mu)) for the model's mean and covariance."""
    return model.mahalanobis(a)


LIKELIHOODS = ("mahalanobis", "gaussian")


@dataclass(frozen=True)
class RewardSpec:
    """Terminal penalty ``alpha``, heuristic weight ``beta`` (both magnitudes) and horizon.

    ``likelihood="gaussian"`` swaps the per-step penalty for the Gaussian
    negative log-likelihood measured from the mode, ``0.5 * m**2``; it keeps
    the reward non-positive and has the same argmax as the full log-density.
    """

    alpha: float
    beta: float
    horizon: int
    likelihood: str = "mahalanobis"

    def __post_init__(self):
        if not (isinstance(self.horizon, (int, np.integer)) and self.horizon >= 1):
            raise ConfigError("horizon", f"must be an integer >= 1, got {self.horizon!r}")
        if not self.alpha >= 0:
            raise ConfigError("alpha", f"must be >= 0, got {self.alpha}")
        if not self.beta >= 0:
            raise ConfigError("beta", f"must be >= 0, got {self.beta}")
        if self.likelihood not in LIKELIHOODS:
            raise ConfigError("likelihood", f"must be one of {LIKELIHOODS}")


@dataclass(frozen=True, slots=True)
class StepOutcome:
    mahalanobis: float
    event: bool
    terminal: bool
    heuristic_dist: float = 0.0


def reward(outcome: StepOutcome, spec: RewardSpec) -> float:
    """Per-step AST reward: 0 on failure, terminal miss penalty, else likelihood cost."""
    if outcome.event:
        return 0.0
    if outcome.terminal:
        return -spec.alpha - spec.beta * outcome.heuristic_dist
    if spec.likelihood == "gaussian":
        return -0.5 * outcome.mahalanobis * outcome.mahalanobis
    return -outcome.mahalanobis


class SimHandle(Protocol):
    t: int

    def step(self, a: np.ndarray) -> StepOutcome: ...

    def is_terminal(self) -> bool: ...


class Simulator(Protocol):
    """Immutable factory for simulation handles."""

    action_model: ActionModel
    reward_spec: RewardSpec
    action_low: np.ndarray
    action_high: np.ndarray

    def initial_state(self) -> Any: ...

    def initialize(self, s0: Any = None) -> SimHandle: ...


def initialize(sim: Simulator, s0: Any = None) -> SimHandle:
    return sim.initialize(s0)


def step(handle: SimHandle, a) -> StepOutcome:
    return handle.step(a)


def is_terminal(handle: SimHandle) -> bool:
    return handle.is_terminal()


@dataclass(frozen=True)
class Step:
    action: np.ndarray
    outcome: StepOutcome
    reward: float


@dataclass
class Trajectory:
    initial_state_id: str
    steps: list[Step] = field(default_factory=list)
    truncated: bool = False

    def __len__(self):
        return len(self.steps)

    @property
    def total_reward(self) -> float:
        total = 0.0
        for s in self.steps:
            total += s.reward
        return total

    @property
    def ends_in_failure(self) -> bool:
        return bool(self.steps) and self.steps[-1].outcome.event

    @property
    def actions(self) -> list[np.ndarray]:
        return [s.action for s in self.steps]

    @property
    def rewards(self) -> list[float]:
        return [s.reward for s in self.steps]

    @property
    def mahalanobis(self) -> list[float]:
        return [s.outcome.mahalanobis for s in self.steps]

    def to_dict(self) -> dict:
        return {
            "initial_state_id": self.initial_state_id,
            "truncated": self.truncated,
            "total_reward": self.total_reward,
            "ends_in_failure": self.ends_in_failure,
            "steps": [
                {
                    "action": s.action.tolist(),
                    "mahalanobis": s.outcome.mahalanobis,
                    "event": s.outcome.event,
                    "terminal": s.outcome.terminal,
                    "heuristic_dist": s.outcome.heuristic_dist,
                    "reward": s.reward,
                }
                for s in self.steps
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Trajectory":
        steps = [
            Step(
                np.asarray(s["action"], dtype=np.float64),
                StepOutcome(s["mahalanobis"], s["event"], s["terminal"], s["heuristic_dist"]),
                s["reward"],
            )
            for s in d["steps"]
        ]
        return cls(d["initial_state_id"], steps, d.get("truncated", False))


def replay(sim: Simulator, s0: Any, actions: Sequence) -> Trajectory:
    """Run ``actions`` from ``s0`` and record the trajectory.

    Actions past a terminal state are dropped and the result is flagged
    ``truncated`` instead of raising, since restarts may carry stale suffixes.
    """
    if len(actions) > sim.reward_spec.horizon:
        raise ValueError(f"{len(actions)} actions exceed horizon {sim.reward_spec.horizon}")
    handle = sim.initialize(s0)
    spec = sim.reward_spec
    traj = Trajectory(state_id(sim, s0))
    for i, a in enumerate(actions):
        if handle.is_terminal():
            traj.truncated = True
            break
        a = as_action(a)
        out = handle.step(a)
        traj.steps.append(Step(a, out, reward(out, spec)))
    return traj


def state_id(sim: Simulator, s0: Any) -> str:
    ident = getattr(sim, "state_id", None)
    return ident(s0) if ident is not None else repr(s0)


# -- serialization ----------------------------------------------------------

TEXT_HEADER = "t, " + ", ".join(f"a{i + 1}" for i in range(ACTION_DIM)) + ", mahalanobis, reward, event"


def write_trajectory_text(traj: Trajectory, path) -> None:
    """One step per line: ``t, a1..a6, mahalanobis, reward, event``."""
    lines = [TEXT_HEADER]
    for t, s in enumerate(traj.steps):
        vals = [str(t)] + [repr(float(x)) for x in s.action]
        vals += [repr(float(s.outcome.mahalanobis)), repr(float(s.reward)), str(int(s.outcome.event))]
        lines.append(", ".join(vals))
    Path(path).write_text("\n".join(lines) + "\n")


def read_trajectory_text(path) -> list[dict]:
    rows = []
    lines = Path(path).read_text().splitlines()
    for line in lines[1:]:
        if not line.strip():
            continue
        parts = [p.strip() for p in line.split(",")]
        rows.append({
            "t": int(parts[0]),
            "action": np.array([float(x) for x in parts[1:1 + ACTION_DIM]]),
            "mahalanobis": float(parts[1 + ACTION_DIM]),
            "reward": float(parts[2 + ACTION_DIM]),
            "event": bool(int(parts[3 + ACTION_DIM])),
        })
    return rows


def save_trajectory(traj: Trajectory, path, config: dict | None = None) -> None:
    """Structured document with scenario config and steps, enough for exact replay."""
    doc = {"config": config, "trajectory": traj.to_dict()}
    Path(path).write_text(json.dumps(doc, indent=1))


def load_trajectory(path) -> tuple[Trajectory, dict | None]:
    doc = json.loads(Path(path).read_text())
    return Trajectory.from_dict(doc["trajectory"]), doc.get("config")
