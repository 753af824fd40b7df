"""Crosswalk scenario: an IDM-driven car approaching a crossing pedestrian.

The solver's six action components drive the pedestrian's acceleration and
the additive noise on the car's observation of the pedestrian. Positions are
measured from the crosswalk/lane-centre origin; the car drives along +x in the
lane centred on y = 0.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import yaml

from .core import (ACTION_DIM, ActionModel, ConfigError, RewardSpec, StepOutcome,
                   UsageError, as_action)

MPH_25 = 11.17  # m/s


@dataclass(frozen=True)
class IDMParams:
    a_max: float = 3.0
    b_comfort: float = 3.0
    v0: float = MPH_25
    s0_gap: float = 2.0
    time_headway: float = 1.5
    delta: float = 4.0
    b_hard: float = 4.5
    eps_gap: float = 0.1


@dataclass(frozen=True)
class ScenarioConfig:
    name: str = "custom"
    dt: float = 0.1
    horizon: int = 50
    alpha: float = 1e5
    beta: float = 0.0
    likelihood: str = "mahalanobis"
    ped_pos0: tuple = (0.0, -6.0)
    ped_vel0: tuple = (0.0, 1.0)
    car_pos0: tuple = (-30.0, 0.0)
    car_vel0: float = MPH_25
    speed_limit: float = MPH_25
    action_mean: tuple = (0.0,) * ACTION_DIM
    action_cov: tuple = tuple(tuple(0.1 if i == j else 0.0 for j in range(ACTION_DIM))
                              for i in range(ACTION_DIM))
    action_bounds: tuple = ((-2.0, 2.0),) * 2 + ((-1.0, 1.0),) * 4
    idm: IDMParams = field(default_factory=IDMParams)
    half_length: float = 2.5
    half_width: float = 1.4
    lane_half_width: float = 1.85
    response_margin: float = 0.5

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigError("dt", f"must be > 0, got {self.dt}")
        if not (isinstance(self.horizon, (int, np.integer)) and self.horizon >= 1):
            raise ConfigError("horizon", f"must be an integer >= 1, got {self.horizon!r}")
        if self.car_vel0 > self.speed_limit or self.car_vel0 < 0:
            raise ConfigError("car_vel0", "must lie in [0, speed_limit]")
        if not (self.half_length > 0 and self.half_width > 0):
            raise ConfigError("collision_box", "half dimensions must be > 0")
        if len(self.action_bounds) != ACTION_DIM or any(lo > hi for lo, hi in self.action_bounds):
            raise ConfigError("action_bounds", f"need {ACTION_DIM} (lo, hi) pairs with lo <= hi")
        for name in ("ped_pos0", "ped_vel0", "car_pos0"):
            v = getattr(self, name)
            if len(v) != 2 or not all(math.isfinite(x) for x in v):
                raise ConfigError(name, "must be a finite 2-vector")
        # builds and validates the covariance (raises ConfigError if not SPD)
        _ = self.action_model
        _ = self.reward_spec

    @cached_property
    def action_model(self) -> ActionModel:
        return ActionModel(self.action_mean, self.action_cov)

    @cached_property
    def reward_spec(self) -> RewardSpec:
        return RewardSpec(self.alpha, self.beta, self.horizon, self.likelihood)

    @property
    def action_low(self) -> np.ndarray:
        return np.array([lo for lo, _ in self.action_bounds])

    @property
    def action_high(self) -> np.ndarray:
        return np.array([hi for _, hi in self.action_bounds])

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name == "idm":
                v = dataclasses.asdict(v)
            elif isinstance(v, tuple):
                v = _listify(v)
            d[f.name] = v
        return d

    @classmethod
    def from_dict(cls, d: dict, base: "ScenarioConfig | None" = None) -> "ScenarioConfig":
        """Build from a (possibly partial) mapping; missing keys come from ``base``."""
        base = base or cls()
        known = {f.name for f in dataclasses.fields(cls)}
        changes = {}
        for key, value in d.items():
            if key not in known:
                raise ConfigError(key, f"unknown config key; valid keys: {sorted(known)}")
            if key == "idm":
                idm_known = {f.name for f in dataclasses.fields(IDMParams)}
                bad = set(value) - idm_known
                if bad:
                    raise ConfigError(f"idm.{sorted(bad)[0]}", "unknown IDM parameter")
                value = dataclasses.replace(base.idm, **{k: float(v) for k, v in value.items()})
            elif isinstance(value, list):
                value = _tuplify(value)
            elif key == "horizon":
                value = int(value)
            changes[key] = value
        return dataclasses.replace(base, **changes)

    def save(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        d = yaml.safe_load(Path(path).read_text()) or {}
        base = preset(d["preset"]) if "preset" in d else None
        d.pop("preset", None)
        return cls.from_dict(d, base)


def _listify(v):
    return [_listify(x) for x in v] if isinstance(v, (tuple, list)) else v


def _tuplify(v):
    return tuple(_tuplify(x) for x in v) if isinstance(v, (tuple, list)) else float(v) if isinstance(v, int) else v


PRESET_NAMES = ("easy", "medium", "hard")


def preset(name: str) -> ScenarioConfig:
    """Scenario presets; ``easy`` keeps the miss-distance heuristic on."""
    if name == "easy":
        return ScenarioConfig(name="easy", dt=0.1, horizon=50, beta=1e4, ped_pos0=(0.0, -4.0))
    if name == "medium":
        return ScenarioConfig(name="medium", dt=0.1, horizon=50, beta=0.0, ped_pos0=(0.0, -6.0))
    if name == "hard":
        return ScenarioConfig(name="hard", dt=0.05, horizon=100, beta=0.0, ped_pos0=(0.0, -6.0))
    raise ConfigError("scenario", f"unknown preset {name!r}; valid names: {', '.join(PRESET_NAMES)}")


def load_scenario(name_or_path: str, overrides: dict | None = None) -> ScenarioConfig:
    if name_or_path in PRESET_NAMES:
        cfg = preset(name_or_path)
    elif Path(name_or_path).is_file():
        cfg = ScenarioConfig.load(name_or_path)
    else:
        raise ConfigError("scenario", f"{name_or_path!r} is neither a preset ({', '.join(PRESET_NAMES)}) nor a file")
    return ScenarioConfig.from_dict(overrides, cfg) if overrides else cfg


@dataclass(frozen=True, slots=True)
class WorldState:
    t: int
    car_pos: tuple
    car_vel: float
    ped_pos: tuple
    ped_vel: tuple


@dataclass(frozen=True, slots=True)
class ObservedPedestrian:
    pos: tuple
    vel: tuple


def observe(state: WorldState, a) -> ObservedPedestrian:
    """The car's view of the pedestrian: true state plus the action's noise."""
    return ObservedPedestrian(
        (state.ped_pos[0] + a[2], state.ped_pos[1] + a[3]),
        (state.ped_vel[0] + a[4], state.ped_vel[1] + a[5]),
    )


def idm_accel(car_vel: float, gap: float, closing_speed: float, params: IDMParams) -> float:
    """Intelligent-driver acceleration, clamped to ``[-b_hard, a_max]``.

    ``gap = inf`` means free road. Non-positive gaps are raised to ``eps_gap``.
    The desired gap ``s*`` is floored at zero so a receding obstacle never
    produces a braking term.
    """
    p = params
    free = 1.0 - (car_vel / p.v0) ** p.delta
    if math.isinf(gap):
        acc = p.a_max * free
    else:
        gap = max(gap, p.eps_gap)
        s_star = p.s0_gap + car_vel * p.time_headway + car_vel * closing_speed / (2.0 * math.sqrt(p.a_max * p.b_comfort))
        s_star = max(s_star, 0.0)
        acc = p.a_max * (free - (s_star / gap) ** 2)
    return min(max(acc, -p.b_hard), p.a_max)


def car_response(state: WorldState, obs: ObservedPedestrian, cfg: ScenarioConfig) -> float:
    """Crossing-response rule: follow the observed pedestrian as a virtual obstacle
    while it is in the lane, or near it and walking towards it; otherwise free road."""
    ox, oy = obs.pos
    front = state.car_pos[0] + cfg.half_length
    ahead = ox >= state.car_pos[0]
    dy = abs(oy - state.car_pos[1])
    in_lane = dy < cfg.lane_half_width
    approaching = dy < cfg.lane_half_width + cfg.response_margin and obs.vel[1] * (oy - state.car_pos[1]) < 0
    if ahead and (in_lane or approaching):
        return idm_accel(state.car_vel, ox - front, state.car_vel - obs.vel[0], cfg.idm)
    return idm_accel(state.car_vel, math.inf, 0.0, cfg.idm)


def transition(state: WorldState, a, cfg: ScenarioConfig) -> WorldState:
    """Advance one step with semi-implicit Euler; ``a`` is already clamped."""
    dt = cfg.dt
    pvx = state.ped_vel[0] + a[0] * dt
    pvy = state.ped_vel[1] + a[1] * dt
    px = state.ped_pos[0] + pvx * dt
    py = state.ped_pos[1] + pvy * dt

    acc = car_response(state, observe(state, a), cfg)
    v = min(max(state.car_vel + acc * dt, 0.0), cfg.speed_limit)
    cx = state.car_pos[0] + v * dt
    return WorldState(state.t + 1, (cx, state.car_pos[1]), v, (px, py), (pvx, pvy))


def check_collision(state: WorldState, cfg: ScenarioConfig) -> bool:
    """Pedestrian point inside the closed axis-aligned car box."""
    return (abs(state.ped_pos[0] - state.car_pos[0]) <= cfg.half_length
            and abs(state.ped_pos[1] - state.car_pos[1]) <= cfg.half_width)


def heuristic_distance(state: WorldState) -> float:
    return math.hypot(state.car_pos[0] - state.ped_pos[0], state.car_pos[1] - state.ped_pos[1])


class CrosswalkHandle:
    __slots__ = ("sim", "state", "event")

    def __init__(self, sim: "CrosswalkSim", state: WorldState):
        self.sim = sim
        self.state = state
        self.event = False

    @property
    def t(self) -> int:
        return self.state.t

    def is_terminal(self) -> bool:
        return self.event or self.state.t >= self.sim.config.horizon

    def step(self, a) -> StepOutcome:
        if self.is_terminal():
            raise UsageError("cannot step a terminal simulation handle")
        sim = self.sim
        a = as_action(a)
        # likelihood is charged on the requested action, dynamics use the clamped one
        m = sim.action_model.mahalanobis(a)
        clamped = np.minimum(np.maximum(a, sim.action_low), sim.action_high).tolist()
        self.state = transition(self.state, clamped, sim.config)
        self.event = check_collision(self.state, sim.config)
        terminal = self.event or self.state.t >= sim.config.horizon
        return StepOutcome(m, self.event, terminal, heuristic_distance(self.state))


class CrosswalkSim:
    """Simulator factory for one :class:`ScenarioConfig`."""

    def __init__(self, config: ScenarioConfig):
        self.config = config
        self.action_model = config.action_model
        self.reward_spec = config.reward_spec
        self.action_low = config.action_low
        self.action_high = config.action_high

    def initial_state(self) -> WorldState:
        c = self.config
        return WorldState(0, tuple(c.car_pos0), float(c.car_vel0), tuple(c.ped_pos0), tuple(c.ped_vel0))

    def state_id(self, s0) -> str:
        s0 = s0 or self.initial_state()
        return f"{self.config.name}:car={s0.car_pos},{s0.car_vel};ped={s0.ped_pos},{s0.ped_vel}"

    def initial_features(self, s0=None) -> np.ndarray:
        """Initial conditions as a small normalized vector (what a black-box agent may see)."""
        s0 = s0 or self.initial_state()
        return np.array([s0.car_pos[0] / 10.0, s0.car_vel / self.config.speed_limit,
                         s0.ped_pos[0] / 10.0, s0.ped_pos[1] / 10.0, s0.ped_vel[0], s0.ped_vel[1]])

    def initialize(self, s0: WorldState | None = None) -> CrosswalkHandle:
        if s0 is None:
            s0 = self.initial_state()
        if not isinstance(s0, WorldState):
            raise ConfigError("s0", f"expected WorldState, got {type(s0).__name__}")
        if s0.t != 0:
            raise ConfigError("s0.t", "initial state must be at t = 0")
        vals = [*s0.car_pos, s0.car_vel, *s0.ped_pos, *s0.ped_vel]
        if not all(math.isfinite(v) for v in vals):
            raise ConfigError("s0", "state components must be finite")
        return CrosswalkHandle(self, s0)
