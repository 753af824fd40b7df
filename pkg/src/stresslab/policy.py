"""Recurrent Gaussian policy, PPO with GAE, the DRL solver and the backwards algorithm.

The policy sees only what a black-box agent may see: the normalized step
index, its previous action, and the scenario's initial conditions. All
sampling noise comes from numpy generators so runs are reproducible from a
seed; torch is used for the network math only, in float64.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .core import Simulator, Trajectory, replay, reward
from .goexplore import SearchResult

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class OptimConfig:
    clip_range: float = 1.0
    kl_coef: float = 1.0
    gamma: float = 0.99
    lam: float = 1.0
    learning_rate: float = 3e-4
    epochs_per_update: int = 10
    entropy_coef: float = 0.0
    value_coef: float = 0.5
    batch_size: int = 500
    iterations: int = 100
    hidden_size: int = 64
    cell: str = "gru"
    init_std_scale: float = 1.0
    log_std_bounds: tuple = (-6.0, 1.0)
    normalize_advantages: bool = True

    def __post_init__(self):
        if self.clip_range <= 0:
            raise ValueError("clip_range must be > 0")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0 <= self.lam <= 1:
            raise ValueError("lam must lie in [0, 1]")
        if self.cell not in CELLS:
            raise ValueError(f"cell must be one of {CELLS}")


@dataclass
class BAConfig:
    iterations: int = 100
    batch_size: int = 5000
    # None spreads the iterations evenly over the expert's steps
    epochs_per_step: int | None = None


# -- network -----------------------------------------------------------------

class PeepholeLSTMCell(nn.Module):
    """LSTM cell whose gates also read the cell state (diagonal peepholes)."""

    def __init__(self, input_size: int, hidden_size: int):
        super().__init__()
        self.hidden_size = hidden_size
        self.ih = nn.Linear(input_size, 4 * hidden_size)
        self.hh = nn.Linear(hidden_size, 4 * hidden_size, bias=False)
        self.peep = nn.Parameter(torch.zeros(3, hidden_size))

    def forward(self, x, state):
        h, c = state
        i, f, g, o = (self.ih(x) + self.hh(h)).chunk(4, dim=-1)
        i = torch.sigmoid(i + self.peep[0] * c)
        f = torch.sigmoid(f + self.peep[1] * c)
        c = f * c + i * torch.tanh(g)
        o = torch.sigmoid(o + self.peep[2] * c)
        return o * torch.tanh(c), c


CELLS = ("gru", "lstm", "peephole_lstm")


class GaussianPolicy(nn.Module):
    """Recurrent core with a mean head, a state-independent log-std and a value head.

    The mean is expressed around the nominal action: ``mu_a + std_a * head(h)``,
    so a zero-initialized head starts at the most likely action. The value
    head reads a detached hidden state so value regression never shapes the
    policy features, and predicts returns divided by ``value_scale``.
    """

    def __init__(self, obs_dim: int, action_mean, action_std, hidden_size: int = 64, cell: str = "gru",
                 init_std_scale: float = 1.0, log_std_bounds=(-6.0, 1.0), value_scale: float = 1.0,
                 seed: int = 0):
        super().__init__()
        self.obs_dim = obs_dim
        self.act_dim = len(action_mean)
        self.hidden_size = hidden_size
        self.cell_type = cell
        self.log_std_bounds = tuple(log_std_bounds)
        self.value_scale = float(value_scale)
        self.init_std_scale = float(init_std_scale)
        self.register_buffer("action_mean", torch.as_tensor(np.asarray(action_mean), dtype=torch.float64))
        self.register_buffer("action_std", torch.as_tensor(np.asarray(action_std), dtype=torch.float64))
        if cell == "gru":
            self.core = nn.GRU(obs_dim, hidden_size, batch_first=True)
        elif cell == "lstm":
            self.core = nn.LSTM(obs_dim, hidden_size, batch_first=True)
        elif cell == "peephole_lstm":
            self.core = PeepholeLSTMCell(obs_dim, hidden_size)
        else:
            raise ValueError(f"cell must be one of {CELLS}")
        self.mean_head = nn.Linear(hidden_size, self.act_dim)
        self.value_head = nn.Linear(hidden_size, 1)
        self.log_std = nn.Parameter(torch.log(self.action_std * init_std_scale).clone())
        self.double()
        self._init_weights(np.random.default_rng(seed))
        self.hidden = None

    def _init_weights(self, rng: np.random.Generator) -> None:
        bound = 1.0 / math.sqrt(self.hidden_size)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name == "log_std":
                    continue
                if name.startswith("mean_head"):
                    vals = rng.uniform(-0.01, 0.01, size=p.shape) if name.endswith("weight") else np.zeros(p.shape)
                elif name.startswith("core.peep"):
                    vals = np.zeros(p.shape)
                else:
                    vals = rng.uniform(-bound, bound, size=p.shape)
                p.copy_(torch.as_tensor(vals, dtype=torch.float64))

    def initial_hidden(self, batch: int):
        h = torch.zeros(batch, self.hidden_size, dtype=torch.float64)
        if self.cell_type == "gru":
            return h
        return (h, h.clone())

    def clamped_log_std(self):
        lo, hi = self.log_std_bounds
        return self.log_std.clamp(lo, hi)

    def _heads(self, feats):
        mean = self.action_mean + self.action_std * self.mean_head(feats)
        value = self.value_head(feats.detach()).squeeze(-1)
        return mean, self.clamped_log_std(), value

    def step(self, obs: torch.Tensor, hidden):
        """One time step for a batch: obs [B, D] -> (mean [B, A], log_std [A], value [B], hidden)."""
        if self.cell_type == "gru":
            out, h = self.core(obs.unsqueeze(1), hidden.unsqueeze(0))
            feats, hidden = out[:, 0], h[0]
        elif self.cell_type == "lstm":
            h, c = hidden
            out, (h, c) = self.core(obs.unsqueeze(1), (h.unsqueeze(0), c.unsqueeze(0)))
            feats, hidden = out[:, 0], (h[0], c[0])
        else:
            feats, c = self.core(obs, hidden)
            hidden = (feats, c)
        mean, log_std, value = self._heads(feats)
        return mean, log_std, value, hidden

    def forward(self, obs: torch.Tensor):
        """Full sequences: obs [B, L, D] -> (mean [B, L, A], log_std [A], value [B, L])."""
        if self.cell_type == "peephole_lstm":
            hidden = self.initial_hidden(obs.shape[0])
            feats = []
            for t in range(obs.shape[1]):
                h, c = self.core(obs[:, t], hidden)
                hidden = (h, c)
                feats.append(h)
            feats = torch.stack(feats, dim=1)
        else:
            feats, _ = self.core(obs)
        return self._heads(feats)

    def reset(self, batch: int = 1) -> None:
        self.hidden = self.initial_hidden(batch)

    def get_flat(self) -> np.ndarray:
        return nn.utils.parameters_to_vector(self.parameters()).detach().numpy().copy()

    def set_flat(self, theta) -> None:
        nn.utils.vector_to_parameters(torch.as_tensor(np.asarray(theta), dtype=torch.float64), self.parameters())

    def descriptor(self) -> dict:
        return {
            "obs_dim": self.obs_dim, "hidden_size": self.hidden_size, "cell": self.cell_type,
            "action_mean": self.action_mean.tolist(), "action_std": self.action_std.tolist(),
            "log_std_bounds": list(self.log_std_bounds), "value_scale": self.value_scale,
            "init_std_scale": self.init_std_scale,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps({"architecture": self.descriptor(), "theta": self.get_flat().tolist()}))

    @classmethod
    def load(cls, path) -> "GaussianPolicy":
        doc = json.loads(Path(path).read_text())
        d = doc["architecture"]
        policy = cls(d["obs_dim"], d["action_mean"], d["action_std"], d["hidden_size"], d["cell"],
                     d["init_std_scale"], tuple(d["log_std_bounds"]), d["value_scale"])
        policy.set_flat(doc["theta"])
        return policy


def make_policy(sim: Simulator, config: OptimConfig, seed: int = 0) -> GaussianPolicy:
    model = sim.action_model
    obs_dim = 1 + model.dim + len(_initial_features(sim))
    return GaussianPolicy(obs_dim, model.mean, model.std, config.hidden_size, config.cell,
                          config.init_std_scale, config.log_std_bounds,
                          value_scale=max(1.0, sim.reward_spec.alpha), seed=seed)


def _initial_features(sim: Simulator) -> np.ndarray:
    feats = getattr(sim, "initial_features", None)
    return np.zeros(0) if feats is None else np.asarray(feats(), dtype=np.float64)


def observation(sim: Simulator, t: int, prev_action) -> np.ndarray:
    """(t / T, whitened previous action, initial-condition features)."""
    model = sim.action_model
    prev = np.zeros(model.dim) if prev_action is None else (np.asarray(prev_action) - model.mean) / model.std
    return np.concatenate(([t / sim.reward_spec.horizon], prev, _initial_features(sim)))


def gaussian_log_prob(a, mean, log_std) -> np.ndarray:
    """Exact diagonal-Gaussian log-density, summed over the last axis."""
    a, mean, log_std = np.asarray(a), np.asarray(mean), np.asarray(log_std)
    z = (a - mean) / np.exp(log_std)
    return -0.5 * np.sum(z * z, axis=-1) - np.sum(log_std * np.ones_like(a), axis=-1) - 0.5 * a.shape[-1] * LOG_2PI


def _torch_log_prob(a, mean, log_std):
    z = (a - mean) / torch.exp(log_std)
    return -0.5 * (z * z).sum(-1) - log_std.sum(-1) - 0.5 * a.shape[-1] * LOG_2PI


def policy_act(policy: GaussianPolicy, obs, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    """Sample one action for a single episode, advancing the policy's hidden state."""
    if policy.hidden is None:
        policy.reset(1)
    with torch.no_grad():
        mean, log_std, _, policy.hidden = policy.step(
            torch.as_tensor(np.asarray(obs, dtype=np.float64)).unsqueeze(0), policy.hidden)
    mean = mean[0].numpy()
    log_std = log_std.numpy()
    a = mean + np.exp(log_std) * rng.standard_normal(mean.shape[0])
    return a, float(gaussian_log_prob(a, mean, log_std))


# -- advantages ---------------------------------------------------------------

def gae_advantages(rewards, values, gamma: float, lam: float) -> np.ndarray:
    """A_t = sum_l (gamma*lam)^l delta_{t+l}, delta_t = r_t + gamma V_{t+1} - V_t, V after the end = 0."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    adv = np.zeros_like(rewards)
    running = 0.0
    next_value = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        delta = rewards[t] + gamma * next_value - values[t]
        running = delta + gamma * lam * running
        adv[t] = running
        next_value = values[t]
    return adv


# -- rollouts -------------------------------------------------------------------

@dataclass
class Episode:
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    # True where the policy chose the action (False on replayed prefix steps)
    controlled: np.ndarray
    failed: bool

    def __len__(self):
        return len(self.rewards)

    @property
    def total_reward(self) -> float:
        total = 0.0
        for r in self.rewards.tolist():
            total += r
        return total


@dataclass
class RolloutBatch:
    episodes: list[Episode]

    @property
    def n_steps(self) -> int:
        return int(sum(ep.controlled.sum() for ep in self.episodes))


def collect_batch(policy: GaussianPolicy, sim: Simulator, n_episodes: int, rng: np.random.Generator,
                  prefix=()) -> RolloutBatch:
    """Run ``n_episodes`` in lockstep; the first ``len(prefix)`` actions are replayed, the rest sampled."""
    spec = sim.reward_spec
    prefix = [np.asarray(a, dtype=np.float64) for a in prefix]
    handles = [sim.initialize() for _ in range(n_episodes)]
    hidden = policy.initial_hidden(n_episodes)
    rec = [{"obs": [], "act": [], "rew": [], "logp": [], "val": [], "ctl": [], "failed": False}
           for _ in range(n_episodes)]
    prev = [None] * n_episodes
    alive = list(range(n_episodes))
    t = 0
    while alive:
        obs = np.stack([observation(sim, t, prev[i]) for i in alive])
        with torch.no_grad():
            h_in = hidden[alive] if not isinstance(hidden, tuple) else tuple(x[alive] for x in hidden)
            mean, log_std, value, h_out = policy.step(torch.as_tensor(obs), h_in)
        if isinstance(hidden, tuple):
            for x, y in zip(hidden, h_out):
                x[alive] = y
        else:
            hidden[alive] = h_out
        mean, log_std, value = mean.numpy(), log_std.numpy(), value.numpy() * policy.value_scale
        if t < len(prefix):
            acts = np.repeat(prefix[t][None], len(alive), axis=0)
            controlled = False
        else:
            acts = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
            controlled = True
        logps = gaussian_log_prob(acts, mean, log_std)
        still = []
        for j, i in enumerate(alive):
            out = handles[i].step(acts[j])
            r = rec[i]
            r["obs"].append(obs[j])
            r["act"].append(acts[j])
            r["rew"].append(reward(out, spec))
            r["logp"].append(logps[j])
            r["val"].append(value[j])
            r["ctl"].append(controlled)
            prev[i] = acts[j]
            if out.terminal:
                r["failed"] = out.event
            else:
                still.append(i)
        alive = still
        t += 1
    episodes = [Episode(np.array(r["obs"]), np.array(r["act"]), np.array(r["rew"]), np.array(r["logp"]),
                        np.array(r["val"]), np.array(r["ctl"], dtype=bool), r["failed"]) for r in rec]
    return RolloutBatch(episodes)


# -- PPO ------------------------------------------------------------------------

def diag_gaussian_kl(mean_old, log_std_old, mean_new, log_std_new):
    """KL(old || new) for diagonal Gaussians, summed over the action axis."""
    var_old = torch.exp(2 * log_std_old)
    var_new = torch.exp(2 * log_std_new)
    return (log_std_new - log_std_old + (var_old + (mean_old - mean_new) ** 2) / (2 * var_new) - 0.5).sum(-1)


def ppo_objective(logp_new, logp_old, advantages, mean_old, log_std_old, mean_new, log_std_new,
                  clip_range: float, kl_coef: float):
    """Clipped surrogate minus the KL penalty, averaged over steps (to be maximized).

    Returns ``(objective, ratio, kl)`` with per-step ratio and KL tensors.
    """
    ratio = torch.exp(logp_new - logp_old)
    surr = torch.minimum(ratio * advantages, ratio.clamp(1 - clip_range, 1 + clip_range) * advantages)
    kl = diag_gaussian_kl(mean_old, log_std_old, mean_new, log_std_new)
    return surr.mean() - kl_coef * kl.mean(), ratio, kl


@dataclass
class _Tensors:
    obs: torch.Tensor
    actions: torch.Tensor
    mask: torch.Tensor
    valid: torch.Tensor
    advantages: torch.Tensor
    returns: torch.Tensor


def _pad(batch: RolloutBatch, config: OptimConfig, value_scale: float) -> _Tensors:
    eps = batch.episodes
    n, length = len(eps), max(len(e) for e in eps)
    d, a = eps[0].obs.shape[1], eps[0].actions.shape[1]
    obs = np.zeros((n, length, d))
    acts = np.zeros((n, length, a))
    mask = np.zeros((n, length), dtype=bool)
    valid = np.zeros((n, length), dtype=bool)
    adv = np.zeros((n, length))
    ret = np.zeros((n, length))
    for i, e in enumerate(eps):
        k = len(e)
        obs[i, :k], acts[i, :k] = e.obs, e.actions
        mask[i, :k], valid[i, :k] = e.controlled, True
        adv[i, :k] = gae_advantages(e.rewards, e.values, config.gamma, config.lam)
        ret[i, :k] = adv[i, :k] + e.values
    if config.normalize_advantages and mask.any():
        sel = adv[mask]
        std = sel.std()
        adv = (adv - sel.mean()) / std if std > 0 else adv - sel.mean()
    return _Tensors(*(torch.as_tensor(x) for x in (obs, acts, mask, valid, adv, ret / value_scale)))


class PPO:
    """Clipped-and-KL-penalized policy gradient with an Adam optimizer."""

    def __init__(self, policy: GaussianPolicy, config: OptimConfig):
        self.policy = policy
        self.config = config
        self.optimizer = torch.optim.Adam(policy.parameters(), lr=config.learning_rate)

    def update(self, batch: RolloutBatch) -> dict:
        """Run ``epochs_per_update`` full-batch gradient passes; returns diagnostics.

        Raises FloatingPointError naming the epoch if the loss is not finite.
        """
        cfg, policy = self.config, self.policy
        tens = _pad(batch, cfg, policy.value_scale)
        m = tens.mask
        if not m.any():
            return {"kl": 0.0, "clip_frac": 0.0, "objective": 0.0}
        with torch.no_grad():
            mean_old, log_std_old, _ = policy(tens.obs)
            logp_old = _torch_log_prob(tens.actions, mean_old, log_std_old)
        mean_old_m, logp_old_m, adv_m = mean_old[m], logp_old[m], tens.advantages[m]
        diag = {}
        for epoch in range(cfg.epochs_per_update):
            mean, log_std, value = policy(tens.obs)
            logp = _torch_log_prob(tens.actions, mean, log_std)
            obj, ratio, kl = ppo_objective(logp[m], logp_old_m, adv_m, mean_old_m, log_std_old,
                                           mean[m], log_std, cfg.clip_range, cfg.kl_coef)
            entropy = (log_std + 0.5 * (1 + LOG_2PI)).sum()
            v_loss = ((value - tens.returns)[tens.valid] ** 2).mean()
            loss = -obj - cfg.entropy_coef * entropy + cfg.value_coef * v_loss
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite PPO loss at epoch {epoch}")
            self.optimizer.zero_grad()
            loss.backward()
            self.optimizer.step()
            diag = {"objective": float(obj.detach()), "kl": float(kl.detach().mean()),
                    "clip_frac": float(((ratio - 1).abs() > cfg.clip_range).double().mean()),
                    "value_loss": float(v_loss.detach())}
        return diag


def ppo_update(learner: PPO, batch: RolloutBatch) -> tuple[np.ndarray, dict]:
    diag = learner.update(batch)
    return learner.policy.get_flat(), diag


# -- solvers ----------------------------------------------------------------------

def _episodes_for(steps: int, batch_size: int) -> int:
    return max(1, math.ceil(batch_size / max(1, steps)))


def _track_best(batch: RolloutBatch, best_return: float, best_actions):
    for ep in batch.episodes:
        if ep.failed:
            total = ep.total_reward
            if total > best_return:
                best_return, best_actions = total, list(ep.actions)
    return best_return, best_actions


def _verified_replay(sim: Simulator, actions, expected: float) -> Trajectory:
    traj = replay(sim, None, actions)
    if traj.total_reward != expected or not traj.ends_in_failure:
        raise RuntimeError("replay of the best failure diverged from its recorded return")
    return traj


def drl_solve(sim: Simulator, config: OptimConfig, seed: int = 0) -> SearchResult:
    """Train from the scenario start for ``config.iterations`` iterations and keep the best failure."""
    torch.set_num_threads(1)
    policy = make_policy(sim, config, seed)
    learner = PPO(policy, config)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    n_eps = _episodes_for(sim.reward_spec.horizon, config.batch_size)
    best_return, best_actions = -math.inf, None
    log, wall, diags = [], [], []
    for _ in range(config.iterations):
        t0 = time.perf_counter()
        batch = collect_batch(policy, sim, n_eps, rng)
        best_return, best_actions = _track_best(batch, best_return, best_actions)
        diags.append(learner.update(batch))
        log.append(best_return)
        wall.append((time.perf_counter() - t0) * 1e3)
    best = _verified_replay(sim, best_actions, best_return) if best_actions is not None else None
    return SearchResult(best, log, wall, {"policy": policy, "diagnostics": diags})


def ba_schedule(expert_len: int, iterations: int, epochs_per_step: int | None = None) -> list[int]:
    """Start index for every iteration, walking from the expert's last step to 0.

    With ``epochs_per_step`` each index gets that many iterations (leftovers go
    to index 0). Without it the iterations are spread evenly over the indices;
    if there are fewer iterations than steps, indices are skipped evenly.
    """
    if expert_len < 1:
        raise ValueError("expert trajectory is empty")
    last = expert_len - 1
    if epochs_per_step is not None:
        if epochs_per_step < 1:
            raise ValueError("epochs_per_step must be >= 1")
        if iterations < expert_len * epochs_per_step:
            raise ValueError(f"{iterations} iterations cannot cover {expert_len} steps x {epochs_per_step} epochs")
        sched = [k for k in range(last, -1, -1) for _ in range(epochs_per_step)]
        return sched + [0] * (iterations - len(sched))
    if iterations >= expert_len:
        return ba_schedule(expert_len, iterations, iterations // expert_len)
    return [int(round(last * (1 - i / max(1, iterations - 1)))) for i in range(iterations)]


@dataclass
class BAResult:
    robustified: Trajectory
    policy: GaussianPolicy
    expert_reward: float
    improved: bool
    log: list[float] = field(default_factory=list)
    wall_ms: list[float] = field(default_factory=list)
    schedule: list[int] = field(default_factory=list)


def backwards_algorithm(sim: Simulator, expert: Trajectory, ba_config: BAConfig, optim_config: OptimConfig,
                        seed: int = 0, policy: GaussianPolicy | None = None) -> BAResult:
    """Robustify a failure trajectory by training from progressively earlier start points.

    Each rollout replays the expert's first ``k`` actions and lets the policy
    act from step ``k`` on; ``k`` walks back from the last step to 0. The best
    failure seen during training is returned, seeded with the expert itself,
    so the result is never worse than the expert.
    """
    if not expert.ends_in_failure:
        raise ValueError("backwards algorithm needs an expert trajectory that ends in failure")
    check = replay(sim, None, expert.actions)
    if check.total_reward != expert.total_reward or not check.ends_in_failure:
        raise ValueError("expert trajectory does not replay to its recorded return")
    torch.set_num_threads(1)
    policy = policy or make_policy(sim, optim_config, seed)
    learner = PPO(policy, optim_config)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    schedule = ba_schedule(len(expert), ba_config.iterations, ba_config.epochs_per_step)
    horizon = sim.reward_spec.horizon
    expert_actions = expert.actions
    best_return, best_actions = expert.total_reward, None
    log, wall = [], []
    for k in schedule:
        t0 = time.perf_counter()
        n_eps = _episodes_for(horizon - k, ba_config.batch_size)
        batch = collect_batch(policy, sim, n_eps, rng, prefix=expert_actions[:k])
        best_return, best_actions = _track_best(batch, best_return, best_actions)
        learner.update(batch)
        log.append(best_return)
        wall.append((time.perf_counter() - t0) * 1e3)
    if best_actions is None:
        return BAResult(expert, policy, expert.total_reward, False, log, wall, schedule)
    traj = _verified_replay(sim, best_actions, best_return)
    return BAResult(traj, policy, expert.total_reward, True, log, wall, schedule)
