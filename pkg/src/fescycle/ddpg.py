"""DDPG trainer for the Starter and Tracker agents."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, List, NamedTuple, Optional

import numpy as np

from .nnet import Adam, DenseNet, PolicyCheckpoint, backward, soft_update

WARMING_UP = "warming up"


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    episodes: int = 1000
    batch_size: int = 64
    gamma: float = 0.99
    tau: float = 0.001
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    buffer_capacity: int = 1_000_000
    sigma_start: float = 0.2
    sigma_end: float = 0.02
    noise: str = "gaussian"  # or "ou"
    ou_theta: float = 0.15
    warmup: int = 1000
    hidden: tuple = (250, 250)
    grad_clip: float = 1.0
    best_window: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.episodes < 0:
            raise ValueError("episodes must be >= 0")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        for name in ("actor_lr", "critic_lr", "grad_clip"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.batch_size < 1 or self.buffer_capacity < self.batch_size:
            raise ValueError("buffer_capacity must be >= batch_size >= 1")
        if self.sigma_start < 0 or self.sigma_end < 0:
            raise ValueError("exploration sigmas must be >= 0")
        if self.noise not in ("gaussian", "ou"):
            raise ValueError("noise must be 'gaussian' or 'ou'")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def sigma(self, episode: int) -> float:
        """Linear decay from ``sigma_start`` to ``sigma_end`` over the run."""
        if self.episodes <= 1:
            return self.sigma_start
        frac = min(episode / (self.episodes - 1), 1.0)
        return self.sigma_start + frac * (self.sigma_end - self.sigma_start)


class Transition(NamedTuple):
    obs: np.ndarray
    action: np.ndarray
    reward: float
    next_obs: np.ndarray
    terminal: bool


class Batch(NamedTuple):
    obs: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    next_obs: np.ndarray
    terminal: np.ndarray


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions."""

    def __init__(self, capacity: int, obs_dim: int, act_dim: int):
        self.capacity = int(capacity)
        self.obs = np.empty((self.capacity, obs_dim))
        self.action = np.empty((self.capacity, act_dim))
        self.reward = np.empty(self.capacity)
        self.next_obs = np.empty((self.capacity, obs_dim))
        self.terminal = np.empty(self.capacity)
        self.cursor = 0
        self.size = 0

    def __len__(self):
        return self.size

    def add(self, obs, action, reward, next_obs, terminal) -> None:
        i = self.cursor
        self.obs[i] = obs
        self.action[i] = action
        self.reward[i] = reward
        self.next_obs[i] = next_obs
        self.terminal[i] = float(terminal)
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def __iter__(self):
        """Transitions from oldest to newest."""
        start = self.cursor if self.size == self.capacity else 0
        for k in range(self.size):
            i = (start + k) % self.capacity
            yield Transition(self.obs[i].copy(), self.action[i].copy(), float(self.reward[i]),
                             self.next_obs[i].copy(), bool(self.terminal[i]))

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        if batch_size > self.size:
            raise ValueError("not enough transitions to sample a batch")
        idx = rng.choice(self.size, size=batch_size, replace=False)
        return Batch(self.obs[idx], self.action[idx], self.reward[idx], self.next_obs[idx],
                     self.terminal[idx])


class GaussianNoise:
    def __init__(self, dim: int, rng: np.random.Generator):
        self.dim, self.rng = dim, rng

    def reset(self):
        pass

    def __call__(self, sigma: float) -> np.ndarray:
        return self.rng.normal(0.0, 1.0, self.dim) * sigma


class OUNoise:
    """Ornstein-Uhlenbeck process with unit time step; ``sigma`` scales the
    stationary spread per call."""

    def __init__(self, dim: int, rng: np.random.Generator, theta: float = 0.15):
        self.dim, self.rng, self.theta = dim, rng, theta
        self.x = np.zeros(dim)

    def reset(self):
        self.x[:] = 0.0

    def __call__(self, sigma: float) -> np.ndarray:
        self.x += -self.theta * self.x + sigma * self.rng.normal(0.0, 1.0, self.dim)
        return self.x.copy()


def act(actor: DenseNet, obs, noise_sigma: float = 0.0, rng: Optional[np.random.Generator] = None,
        noise: Optional[np.ndarray] = None) -> np.ndarray:
    """Actor output plus exploration noise, clipped to [0, 1].

    Gaussian noise with std ``noise_sigma`` is drawn from ``rng`` unless an
    explicit ``noise`` vector is given.
    """
    a = actor.forward(obs)
    if noise is not None:
        a = a + noise
    elif noise_sigma > 0:
        if rng is None:
            raise ValueError("need an rng for exploration noise")
        a = a + rng.normal(0.0, noise_sigma, a.shape)
    return np.clip(a, 0.0, 1.0)


def critic_target(batch: Batch, target_actor: DenseNet, target_critic: DenseNet,
                  gamma: float) -> np.ndarray:
    """TD targets ``r + gamma * (1 - terminal) * Q'(s', mu'(s'))``."""
    next_a = target_actor.forward(batch.next_obs)
    q_next = target_critic.forward(np.hstack([batch.next_obs, next_a]))[:, 0]
    return batch.reward + gamma * (1.0 - batch.terminal) * q_next


class Agent:
    """Actor, critic, their target copies and optimizers."""

    def __init__(self, obs_dim: int, act_dim: int, config: TrainConfig,
                 rng: np.random.Generator, actor: Optional[DenseNet] = None,
                 critic: Optional[DenseNet] = None):
        h = list(config.hidden)
        self.actor = actor if actor is not None else DenseNet.build(
            [obs_dim] + h + [act_dim], output="sigmoid", rng=rng)
        self.critic = critic if critic is not None else DenseNet.build(
            [obs_dim + act_dim] + h + [1], output="identity", rng=rng)
        if self.actor.input_dim != obs_dim or self.actor.output_dim != act_dim:
            raise ValueError("actor does not match observation/action dims")
        if self.critic.input_dim != obs_dim + act_dim:
            raise ValueError("critic does not match observation/action dims")
        self.target_actor = self.actor.copy()
        self.target_critic = self.critic.copy()
        self.actor_opt = Adam(self.actor, lr=config.actor_lr)
        self.critic_opt = Adam(self.critic, lr=config.critic_lr)
        self.obs_dim, self.act_dim = obs_dim, act_dim


def update_step(buffer: ReplayBuffer, agent: Agent, config: TrainConfig,
                rng: np.random.Generator) -> dict:
    """One critic regression step, one actor ascent step, then soft target updates."""
    if len(buffer) < config.batch_size:
        return {"status": WARMING_UP}
    batch = buffer.sample(config.batch_size, rng)
    n = config.batch_size
    y = critic_target(batch, agent.target_actor, agent.target_critic, config.gamma)

    sa = np.hstack([batch.obs, batch.action])
    cache: list = []
    q = agent.critic.forward(sa, cache=cache)[:, 0]
    err = q - y
    critic_loss = float(np.mean(err * err))
    tape = backward(agent.critic, sa, (2.0 / n) * err[:, None], cache=cache)
    tape.clip_global_norm(config.grad_clip)
    agent.critic_opt.step(tape)

    a_cache: list = []
    a = agent.actor.forward(batch.obs, cache=a_cache)
    sa_pi = np.hstack([batch.obs, a])
    c_cache: list = []
    q_pi = agent.critic.forward(sa_pi, cache=c_cache)[:, 0]
    actor_objective = float(np.mean(q_pi))
    # ascend mean Q: descend -mean Q through the critic's action input
    dq = backward(agent.critic, sa_pi, np.full((n, 1), -1.0 / n), cache=c_cache, params=False)
    a_tape = backward(agent.actor, batch.obs, dq.input_grad[:, agent.obs_dim:], cache=a_cache)
    a_tape.clip_global_norm(config.grad_clip)
    agent.actor_opt.step(a_tape)

    soft_update(agent.target_critic, agent.critic, config.tau)
    soft_update(agent.target_actor, agent.actor, config.tau)
    return {"status": "ok", "critic_loss": critic_loss, "actor_objective": actor_objective}


@dataclass
class EpisodeStats:
    episode: int
    length: int
    mean_abs_error: float
    ret: float
    sigma: float

    def row(self):
        return [self.episode, self.length, repr(self.mean_abs_error), repr(self.ret),
                repr(self.sigma)]


CURVE_HEADER = ["episode", "length", "mean_abs_error", "return", "sigma"]


def write_curve(path, curve: List[EpisodeStats]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_HEADER)
        for s in curve:
            w.writerow(s.row())


@dataclass
class TrainResult:
    final: PolicyCheckpoint
    best: PolicyCheckpoint
    curve: List[EpisodeStats] = field(default_factory=list)
    wall_time: float = 0.0
    updates: int = 0


class ActorPolicy:
    """Deterministic policy from a trained actor (obs -> action in [0, 1])."""

    def __init__(self, actor: DenseNet):
        self.actor = actor

    @classmethod
    def from_checkpoint(cls, ckpt: PolicyCheckpoint) -> "ActorPolicy":
        return cls(ckpt.actor)

    def __call__(self, obs) -> np.ndarray:
        return np.clip(self.actor.forward(obs), 0.0, 1.0)


def _monitored(stats: EpisodeStats, mode: str) -> float:
    return float(stats.length) if mode == "starter" else stats.mean_abs_error


def train(env_factory: Callable[[int], object], mode: str, config: TrainConfig,
          init: Optional[PolicyCheckpoint] = None, obs_scale=None, metadata: Optional[dict] = None,
          progress: Optional[Callable[[EpisodeStats], None]] = None,
          step_budget: Optional[int] = None) -> TrainResult:
    """Run ``config.episodes`` episodes of DDPG.

    ``env_factory(seed)`` must return an object with ``reset() -> obs`` and
    ``step(action) -> (obs, reward, terminal, truncated, info)`` where ``info``
    may hold ``abs_error``; it also needs ``obs_dim`` / ``act_dim`` attributes
    or an observation from ``reset`` to size the networks.  ``init`` resumes
    from an existing checkpoint (fine-tuning).  ``step_budget`` caps the total
    number of environment steps.
    """
    t0 = time.perf_counter()
    root = np.random.SeedSequence(config.seed)
    env_seed, init_seed, noise_seed, sample_seed = root.spawn(4)
    env = env_factory(int(env_seed.generate_state(1)[0]))
    init_rng = np.random.default_rng(init_seed)
    noise_rng = np.random.default_rng(noise_seed)
    sample_rng = np.random.default_rng(sample_seed)

    first_obs = env.reset()
    obs_dim = int(getattr(env, "obs_dim", len(first_obs)))
    act_dim = int(getattr(env, "act_dim", 6))
    agent = Agent(obs_dim, act_dim, config, init_rng,
                  actor=init.actor.copy() if init is not None else None,
                  critic=init.critic.copy() if init is not None and init.critic is not None else None)
    buffer = ReplayBuffer(config.buffer_capacity, obs_dim, act_dim)
    noise = (OUNoise(act_dim, noise_rng, config.ou_theta) if config.noise == "ou"
             else GaussianNoise(act_dim, noise_rng))
    meta = {"mode": mode, "seed": config.seed, "train_config": _jsonable(asdict(config))}
    meta.update(metadata or {})
    scale = np.asarray(obs_scale if obs_scale is not None else np.ones(obs_dim), dtype=float)

    def snapshot(actor, critic, extra):
        return PolicyCheckpoint(mode, actor.copy(), critic.copy(), scale, {**meta, **extra})

    curve: List[EpisodeStats] = []
    best = snapshot(agent.actor, agent.critic, {"episodes_trained": 0, "selection": "initial"})
    best_score = math.inf
    updates = 0
    total_steps = 0
    bad = []
    obs = first_obs
    for ep in range(config.episodes):
        if step_budget is not None and total_steps >= step_budget:
            break
        if ep > 0:
            obs = env.reset()
        sigma = config.sigma(ep)
        noise.reset()
        ep_ret, errs, length = 0.0, [], 0
        while True:
            a = act(agent.actor, obs, noise=noise(sigma))
            nxt, r, terminal, truncated, info = env.step(a)
            buffer.add(obs, a, r, nxt, terminal)
            ep_ret += r
            length += 1
            total_steps += 1
            if info and "abs_error" in info:
                errs.append(info["abs_error"])
            if len(buffer) >= max(config.warmup, config.batch_size):
                update_step(buffer, agent, config, sample_rng)
                updates += 1
            obs = nxt
            if terminal or truncated or (step_budget is not None and total_steps >= step_budget):
                break
        stats = EpisodeStats(ep, length, float(np.mean(errs)) if errs else math.nan, ep_ret, sigma)
        curve.append(stats)
        bad.append(not math.isfinite(ep_ret))
        recent = bad[-20:]
        if len(recent) >= 10 and sum(recent) > len(recent) / 2:
            raise TrainingDiverged(f"{sum(recent)} of the last {len(recent)} episodes were "
                                   "non-finite; check learning rates and rig configuration")
        if progress is not None:
            progress(stats)
        w = config.best_window
        if len(curve) >= w:
            score = float(np.mean([_monitored(s, mode) for s in curve[-w:]]))
            if score < best_score:
                best_score = score
                best = snapshot(agent.actor, agent.critic,
                                {"episodes_trained": ep + 1, "selection": f"best {w}-episode mean",
                                 "score": score})
    final = snapshot(agent.actor, agent.critic,
                     {"episodes_trained": len(curve), "selection": "final"})
    if best_score == math.inf:
        best = final
    return TrainResult(final, best, curve, time.perf_counter() - t0, updates)


def _jsonable(d):
    if isinstance(d, dict):
        return {k: _jsonable(v) for k, v in d.items()}
    if isinstance(d, (list, tuple)):
        return [_jsonable(v) for v in d]
    return d
