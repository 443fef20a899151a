"""Episodic MDP around the cycling rig for the Starter and Tracker agents."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .mech import N_MUSCLES, TWO_PI, RigGeometry, RigState, crank_step, muscle_params_tuple
from .physio import MuscleParams

STARTER, TRACKER = "starter", "tracker"
STARTER_TARGET = 5.0  # rad/s, Starter success threshold
CADENCE_SCALE = 10.0
OBS_MAX = 1.2
EFFORT_WEIGHT = 1.0 / 6.0
SUCCESS_BONUS = 100.0

Policy = Callable[[np.ndarray], np.ndarray]


class EpisodeOver(RuntimeError):
    """Raised when stepping an episode that already terminated."""


class StarterFailure(RuntimeError):
    def __init__(self, state: RigState, steps: int):
        super().__init__(f"Starter left cadence at {state.theta_dot:.3f} rad/s after {steps} "
                         f"steps (needs >= {STARTER_TARGET})")
        self.state = state
        self.steps = steps


def obs_dim(mode: str) -> int:
    return {STARTER: 8, TRACKER: 9}[mode]


def obs_scale(mode: str) -> np.ndarray:
    """Divisors applied to (theta, theta_dot[, desired]) before the fatigue block."""
    head = [TWO_PI, CADENCE_SCALE] + ([CADENCE_SCALE] if mode == TRACKER else [])
    return np.array(head + [1.0] * N_MUSCLES)


def build_observation(theta: float, theta_dot: float, fatigue, mode: str,
                      desired: Optional[float] = None) -> np.ndarray:
    head = [theta / TWO_PI, theta_dot / CADENCE_SCALE]
    if mode == TRACKER:
        if desired is None:
            raise ValueError("Tracker observations need a desired cadence")
        head.append(desired / CADENCE_SCALE)
    obs = np.concatenate([head, np.asarray(fatigue, dtype=float)])
    return np.clip(obs, 0.0, OBS_MAX)


def parse_observation(obs, mode: str) -> dict:
    obs = np.asarray(obs, dtype=float)
    if obs.shape != (obs_dim(mode),):
        raise ValueError(f"{mode} observation must have length {obs_dim(mode)}")
    out = {"theta": obs[0] * TWO_PI, "theta_dot": obs[1] * CADENCE_SCALE}
    k = 2
    if mode == TRACKER:
        out["desired"] = obs[2] * CADENCE_SCALE
        k = 3
    out["fatigue"] = obs[k:].copy()
    return out


def effort(action) -> float:
    a = np.asarray(action, dtype=float)
    return EFFORT_WEIGHT * float(np.dot(a, a))


def reward_starter(theta_dot: float, action) -> Tuple[float, bool]:
    if theta_dot < STARTER_TARGET:
        return theta_dot - effort(action), False
    return SUCCESS_BONUS - effort(action), True


def reward_tracker(theta_dot: float, desired: float, action) -> float:
    return -abs(theta_dot - desired) - effort(action)


@dataclass(frozen=True)
class EpisodeConfig:
    max_steps: int = 100
    dt: float = 0.1
    mode: str = STARTER
    desired_cadence_range: Tuple[float, float] = (3.0, 8.0)
    fatigue_rate_multiplier: float = 5.0
    seed: Optional[int] = None

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        if self.mode not in (STARTER, TRACKER):
            raise ValueError(f"mode must be {STARTER!r} or {TRACKER!r}")
        lo, hi = (float(x) for x in self.desired_cadence_range)
        if not hi > lo:
            raise ValueError("desired_cadence_range is empty")
        object.__setattr__(self, "desired_cadence_range", (lo, hi))
        if not self.fatigue_rate_multiplier > 0:
            raise ValueError("fatigue_rate_multiplier must be > 0")


@dataclass(frozen=True)
class Plant:
    """Rig geometry plus the six muscles' parameters (at nominal fatigue rates)."""
    geometry: RigGeometry = field(default_factory=RigGeometry)
    muscles: tuple = field(default_factory=lambda: (MuscleParams(),) * N_MUSCLES)

    def __post_init__(self):
        object.__setattr__(self, "muscles", muscle_params_tuple(self.muscles))

    def scaled(self, multiplier: float) -> tuple:
        return _scaled_muscles(self.muscles, float(multiplier))


@lru_cache(maxsize=32)
def _scaled_muscles(muscles: tuple, multiplier: float) -> tuple:
    return tuple(p.with_fatigue_multiplier(multiplier) for p in muscles)


def random_initial_state(rng: np.random.Generator) -> RigState:
    return RigState.fresh(rng.uniform(0.0, TWO_PI), 0.0)


def starter_handoff(starter_policy: Policy, config: EpisodeConfig, plant: Plant,
                    state: Optional[RigState] = None,
                    rng: Optional[np.random.Generator] = None) -> Tuple[RigState, int]:
    """Spin the crank up with the Starter until the cadence threshold.

    Returns the state (fatigue carried over) and the number of steps used.
    Raises :class:`StarterFailure` if the threshold is not reached within
    ``config.max_steps``.
    """
    if state is None:
        state = random_initial_state(rng if rng is not None else np.random.default_rng(config.seed))
    params = plant.scaled(config.fatigue_rate_multiplier)
    for k in range(config.max_steps):
        obs = build_observation(state.theta, state.theta_dot, state.fatigue, STARTER)
        action = np.clip(np.asarray(starter_policy(obs), dtype=float), 0.0, 1.0)
        state = crank_step(state, action, config.dt, plant.geometry, params)
        if state.theta_dot >= STARTER_TARGET:
            return state, k + 1
    raise StarterFailure(state, config.max_steps)


class ScriptedStarter:
    """Hand-written Starter surrogate: full stimulation of every muscle whose
    moment arm is positive at the current angle."""

    def __init__(self, geometry: Optional[RigGeometry] = None, intensity: float = 1.0,
                 threshold: float = 0.2):
        _, self.phase, _, _ = (geometry or RigGeometry()).effective()
        self.intensity = intensity
        self.threshold = threshold

    def __call__(self, obs) -> np.ndarray:
        theta = obs[0] * TWO_PI
        on = np.sin(theta - self.phase) > self.threshold
        return np.where(on, self.intensity, 0.0)


@dataclass
class StepRecord:
    t: float
    theta: float
    theta_dot: float
    desired: float
    action: np.ndarray
    fatigue: np.ndarray
    reward: float


LOG_HEADER = (["t", "theta", "theta_dot", "desired"] + [f"s{i + 1}" for i in range(N_MUSCLES)]
              + [f"f{i + 1}" for i in range(N_MUSCLES)] + ["reward"])


def write_step_log(path, records: Sequence[StepRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_HEADER)
        for r in records:
            w.writerow([repr(float(r.t)), repr(float(r.theta)), repr(float(r.theta_dot)),
                        repr(float(r.desired))] + [repr(float(x)) for x in r.action]
                       + [repr(float(x)) for x in r.fatigue] + [repr(float(r.reward))])


def step(state: RigState, action, config: EpisodeConfig, plant: Plant,
         desired: Optional[float] = None):
    """Pure transition: ``(state', observation, reward, success)``.

    ``success`` is the Starter threshold flag; the step-count limit is the
    caller's business (see :class:`CyclingEnv`).
    """
    action = np.clip(np.asarray(action, dtype=float), 0.0, 1.0)
    params = plant.scaled(config.fatigue_rate_multiplier)
    nxt = crank_step(state, action, config.dt, plant.geometry, params)
    if config.mode == STARTER:
        reward, success = reward_starter(nxt.theta_dot, action)
    else:
        reward, success = reward_tracker(nxt.theta_dot, desired, action), False
    obs = build_observation(nxt.theta, nxt.theta_dot, nxt.fatigue, config.mode, desired)
    return nxt, obs, reward, success


class CyclingEnv:
    """Stateful episode wrapper.

    ``step`` returns ``(obs, reward, terminal, truncated, info)``: ``terminal``
    is a true MDP termination (Starter success) and ``truncated`` marks the
    step limit.  An episode is over when either is set.  ``info`` carries the
    absolute cadence error against the desired cadence (the Starter's target
    in Starter mode).
    """

    def __init__(self, config: EpisodeConfig, plant: Optional[Plant] = None,
                 starter: Optional[Policy] = None, seed: Optional[int] = None):
        self.config = config
        self.plant = plant or Plant()
        self.starter = starter
        self.rng = np.random.default_rng(config.seed if seed is None else seed)
        self.state: Optional[RigState] = None
        self.desired: Optional[float] = None
        self.steps = 0
        self.done = True
        self.handoff_steps = 0
        self.handoff_failed = False
        self.log: List[StepRecord] = []

    @property
    def mode(self) -> str:
        return self.config.mode

    def reset(self, seed: Optional[int] = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        cfg = self.config
        state = random_initial_state(self.rng)
        self.desired = None
        self.handoff_steps = 0
        self.handoff_failed = False
        if cfg.mode == TRACKER:
            lo, hi = cfg.desired_cadence_range
            self.desired = float(self.rng.uniform(lo, hi))
            if self.starter is not None:
                try:
                    state, self.handoff_steps = starter_handoff(self.starter, cfg, self.plant, state)
                except StarterFailure as exc:
                    state, self.handoff_steps = exc.state, exc.steps
                    self.handoff_failed = True
        self.state = state
        self.steps = 0
        self.done = False
        self.log = []
        return self.observation()

    def observation(self) -> np.ndarray:
        s = self.state
        return build_observation(s.theta, s.theta_dot, s.fatigue, self.mode, self.desired)

    def step(self, action):
        if self.done:
            raise EpisodeOver("episode is over; call reset()")
        action = np.clip(np.asarray(action, dtype=float), 0.0, 1.0)
        self.state, obs, reward, terminal = step(self.state, action, self.config, self.plant,
                                                 self.desired)
        self.steps += 1
        truncated = (not terminal) and self.steps >= self.config.max_steps
        self.done = terminal or truncated
        s = self.state
        target = self.desired if self.desired is not None else STARTER_TARGET
        self.log.append(StepRecord(self.steps * self.config.dt, s.theta, s.theta_dot, target,
                                   action, s.fatigue.copy(), reward))
        return obs, reward, terminal, truncated, {"abs_error": abs(s.theta_dot - target)}
