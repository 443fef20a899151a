"""Evaluation protocol: cadence scenarios, tracking metrics, controller
comparison and the seat-shift transfer study."""
from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from .baselines import BaselineController, FuzzyRuleBase, PidGains, StimPattern
from .ddpg import ActorPolicy, TrainConfig, train
from .env import (STARTER, STARTER_TARGET, TRACKER, CyclingEnv, EpisodeConfig, Plant,
                  build_observation, obs_scale)
from .mech import N_MUSCLES, TWO_PI, RigState, SimulationError, crank_step
from .nnet import PolicyCheckpoint

REPORT_SCHEMA = "fescycle.bench/1"
CONTROL_DT = 0.1


@dataclass(frozen=True)
class Scenario:
    name: str
    second_half_target: float
    first_half_target: float = 5.0
    duration: float = 120.0
    switch_time: float = 60.0
    fatigue_multiplier: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.switch_time < self.duration:
            raise ValueError("switch_time must lie strictly inside (0, duration)")
        if self.fatigue_multiplier <= 0:
            raise ValueError("fatigue_multiplier must be > 0")

    def desired(self, t: float) -> float:
        return self.first_half_target if t < self.switch_time - 1e-9 else self.second_half_target


SCENARIOS = (Scenario("case1", 5.0), Scenario("case2", 8.0), Scenario("case3", 3.0))


# ---------------------------------------------------------------- controllers

class ZeroController:
    name = "zero"

    def reset(self):
        pass

    def __call__(self, state: RigState, desired: float, dt: float) -> np.ndarray:
        return np.zeros(N_MUSCLES)


class PatternController:
    """Adapter giving a :class:`BaselineController` the bench calling convention."""

    def __init__(self, kind: str, pattern: Optional[StimPattern] = None,
                 gains: Optional[PidGains] = None, rules: Optional[FuzzyRuleBase] = None):
        self.name = kind.lower()
        self.inner = BaselineController(kind, pattern, gains, rules)

    def reset(self):
        self.inner.reset()

    def __call__(self, state, desired, dt):
        return self.inner(state.theta, state.theta_dot, desired, dt)


class RLController:
    """Starter until the cadence first reaches the handoff threshold, Tracker after.

    If the Starter has not handed off within ``starter_max_steps`` the Tracker
    takes over anyway.
    """
    name = "rl"

    def __init__(self, starter: PolicyCheckpoint, tracker: PolicyCheckpoint,
                 starter_max_steps: int = 100):
        starter.require_mode(STARTER)
        tracker.require_mode(TRACKER)
        self.starter = ActorPolicy.from_checkpoint(starter)
        self.tracker = ActorPolicy.from_checkpoint(tracker)
        self.starter_max_steps = starter_max_steps
        self.reset()

    def reset(self):
        self.tracking = False
        self.steps = 0
        self.handoff_step: Optional[int] = None

    def __call__(self, state, desired, dt):
        if not self.tracking and (state.theta_dot >= STARTER_TARGET
                                  or self.steps >= self.starter_max_steps):
            self.tracking = True
            self.handoff_step = self.steps
        self.steps += 1
        if self.tracking:
            obs = build_observation(state.theta, state.theta_dot, state.fatigue, TRACKER, desired)
            return self.tracker(obs)
        return self.starter(build_observation(state.theta, state.theta_dot, state.fatigue, STARTER))


# ---------------------------------------------------------------- sessions

@dataclass
class Trajectory:
    controller: str
    scenario: str
    seed: int
    t: np.ndarray
    theta: np.ndarray
    theta_dot: np.ndarray
    desired: np.ndarray
    action: np.ndarray  # (n, 6), action applied over the step ending at t; row 0 is zero
    fatigue: np.ndarray  # (n, 6)
    handoff_time: Optional[float] = None
    error: Optional[str] = None

    @property
    def complete(self) -> bool:
        return self.error is None

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRAJECTORY_HEADER)
            for k in range(len(self.t)):
                w.writerow([repr(float(self.t[k])), repr(float(self.theta[k])),
                            repr(float(self.theta_dot[k])), repr(float(self.desired[k]))]
                           + [repr(float(x)) for x in self.action[k]]
                           + [repr(float(x)) for x in self.fatigue[k]])


TRAJECTORY_HEADER = (["t", "theta", "theta_dot", "desired"] + [f"s{i + 1}" for i in range(N_MUSCLES)]
                     + [f"f{i + 1}" for i in range(N_MUSCLES)])


def initial_state(seed: int) -> RigState:
    rng = np.random.default_rng(seed)
    return RigState.fresh(rng.uniform(0.0, TWO_PI), 0.0)


def run_session(controller, scenario: Scenario, seed: int, plant: Optional[Plant] = None,
                dt: float = CONTROL_DT) -> Trajectory:
    """Closed-loop run of ``scenario`` from rest at a seed-drawn crank angle.

    Samples are taken at t = 0, dt, 2 dt, ... .  A non-finite rig state stops
    the run and the partial trajectory is returned with ``error`` set.
    """
    plant = plant or Plant()
    params = plant.scaled(scenario.fatigue_multiplier)
    n = int(round(scenario.duration / dt))
    state = initial_state(seed)
    controller.reset()
    t = np.zeros(n + 1)
    theta = np.zeros(n + 1)
    cad = np.zeros(n + 1)
    des = np.zeros(n + 1)
    act = np.zeros((n + 1, N_MUSCLES))
    fat = np.zeros((n + 1, N_MUSCLES))
    theta[0], cad[0], des[0], fat[0] = state.theta, state.theta_dot, scenario.desired(0.0), state.fatigue
    error = None
    k = 0
    for k in range(1, n + 1):
        d = scenario.desired((k - 1) * dt)
        a = np.clip(np.asarray(controller(state, d, dt), dtype=float), 0.0, 1.0)
        try:
            state = crank_step(state, a, dt, plant.geometry, params)
        except SimulationError as exc:
            error = str(exc)
            k -= 1
            break
        t[k] = k * dt
        theta[k], cad[k], des[k] = state.theta, state.theta_dot, scenario.desired(k * dt)
        act[k], fat[k] = a, state.fatigue
    m = k + 1
    handoff = getattr(controller, "handoff_step", None)
    return Trajectory(getattr(controller, "name", type(controller).__name__), scenario.name, seed,
                      t[:m], theta[:m], cad[:m], des[:m], act[:m], fat[:m],
                      None if handoff is None else handoff * dt, error)


# ---------------------------------------------------------------- metrics

def _second_half(traj: Trajectory, scenario: Scenario):
    sel = traj.t >= scenario.switch_time - 1e-9
    if not np.any(sel) or traj.t[-1] < scenario.duration - 1e-9:
        raise ValueError("trajectory does not cover the second half of the scenario")
    return sel


def rmse(traj: Trajectory, scenario: Scenario) -> float:
    """Root-mean-square cadence error over samples with t >= switch_time."""
    sel = _second_half(traj, scenario)
    e = traj.theta_dot[sel] - traj.desired[sel]
    return float(np.sqrt(np.mean(e * e)))


def response_time(traj: Trajectory, scenario: Scenario, band: float = 0.05,
                  dwell: float = 1.0) -> float:
    """Seconds after the switch until the cadence enters the +-``band`` relative
    window of the new target and stays there for ``dwell`` seconds.

    The entry instant is linearly interpolated between the last outside and
    first inside sample.  Returns ``inf`` when the band is never held.
    """
    sel = traj.t >= scenario.switch_time - 1e-9
    t = traj.t[sel]
    x = traj.theta_dot[sel]
    target = scenario.second_half_target
    half = band * abs(target)
    inside = np.abs(x - target) <= half
    n = len(t)
    i = 0
    while i < n:
        if not inside[i]:
            i += 1
            continue
        j = i
        while j + 1 < n and inside[j + 1]:
            j += 1
        if t[j] - t[i] >= dwell - 1e-9:
            if i == 0:
                return 0.0
            x0, x1 = x[i - 1], x[i]
            edge = target + half if x0 > target else target - half
            frac = (edge - x0) / (x1 - x0)
            return float(t[i - 1] + frac * (t[i] - t[i - 1]) - scenario.switch_time)
        i = j + 1
    return math.inf


# ---------------------------------------------------------------- comparison

@dataclass
class RunMetrics:
    controller: str
    scenario: str
    seed: int
    rmse: float
    response_time: float
    handoff_time: Optional[float] = None
    min_cadence_after_handoff: Optional[float] = None
    error: Optional[str] = None


@dataclass
class CellSummary:
    rmse_mean: float
    rmse_sd: float
    response_mean: float  # inf if any seed failed to hold the band
    response_sd: float
    n_fail: int
    n: int


@dataclass
class BenchResult:
    controllers: List[str]
    scenarios: List[Scenario]
    seeds: List[int]
    runs: List[RunMetrics]
    cells: Dict[str, Dict[str, CellSummary]] = field(default_factory=dict)
    trajectories: List[Trajectory] = field(default_factory=list, repr=False)

    def cell(self, controller: str, scenario: str) -> CellSummary:
        return self.cells[controller][scenario]

    def to_json(self) -> str:
        def num(x):
            return None if x is None or not math.isfinite(x) else x
        doc = {
            "schema": REPORT_SCHEMA,
            "controllers": self.controllers,
            "scenarios": [{"name": s.name, "first_half_target": s.first_half_target,
                           "second_half_target": s.second_half_target, "duration": s.duration,
                           "switch_time": s.switch_time,
                           "fatigue_multiplier": s.fatigue_multiplier} for s in self.scenarios],
            "seeds": self.seeds,
            "summary": {c: {s: {"rmse_mean": num(v.rmse_mean), "rmse_sd": num(v.rmse_sd),
                                "response_time_mean": num(v.response_mean),
                                "response_time_sd": num(v.response_sd),
                                "response_time_n_fail": v.n_fail, "n": v.n}
                            for s, v in row.items()}
                        for c, row in self.cells.items()},
            "runs": [{"controller": r.controller, "scenario": r.scenario, "seed": r.seed,
                      "rmse": num(r.rmse), "response_time": num(r.response_time),
                      "handoff_time": num(r.handoff_time),
                      "min_cadence_after_handoff": num(r.min_cadence_after_handoff),
                      "error": r.error} for r in self.runs],
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def table(self) -> str:
        names = [s.name for s in self.scenarios]
        width = 22

        def fmt_rmse(c):
            return f"{c.rmse_mean:.3f} +- {c.rmse_sd:.3f}"

        def fmt_resp(c):
            if c.n_fail == c.n:
                return "fail"
            txt = f"{c.response_mean:.2f} +- {c.response_sd:.2f}" if c.n_fail == 0 else \
                f"fail ({c.n_fail}/{c.n})"
            return txt

        lines = []
        for title, fmt in (("(A) RMSE [rad/s]", fmt_rmse), ("(B) response time [s]", fmt_resp)):
            lines.append(title)
            lines.append("controller".ljust(12) + "".join(n.rjust(width) for n in names))
            for c in self.controllers:
                lines.append(c.ljust(12) + "".join(fmt(self.cells[c][n]).rjust(width)
                                                   for n in names))
            lines.append("")
        return "\n".join(lines)


def _metrics(traj: Trajectory, scenario: Scenario) -> RunMetrics:
    if not traj.complete:
        return RunMetrics(traj.controller, traj.scenario, traj.seed, math.inf, math.inf,
                          traj.handoff_time, None, traj.error)
    low = None
    if traj.handoff_time is not None:
        after = traj.t >= traj.handoff_time - 1e-9
        low = float(np.min(traj.theta_dot[after])) if np.any(after) else None
    return RunMetrics(traj.controller, traj.scenario, traj.seed, rmse(traj, scenario),
                      response_time(traj, scenario), traj.handoff_time, low)


def summarize(runs: Sequence[RunMetrics]) -> CellSummary:
    r = np.array([m.rmse for m in runs])
    rt = np.array([m.response_time for m in runs])
    ok = rt[np.isfinite(rt)]
    n_fail = int(len(rt) - len(ok))
    sd = (lambda v: float(np.std(v, ddof=1)) if len(v) > 1 else 0.0)
    return CellSummary(float(np.mean(r)), sd(r),
                       float(np.mean(ok)) if n_fail == 0 else math.inf,
                       sd(ok) if len(ok) else math.nan, n_fail, len(runs))


def _job(args):
    controller, scenario, seed, plant = args
    traj = run_session(controller, scenario, seed, plant)
    return traj, _metrics(traj, scenario)


def compare(controllers: Dict[str, object], scenarios: Sequence[Scenario] = SCENARIOS,
            seeds: Sequence[int] = range(5), plant: Optional[Plant] = None,
            workers: int = 1, keep_trajectories: bool = True) -> BenchResult:
    """Every controller on every scenario for every seed.

    ``controllers`` maps a row name to a controller object (``reset()`` and
    ``__call__(state, desired, dt)``).  Sessions are independent, so
    ``workers > 1`` farms them out to processes; results are aggregated in a
    fixed order either way.
    """
    seeds = [int(s) for s in seeds]
    if len(seeds) < 1:
        raise ValueError("need at least one seed")
    keys = [(name, sc, sd) for name in controllers for sc in scenarios for sd in seeds]
    jobs = [(controllers[name], sc, sd, plant) for name, sc, sd in keys]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(_job, jobs))
    else:
        out = [_job(j) for j in jobs]
    names = list(controllers)
    runs, trajs = [], []
    for (name, _, _), (traj, m) in zip(keys, out):
        m.controller = traj.controller = name
        runs.append(m)
        trajs.append(traj)
    cells = {n: {s.name: summarize([r for r in runs if r.controller == n and r.scenario == s.name])
                 for s in scenarios} for n in names}
    return BenchResult(names, list(scenarios), seeds, runs, cells,
                       trajs if keep_trajectories else [])


def write_report(result: BenchResult, out_dir, trajectories: bool = True) -> Dict[str, str]:
    """report.json, table.txt, per-run trajectory CSVs and a long-format plot CSV."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {"json": os.path.join(out_dir, "report.json"),
             "table": os.path.join(out_dir, "table.txt"),
             "plot": os.path.join(out_dir, "cadence_long.csv")}
    with open(paths["json"], "w") as fh:
        fh.write(result.to_json())
    with open(paths["table"], "w") as fh:
        fh.write(result.table())
    with open(paths["plot"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["controller", "scenario", "seed", "t", "theta_dot", "desired"])
        for tr in result.trajectories:
            for k in range(len(tr.t)):
                w.writerow([tr.controller, tr.scenario, tr.seed, repr(float(tr.t[k])),
                            repr(float(tr.theta_dot[k])), repr(float(tr.desired[k]))])
    if trajectories:
        tdir = os.path.join(out_dir, "trajectories")
        os.makedirs(tdir, exist_ok=True)
        for tr in result.trajectories:
            tr.write_csv(os.path.join(tdir, f"{tr.controller}_{tr.scenario}_seed{tr.seed}.csv"))
    return paths


# ---------------------------------------------------------------- transfer

@dataclass
class TransferResult:
    seat_shift: float
    budget_seconds: float
    zero_shot: BenchResult
    adapted: BenchResult
    adapted_tracker: PolicyCheckpoint
    env_steps: int

    def stalled(self, floor: float = 2.0) -> bool:
        """True if any zero-shot run dipped to ``floor`` rad/s or below after handoff
        (or never handed off)."""
        for r in self.zero_shot.runs:
            if r.min_cadence_after_handoff is None or not r.min_cadence_after_handoff > floor:
                return True
        return False

    def to_json(self) -> str:
        doc = {"schema": "fescycle.transfer/1", "seat_shift": self.seat_shift,
               "budget_seconds": self.budget_seconds, "env_steps": self.env_steps,
               "zero_shot": json.loads(self.zero_shot.to_json()),
               "adapted": json.loads(self.adapted.to_json()),
               "zero_shot_stalled": self.stalled()}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def fine_tune_config(base: TrainConfig, budget_steps: int, max_steps: int) -> TrainConfig:
    """Short low-noise continuation of a trained agent."""
    episodes = max(1, math.ceil(budget_steps / max_steps))
    return replace(base, episodes=episodes, sigma_start=base.sigma_end,
                   warmup=min(base.warmup, max(base.batch_size, budget_steps // 2)))


def transfer_experiment(starter: PolicyCheckpoint, tracker: PolicyCheckpoint,
                        seat_shift: float = 0.15, budget_seconds: float = 600.0,
                        plant: Optional[Plant] = None, scenarios: Sequence[Scenario] = SCENARIOS,
                        seeds: Sequence[int] = range(5), train_config: Optional[TrainConfig] = None,
                        episode_config: Optional[EpisodeConfig] = None,
                        workers: int = 1) -> TransferResult:
    """Zero-shot evaluation on a shifted seat, fine-tuning of the Tracker for
    ``budget_seconds`` of simulated interaction, and re-evaluation."""
    plant = plant or Plant()
    shifted = Plant(plant.geometry.with_seat_shift(plant.geometry.seat_shift + seat_shift),
                    plant.muscles)
    zero = compare({"rl": RLController(starter, tracker)}, scenarios, seeds, shifted, workers)
    ep = episode_config or EpisodeConfig(mode=TRACKER)
    if ep.mode != TRACKER:
        raise ValueError("fine-tuning runs in Tracker mode")
    budget_steps = int(round(budget_seconds / ep.dt))
    cfg = fine_tune_config(train_config or TrainConfig(), budget_steps, ep.max_steps)
    starter_policy = ActorPolicy.from_checkpoint(starter)

    def factory(seed):
        return CyclingEnv(ep, shifted, starter_policy, seed=seed)

    if budget_steps > 0:
        res = train(factory, TRACKER, cfg, init=tracker, obs_scale=obs_scale(TRACKER),
                    metadata={"fine_tuned_seat_shift": seat_shift}, step_budget=budget_steps)
        adapted_ckpt = res.final
        steps = sum(s.length for s in res.curve)
    else:
        adapted_ckpt, steps = tracker, 0
    adapted = compare({"rl": RLController(starter, adapted_ckpt)}, scenarios, seeds, shifted,
                      workers)
    return TransferResult(float(seat_shift), float(budget_seconds), zero, adapted, adapted_ckpt,
                          steps)


# ---------------------------------------------------------------- calibration

def calibrate_pid(kp_grid: Sequence[float], ki_grid: Sequence[float], kd_grid: Sequence[float],
                  seeds: Sequence[int] = range(3), plant: Optional[Plant] = None,
                  scenario: Scenario = SCENARIOS[0],
                  pattern: Optional[StimPattern] = None) -> List[dict]:
    """Grid search of PID gains by mean RMSE on ``scenario``; best first."""
    rows = []
    for kp in kp_grid:
        for ki in ki_grid:
            for kd in kd_grid:
                gains = PidGains(kp, ki, kd)
                ctl = PatternController("pid", pattern, gains=gains)
                errs = [rmse(run_session(ctl, scenario, s, plant), scenario) for s in seeds]
                rows.append({"kp": kp, "ki": ki, "kd": kd, "rmse": float(np.mean(errs))})
    rows.sort(key=lambda r: (r["rmse"], r["kp"], r["ki"], r["kd"]))
    return rows
