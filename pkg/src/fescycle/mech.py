"""Reduced planar cycling rig: six muscles driving a crank through
angle-dependent moment arms.

Muscle order everywhere is (R-glut, R-RF, R-hams, L-glut, L-RF, L-hams).
Rows of the muscle-state array are ``(a, m_rest, m_active, m_fatigued)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional, Sequence

import numpy as np
from numba import njit

from .physio import (
    MuscleParams,
    MuscleState,
    _activation_step,
    _drive,
    _force_length,
    _force_passive,
    _force_velocity,
    _limited_rates,
)

N_MUSCLES = 6
MUSCLE_NAMES = ("R-glut", "R-RF", "R-hams", "L-glut", "L-RF", "L-hams")
TWO_PI = 2.0 * math.pi
INNER_DT = 1e-3

# right-leg phase offsets (rad); the left leg is shifted by half a turn
RIGHT_PHASES = (0.61, 5.93, 2.27)
# seat_shift -> fractional length_gain change (0.15 rad -> +5 %)
SEAT_GAIN_PER_RAD = 1.0 / 3.0


class SimulationError(RuntimeError):
    pass


def _default_phases():
    return tuple(RIGHT_PHASES) + tuple((p + math.pi) % TWO_PI for p in RIGHT_PHASES)


@dataclass(frozen=True)
class RigGeometry:
    moment_arm_peak: tuple = (0.05,) * N_MUSCLES  # m
    phase_offset: tuple = field(default_factory=_default_phases)  # rad
    slack_norm_length: tuple = (0.85,) * N_MUSCLES
    length_gain: tuple = (0.3,) * N_MUSCLES
    crank_inertia: float = 0.5  # kg m^2
    seat_shift: float = 0.0  # rad, uniform phase perturbation
    crank_damping: float = 0.1  # N m s / rad

    def __post_init__(self):
        for name in ("moment_arm_peak", "phase_offset", "slack_norm_length", "length_gain"):
            v = tuple(float(x) for x in getattr(self, name))
            if len(v) != N_MUSCLES:
                raise ValueError(f"{name} needs {N_MUSCLES} entries, got {len(v)}")
            object.__setattr__(self, name, v)
        if min(self.moment_arm_peak) <= 0:
            raise ValueError("moment_arm_peak must be > 0")
        if not self.crank_inertia > 0:
            raise ValueError("crank_inertia must be > 0")
        if self.crank_damping < 0:
            raise ValueError("crank_damping must be >= 0")
        for r in range(3):
            d = (self.phase_offset[r + 3] - self.phase_offset[r] - math.pi) % TWO_PI
            if min(d, TWO_PI - d) > 1e-9:
                raise ValueError(f"left muscle {MUSCLE_NAMES[r + 3]} must lead its right "
                                 "counterpart by pi")

    def with_seat_shift(self, seat_shift: float) -> "RigGeometry":
        from dataclasses import replace
        return replace(self, seat_shift=float(seat_shift))

    def effective(self):
        """Arrays (peak, phase, slack, gain) with the seat perturbation applied."""
        phase = np.array(self.phase_offset) + self.seat_shift
        gain = np.array(self.length_gain) * (1.0 + SEAT_GAIN_PER_RAD * self.seat_shift)
        return (np.array(self.moment_arm_peak), phase, np.array(self.slack_norm_length), gain)


@dataclass
class RigState:
    theta: float
    theta_dot: float
    muscles: np.ndarray  # (6, 4)

    @classmethod
    def fresh(cls, theta: float = 0.0, theta_dot: float = 0.0) -> "RigState":
        m = np.zeros((N_MUSCLES, 4))
        m[:, 1] = 1.0
        return cls(float(theta) % TWO_PI, float(theta_dot), m)

    def copy(self) -> "RigState":
        return RigState(self.theta, self.theta_dot, self.muscles.copy())

    @property
    def fatigue(self) -> np.ndarray:
        return 1.0 - self.muscles[:, 3]

    def muscle_states(self) -> list:
        return [MuscleState(*row) for row in self.muscles]

    @classmethod
    def from_muscle_states(cls, theta, theta_dot, states: Sequence[MuscleState]) -> "RigState":
        m = np.array([[s.activation_a, s.m_rest, s.m_active, s.m_fatigued] for s in states])
        return cls(float(theta) % TWO_PI, float(theta_dot), m)


def moment_arm(theta: float, muscle_index: int, geom: RigGeometry) -> float:
    """Signed moment arm (m); positive where the muscle propels the crank."""
    peak, phase, _, _ = geom.effective()
    return peak[muscle_index] * math.sin(theta - phase[muscle_index])


def muscle_kinematics(theta: float, theta_dot: float, muscle_index: int, geom: RigGeometry):
    """Normalized fibre length and its time derivative (lengths/s)."""
    _, phase, slack, gain = geom.effective()
    x = theta - phase[muscle_index]
    length = slack[muscle_index] + gain[muscle_index] * (1.0 + math.cos(x)) / 2.0
    velocity = -gain[muscle_index] * math.sin(x) * theta_dot / 2.0
    return length, velocity


@lru_cache(maxsize=64)
def _pack_params(params: tuple):
    cols = ("max_isometric_force", "tau_act", "tau_deact", "fatigue_rate_F",
            "recovery_rate_R", "fl_width", "v_max", "passive_scale")
    return tuple(np.array([getattr(p, c) for p in params], dtype=float) for c in cols)


def muscle_params_tuple(params) -> tuple:
    if isinstance(params, MuscleParams):
        params = (params,) * N_MUSCLES
    params = tuple(params)
    if len(params) != N_MUSCLES:
        raise ValueError(f"expected {N_MUSCLES} MuscleParams, got {len(params)}")
    return params


@njit(cache=True)
def _integrate(theta, theta_dot, mus, action, n_inner, h,
               peak, phase, slack, gain, inertia, damping,
               f0, tau_a, tau_d, rate_f, rate_r, width, vmax, pscale, trace):
    two_pi = 2.0 * math.pi
    for k in range(n_inner):
        torque = -damping * theta_dot
        for m in range(6):
            x = theta - phase[m]
            sx = math.sin(x)
            length = slack[m] + gain[m] * (1.0 + math.cos(x)) * 0.5
            vel = -gain[m] * sx * theta_dot * 0.5
            active = mus[m, 0] * _force_length(length, width[m]) * _force_velocity(vel, vmax[m])
            force = f0[m] * (active * (1.0 - mus[m, 3]) + _force_passive(length, pscale[m]))
            torque += force * peak[m] * sx
        for m in range(6):
            s = action[m]
            a = mus[m, 0]
            r = mus[m, 1]
            ma = mus[m, 2]
            mf = mus[m, 3]
            a_new = _activation_step(a, s, h, tau_a[m], tau_d[m])
            c1 = _drive(s, a, r, ma)
            dr1, da1, df1 = _limited_rates(r, ma, mf, c1, h, rate_f[m], rate_r[m])
            pr = max(r + h * dr1, 0.0)
            pa = max(ma + h * da1, 0.0)
            pf = max(mf + h * df1, 0.0)
            c2 = _drive(s, a_new, pr, pa)
            dr2, da2, df2 = _limited_rates(pr, pa, pf, c2, h, rate_f[m], rate_r[m])
            r = max(r + 0.5 * h * (dr1 + dr2), 0.0)
            ma = max(ma + 0.5 * h * (da1 + da2), 0.0)
            mf = max(mf + 0.5 * h * (df1 + df2), 0.0)
            tot = r + ma + mf
            mus[m, 0] = a_new
            mus[m, 1] = r / tot
            mus[m, 2] = ma / tot
            mus[m, 3] = mf / tot
        theta_dot += h * torque / inertia
        theta += h * theta_dot
        theta -= two_pi * math.floor(theta / two_pi)
        if theta >= two_pi:
            theta -= two_pi
        if trace.shape[0] > 0:
            trace[k, 0] = theta
            trace[k, 1] = theta_dot
            for m in range(6):
                for j in range(4):
                    trace[k, 2 + 4 * m + j] = mus[m, j]
    return theta, theta_dot


_NO_TRACE = np.zeros((0, 2 + 4 * N_MUSCLES))


def crank_step(state: RigState, action, dt_outer: float, geom: RigGeometry, params,
               inner_dt: float = INNER_DT, trace: Optional[np.ndarray] = None) -> RigState:
    """Hold ``action`` for ``dt_outer`` seconds, integrating in ``inner_dt`` substeps.

    Muscle activation and compartments advance with the physio update rules;
    the crank uses semi-implicit Euler with no friction unless
    ``geom.crank_damping`` is set.  If ``trace`` is an array of shape
    ``(n_inner, 26)`` it receives ``theta, theta_dot`` and the flattened muscle
    rows after every inner step.
    """
    action = np.asarray(action, dtype=float)
    if action.shape != (N_MUSCLES,):
        raise ValueError(f"action must have shape ({N_MUSCLES},), got {action.shape}")
    if np.any(~(action >= 0.0)) or np.any(~(action <= 1.0)):
        raise ValueError("action components must lie in [0, 1]")
    n_inner = int(round(dt_outer / inner_dt))
    if n_inner < 1 or abs(n_inner * inner_dt - dt_outer) > 1e-9:
        raise ValueError(f"dt_outer={dt_outer} is not a multiple of inner_dt={inner_dt}")
    peak, phase, slack, gain = geom.effective()
    packed = _pack_params(muscle_params_tuple(params))
    mus = state.muscles.copy()
    if trace is None:
        trace = _NO_TRACE
    theta, theta_dot = _integrate(
        float(state.theta), float(state.theta_dot), mus, action, n_inner, float(inner_dt),
        peak, phase, slack, gain, float(geom.crank_inertia), float(geom.crank_damping),
        *packed, trace)
    if not (math.isfinite(theta) and math.isfinite(theta_dot) and np.all(np.isfinite(mus))):
        raise SimulationError(
            f"non-finite rig state after step (theta={theta}, theta_dot={theta_dot}); "
            "check geometry and muscle parameters")
    return RigState(theta, theta_dot, mus)


def simulate(state: RigState, policy: Callable[[RigState, int], np.ndarray], n_steps: int,
             dt_outer: float, geom: RigGeometry, params,
             hook: Optional[Callable[[int, RigState, np.ndarray], None]] = None) -> RigState:
    """Closed-loop rollout; ``hook(k, state, action)`` sees every applied action."""
    for k in range(n_steps):
        action = np.asarray(policy(state, k), dtype=float)
        nxt = crank_step(state, action, dt_outer, geom, params)
        if hook is not None:
            hook(k, nxt, action)
        state = nxt
    return state
