"""Hill-type muscle with first-order activation and three-compartment fatigue.

Compartments are the resting / activated / fatigued fibre fractions
(``m_rest``, ``m_active``, ``m_fatigued``); the fatigue factor scaling the
active force is ``1 - m_fatigued``.

The scalar kernels (underscore-prefixed) are numba-compiled so the rig
integrator in :mod:`fescycle.mech` can call them from its inner loop.  The
public functions validate their inputs and wrap the kernels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from typing import Callable, Union

from numba import njit

# hyperbolic curvature of the concentric force-velocity branch
FV_CURVATURE = 0.25
# eccentric plateau of the force-velocity relation
FV_ECCENTRIC_MAX = 1.5

SUM_TOLERANCE = 1e-6


class InvariantError(RuntimeError):
    """Raised when a muscle state leaves its admissible set."""


@dataclass(frozen=True)
class MuscleParams:
    max_isometric_force: float = 150.0  # N
    tau_act: float = 0.05  # s
    tau_deact: float = 0.06  # s
    fatigue_rate_F: float = 0.01  # 1/s
    recovery_rate_R: float = 0.002  # 1/s
    fl_width: float = 0.45
    v_max: float = 3.0  # optimal lengths / s
    passive_scale: float = 0.5

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            # a zero passive term is allowed so the rig can coast without elastic load
            ok = v >= 0 if f.name == "passive_scale" else v > 0
            if not (math.isfinite(v) and ok):
                raise ValueError(f"MuscleParams.{f.name} must be finite and > 0, got {v!r}")
        if self.tau_act > self.tau_deact:
            raise ValueError("tau_act must not exceed tau_deact")
        if self.fatigue_rate_F <= self.recovery_rate_R:
            raise ValueError("fatigue_rate_F must exceed recovery_rate_R")

    def with_fatigue_multiplier(self, k: float) -> "MuscleParams":
        """Scale both fatigue and recovery rates by ``k`` (training uses 5)."""
        return replace(self, fatigue_rate_F=self.fatigue_rate_F * k,
                       recovery_rate_R=self.recovery_rate_R * k)


@dataclass(frozen=True)
class MuscleState:
    activation_a: float = 0.0
    m_rest: float = 1.0
    m_active: float = 0.0
    m_fatigued: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (0.0 <= v <= 1.0):
                raise InvariantError(f"MuscleState.{f.name}={v!r} outside [0, 1]")
        total = self.m_rest + self.m_active + self.m_fatigued
        if abs(total - 1.0) > 1e-9:
            raise InvariantError(f"compartments sum to {total!r}, expected 1")

    @property
    def fatigue_factor(self) -> float:
        return 1.0 - self.m_fatigued


@dataclass(frozen=True)
class ForceFactors:
    f_length: float
    f_velocity: float
    f_passive: float


# ---------------------------------------------------------------- kernels

@njit(cache=True)
def _activation_step(a, s, dt, tau_act, tau_deact):
    tau = tau_act if s >= a else tau_deact
    a_new = a + dt * (s - a) / tau
    if a_new < 0.0:
        return 0.0
    if a_new > 1.0:
        return 1.0
    return a_new


@njit(cache=True)
def _drive(s, a, m_rest, m_active):
    if s >= a:
        if s - m_active <= m_rest:
            return s - m_active
        return m_rest
    return s - m_active


@njit(cache=True)
def _limited_rates(m_rest, m_active, m_fatigued, c, dt, F, R):
    # the drive may not move more fibres in one step than the source compartment holds
    if c > m_rest / dt:
        c = m_rest / dt
    elif c < -m_active / dt:
        c = -m_active / dt
    return -c + R * m_fatigued, c - F * m_active, F * m_active - R * m_fatigued


@njit(cache=True)
def _renormalize(m_rest, m_active, m_fatigued):
    m_rest = max(m_rest, 0.0)
    m_active = max(m_active, 0.0)
    m_fatigued = max(m_fatigued, 0.0)
    total = m_rest + m_active + m_fatigued
    return m_rest / total, m_active / total, m_fatigued / total, total


@njit(cache=True)
def _fatigue_euler(m_rest, m_active, m_fatigued, c, dt, F, R):
    dr, da, df = _limited_rates(m_rest, m_active, m_fatigued, c, dt, F, R)
    return m_rest + dt * dr, m_active + dt * da, m_fatigued + dt * df


@njit(cache=True)
def _fatigue_heun(m_rest, m_active, m_fatigued, c1, c2, dt, F, R):
    """Heun step; ``c2`` is the drive re-evaluated at the predictor.

    Pass ``c2 = nan`` to have it taken equal to ``c1``.
    """
    dr1, da1, df1 = _limited_rates(m_rest, m_active, m_fatigued, c1, dt, F, R)
    pr = m_rest + dt * dr1
    pa = m_active + dt * da1
    pf = m_fatigued + dt * df1
    if c2 != c2:
        c2 = c1
    dr2, da2, df2 = _limited_rates(pr, pa, pf, c2, dt, F, R)
    h = 0.5 * dt
    return (m_rest + h * (dr1 + dr2), m_active + h * (da1 + da2),
            m_fatigued + h * (df1 + df2))


@njit(cache=True)
def _force_length(l_norm, width):
    x = (l_norm - 1.0) / width
    return math.exp(-x * x)


@njit(cache=True)
def _force_velocity(v_norm, v_max):
    if v_norm <= -v_max:
        return 0.0
    if v_norm <= 0.0:
        return (1.0 + v_norm / v_max) / (1.0 - v_norm / (FV_CURVATURE * v_max))
    c = FV_CURVATURE * v_max
    return (c + FV_ECCENTRIC_MAX * v_norm) / (c + v_norm)


@njit(cache=True)
def _force_passive(l_norm, scale):
    stretch = l_norm - 1.0
    if stretch <= 0.0:
        return 0.0
    return scale * stretch * stretch


# ---------------------------------------------------------------- public ops

def _check_unit(name, x):
    if not (0.0 <= x <= 1.0):
        raise ValueError(f"{name}={x!r} outside [0, 1]")


def activation_step(a: float, s: float, dt: float, params: MuscleParams) -> float:
    """First-order activation dynamics, one explicit step.

    Uses ``tau_act`` while the stimulation is at or above the activation and
    ``tau_deact`` otherwise; the result is clamped to [0, 1].
    """
    _check_unit("a", a)
    _check_unit("s", s)
    if not dt > 0:
        raise ValueError(f"dt must be > 0, got {dt!r}")
    return _activation_step(float(a), float(s), float(dt), params.tau_act, params.tau_deact)


def drive_C(s: float, a: float, state: MuscleState) -> float:
    """Activation-deactivation drive moving fibres between resting and activated.

    While stimulation leads activation (``s >= a``) the drive pulls
    ``s - m_active`` fibres out of the resting pool, capped by what is left
    there; otherwise it is ``s - m_active``.
    """
    _check_unit("s", s)
    _check_unit("a", a)
    return _drive(float(s), float(a), state.m_rest, state.m_active)


Drive = Union[float, Callable[[MuscleState], float]]


def fatigue_step(state: MuscleState, C: Drive, dt: float, params: MuscleParams,
                 method: str = "heun") -> MuscleState:
    """Advance the compartment ODEs by ``dt``.

    ``C`` is either a number (drive held over the step) or a callable that
    re-evaluates the drive on an intermediate state, which the ``"heun"``
    method uses at its predictor.  The activation is carried through unchanged.
    """
    if not dt > 0:
        raise ValueError(f"dt must be > 0, got {dt!r}")
    F, R = params.fatigue_rate_F, params.recovery_rate_R
    r, a, f = state.m_rest, state.m_active, state.m_fatigued
    c1 = C(state) if callable(C) else float(C)
    if method == "euler":
        r, a, f = _fatigue_euler(r, a, f, c1, dt, F, R)
    elif method == "heun":
        c2 = math.nan
        if callable(C):
            dr, da, df = _limited_rates(r, a, f, c1, dt, F, R)
            pr, pa, pf, _ = _renormalize(r + dt * dr, a + dt * da, f + dt * df)
            c2 = C(MuscleState(state.activation_a, pr, pa, pf))
        r, a, f = _fatigue_heun(r, a, f, c1, c2, dt, F, R)
    else:
        raise ValueError(f"unknown integration method {method!r}")
    r, a, f, total = _renormalize(r, a, f)
    if abs(total - 1.0) > SUM_TOLERANCE:
        raise InvariantError(f"compartment sum drifted to {total!r}")
    return MuscleState(state.activation_a, r, a, f)


def fatigue_factor(state: MuscleState) -> float:
    return 1.0 - state.m_fatigued


def force_factors(norm_length: float, norm_velocity: float, params: MuscleParams) -> ForceFactors:
    """Active force-length (Gaussian), force-velocity (Hill) and passive factors.

    ``norm_velocity`` is positive when lengthening.
    """
    if not norm_length > 0:
        raise ValueError(f"norm_length must be > 0, got {norm_length!r}")
    return ForceFactors(
        _force_length(norm_length, params.fl_width),
        _force_velocity(norm_velocity, params.v_max),
        _force_passive(norm_length, params.passive_scale),
    )


def muscle_force(a: float, factors: ForceFactors, f_f: float, params: MuscleParams) -> float:
    _check_unit("a", a)
    _check_unit("f_f", f_f)
    return params.max_isometric_force * (
        a * factors.f_length * factors.f_velocity * f_f + factors.f_passive)
