"""Angle-gated conventional controllers: PID and fuzzy-logic intensity control.

Both share one stimulation pattern that switches muscles ON/OFF by crank
angle, shifted ahead by ``theta_dot * lead_time`` to offset the muscles'
activation delay.  Neither controller ever sees fatigue.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .mech import N_MUSCLES, RIGHT_PHASES, TWO_PI

ARC_WIDTH = math.radians(110.0)


def centred_arcs(phases: Sequence[float], width: float = ARC_WIDTH):
    """ON/OFF angles of arcs of ``width`` centred where each moment arm peaks."""
    centres = [(p + math.pi / 2) % TWO_PI for p in phases]
    on = tuple((c - width / 2) % TWO_PI for c in centres)
    off = tuple((c + width / 2) % TWO_PI for c in centres)
    return on, off


def _default_arcs():
    return centred_arcs(list(RIGHT_PHASES) + [(p + math.pi) % TWO_PI for p in RIGHT_PHASES])


@dataclass(frozen=True)
class StimPattern:
    on_angle: tuple = field(default_factory=lambda: _default_arcs()[0])
    off_angle: tuple = field(default_factory=lambda: _default_arcs()[1])
    lead_time: float = 0.1

    def __post_init__(self):
        on = tuple(float(x) for x in self.on_angle)
        off = tuple(float(x) for x in self.off_angle)
        if len(on) != N_MUSCLES or len(off) != N_MUSCLES:
            raise ValueError(f"pattern needs {N_MUSCLES} on/off angles")
        for i, (a, b) in enumerate(zip(on, off)):
            if abs((b - a) % TWO_PI) < 1e-12:
                raise ValueError(f"muscle {i}: degenerate ON interval")
        if self.lead_time < 0:
            raise ValueError("lead_time must be >= 0")
        object.__setattr__(self, "on_angle", on)
        object.__setattr__(self, "off_angle", off)


def _in_arc(x, on, off):
    width = (off - on) % TWO_PI
    return (x - on) % TWO_PI <= width


def pattern_gate(theta: float, theta_dot: float, pattern: StimPattern) -> np.ndarray:
    """Boolean ON mask for the six muscles at the lead-shifted crank angle."""
    eff = (theta + theta_dot * pattern.lead_time) % TWO_PI
    return np.array([_in_arc(eff, a, b) for a, b in zip(pattern.on_angle, pattern.off_angle)])


@dataclass(frozen=True)
class PidGains:
    kp: float = 0.15
    ki: float = 0.05
    kd: float = 0.01
    integral_limit: float = 2.0

    def __post_init__(self):
        if min(self.kp, self.ki, self.kd) < 0:
            raise ValueError("PID gains must be >= 0")
        if not self.integral_limit > 0:
            raise ValueError("integral_limit must be > 0")


class PidSession:
    """Stateful PID on cadence error with a clamped integral (anti-windup)."""

    def __init__(self, gains: PidGains):
        self.gains = gains
        self.integral = 0.0
        self.prev_error: Optional[float] = None

    def reset(self):
        self.integral = 0.0
        self.prev_error = None

    def unclipped(self, error: float, dt: float) -> float:
        if not dt > 0:
            raise ValueError("dt must be > 0")
        g = self.gains
        lim = g.integral_limit
        self.integral = min(max(self.integral + error * dt, -lim), lim)
        rate = 0.0 if self.prev_error is None else (error - self.prev_error) / dt
        self.prev_error = error
        return g.kp * error + g.ki * self.integral + g.kd * rate

    def __call__(self, error: float, dt: float) -> float:
        return min(max(self.unclipped(error, dt), 0.0), 1.0)


def pid_intensity(error: float, dt: float, gains: PidGains, session: PidSession) -> float:
    if session.gains is not gains:
        session.gains = gains
    return session(error, dt)


def triangular(x: float, left: float, centre: float, right: float) -> float:
    """Triangle membership; an infinite foot makes a saturating shoulder."""
    if x <= centre:
        if math.isinf(left):
            return 1.0
        if x <= left:
            return 0.0
        return (x - left) / (centre - left)
    if math.isinf(right):
        return 1.0
    if x >= right:
        return 0.0
    return (right - x) / (right - centre)


def _label_sets(span: float):
    c = np.linspace(-span, span, 5)
    sets = []
    for i in range(5):
        left = -math.inf if i == 0 else c[i - 1]
        right = math.inf if i == 4 else c[i + 1]
        sets.append((float(left), float(c[i]), float(right)))
    return tuple(sets)


def _default_table():
    return tuple(tuple(min(max(i + j - 4, -2), 2) + 2 for j in range(5)) for i in range(5))


@dataclass(frozen=True)
class FuzzyRuleBase:
    """5x5 Mamdani-style rule base with singleton consequents.

    ``table[i][j]`` indexes the intensity-change singleton fired by error
    label ``i`` and error-rate label ``j`` (labels ordered NB, NS, ZE, PS, PB).
    """
    error_sets: tuple = field(default_factory=lambda: _label_sets(5.0))
    rate_sets: tuple = field(default_factory=lambda: _label_sets(5.0))
    singletons: tuple = (-0.8, -0.3, 0.0, 0.3, 0.8)  # intensity / s
    table: tuple = field(default_factory=_default_table)

    def __post_init__(self):
        for name in ("error_sets", "rate_sets"):
            sets = tuple(tuple(float(v) for v in s) for s in getattr(self, name))
            if len(sets) != 5 or any(len(s) != 3 for s in sets):
                raise ValueError(f"{name} needs 5 triangles (left, centre, right)")
            object.__setattr__(self, name, sets)
        table = tuple(tuple(int(v) for v in row) for row in self.table)
        if len(table) != 5 or any(len(r) != 5 for r in table):
            raise ValueError("rule table must be 5x5")
        object.__setattr__(self, "table", table)
        object.__setattr__(self, "singletons", tuple(float(v) for v in self.singletons))
        if len(self.singletons) != 5:
            raise ValueError("need 5 singletons")
        for i in range(5):
            for j in range(5):
                v = table[i][j]
                if not 0 <= v < 5:
                    raise ValueError("rule table entries index the singletons (0..4)")
                if self.singletons[v] != -self.singletons[table[4 - i][4 - j]]:
                    raise ValueError("rule table must be antisymmetric under sign flip")

    def memberships(self, x: float, sets) -> np.ndarray:
        return np.array([triangular(x, *s) for s in sets])

    def delta(self, error: float, error_rate: float) -> float:
        """Centroid of the fired singletons (min t-norm)."""
        mu_e = self.memberships(error, self.error_sets)
        mu_r = self.memberships(error_rate, self.rate_sets)
        w = np.minimum.outer(mu_e, mu_r)
        total = w.sum()
        if total <= 0:
            return 0.0
        out = np.array(self.singletons)[np.array(self.table)]
        # a convex combination, but rounding can step just past the end singletons
        return float(np.clip((w * out).sum() / total, out.min(), out.max()))


class FuzzySession:
    def __init__(self, rules: FuzzyRuleBase):
        self.rules = rules
        self.intensity = 0.0
        self.prev_error: Optional[float] = None

    def reset(self):
        self.intensity = 0.0
        self.prev_error = None

    def __call__(self, error: float, dt: float) -> float:
        rate = 0.0 if self.prev_error is None else (error - self.prev_error) / dt
        self.prev_error = error
        return fuzzy_intensity(error, rate, dt, self.rules, self)


def fuzzy_intensity(error: float, error_rate: float, dt: float, rules: FuzzyRuleBase,
                    session: FuzzySession) -> float:
    if not dt > 0:
        raise ValueError("dt must be > 0")
    du = rules.delta(error, error_rate)
    session.intensity = min(max(session.intensity + du * dt, 0.0), 1.0)
    return session.intensity


class BaselineController:
    """PID or fuzzy intensity applied to every muscle the pattern switches ON."""

    def __init__(self, kind: str, pattern: Optional[StimPattern] = None,
                 gains: Optional[PidGains] = None, rules: Optional[FuzzyRuleBase] = None):
        kind = kind.lower()
        if kind not in ("pid", "fuzzy"):
            raise ValueError(f"unknown baseline kind {kind!r}")
        self.kind = kind
        self.pattern = pattern or StimPattern()
        if kind == "pid":
            self.session = PidSession(gains or PidGains())
        else:
            self.session = FuzzySession(rules or FuzzyRuleBase())

    def reset(self):
        self.session.reset()

    def __call__(self, theta: float, theta_dot: float, desired: float, dt: float) -> np.ndarray:
        u = self.session(desired - theta_dot, dt)
        gate = pattern_gate(theta, theta_dot, self.pattern)
        return np.where(gate, u, 0.0)


def baseline_controller(theta, theta_dot, desired, dt, kind=None, controller=None):
    """Functional entry point; pass a persistent ``controller`` to keep state."""
    if controller is None:
        controller = BaselineController(kind)
    return controller(theta, theta_dot, desired, dt)
