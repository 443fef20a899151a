import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fescycle.physio import (
    ForceFactors,
    InvariantError,
    MuscleParams,
    MuscleState,
    activation_step,
    drive_C,
    fatigue_factor,
    fatigue_step,
    force_factors,
    muscle_force,
)

P = MuscleParams()


def state(r, a, f, act=0.0):
    return MuscleState(act, r, a, f)


@st.composite
def compartments(draw):
    x = draw(st.floats(0, 1))
    y = draw(st.floats(0, 1))
    lo, hi = min(x, y), max(x, y)
    r, a = lo, hi - lo
    return state(r, a, 1.0 - r - a)


# ------------------------------------------------------------ params / state

def test_params_reject_bad_values():
    with pytest.raises(ValueError):
        MuscleParams(tau_act=0.1, tau_deact=0.05)
    with pytest.raises(ValueError):
        MuscleParams(fatigue_rate_F=0.001, recovery_rate_R=0.002)
    with pytest.raises(ValueError):
        MuscleParams(v_max=0.0)


def test_state_rejects_bad_sum():
    with pytest.raises(InvariantError):
        MuscleState(0.0, 0.5, 0.5, 0.5)
    with pytest.raises(InvariantError):
        MuscleState(1.5, 1.0, 0.0, 0.0)


def test_fatigue_multiplier_scales_both_rates():
    q = P.with_fatigue_multiplier(5)
    assert q.fatigue_rate_F == pytest.approx(0.05)
    assert q.recovery_rate_R == pytest.approx(0.01)


# ------------------------------------------------------------ activation

def test_activation_fixed_point():
    assert activation_step(0.5, 0.5, 0.3, P) == 0.5


def test_activation_rise_clamps():
    assert activation_step(0.0, 1.0, 0.05, P) == 1.0


def test_activation_fall():
    assert activation_step(1.0, 0.0, 0.06, P) == pytest.approx(0.0, abs=1e-15)


def test_activation_rejects_bad_input():
    with pytest.raises(ValueError):
        activation_step(0.2, 0.5, 0.0, P)
    with pytest.raises(ValueError):
        activation_step(1.2, 0.5, 0.01, P)


@given(st.floats(0, 1), st.floats(0, 1), st.floats(1e-4, 0.05))
def test_activation_moves_toward_stimulation(a, s, dt):
    a2 = activation_step(a, s, dt, P)
    assert min(a, s) - 1e-15 <= a2 <= max(a, s) + 1e-15


# ------------------------------------------------------------ drive

def test_drive_case_within_rest_pool():
    assert drive_C(0.5, 0.3, state(0.7, 0.2, 0.1)) == pytest.approx(0.3)


def test_drive_case_capped_by_rest_pool():
    assert drive_C(0.9, 0.1, state(0.5, 0.2, 0.3)) == pytest.approx(0.5)


def test_drive_case_falling():
    assert drive_C(0.0, 0.4, state(0.6, 0.3, 0.1)) == pytest.approx(-0.3)


def test_drive_tie_takes_rising_branch():
    # s == a with s - M_A > M_R: rising branch caps at M_R, falling branch would not
    st_ = state(0.1, 0.2, 0.7)
    assert drive_C(0.5, 0.5, st_) == pytest.approx(0.1)


# ------------------------------------------------------------ compartments

def test_fatigue_euler_hand_step():
    p = MuscleParams(fatigue_rate_F=0.05, recovery_rate_R=0.01)
    out = fatigue_step(state(0.7, 0.2, 0.1), 0.0, 0.001, p, method="euler")
    assert out.m_rest == pytest.approx(0.700001, abs=1e-12)
    assert out.m_active == pytest.approx(0.19999, abs=1e-12)
    assert out.m_fatigued == pytest.approx(0.100009, abs=1e-12)


@pytest.mark.parametrize("method", ["euler", "heun"])
@pytest.mark.parametrize("dt", [1e-3, 0.1, 5.0])
def test_fresh_muscle_without_drive_is_unchanged(method, dt):
    out = fatigue_step(state(1.0, 0.0, 0.0), 0.0, dt, P, method=method)
    assert (out.m_rest, out.m_active, out.m_fatigued) == (1.0, 0.0, 0.0)


def test_fatigue_step_rejects_bad_dt_and_method():
    with pytest.raises(ValueError):
        fatigue_step(state(1, 0, 0), 0.0, 0.0, P)
    with pytest.raises(ValueError):
        fatigue_step(state(1, 0, 0), 0.0, 0.01, P, method="rk4")


@given(compartments(), st.floats(-1, 1), st.floats(1e-4, 0.1), st.sampled_from(["euler", "heun"]))
def test_fatigue_step_keeps_invariants(s0, c, dt, method):
    out = fatigue_step(s0, c, dt, P, method=method)
    assert abs(out.m_rest + out.m_active + out.m_fatigued - 1.0) < 1e-12
    assert min(out.m_rest, out.m_active, out.m_fatigued) >= 0.0


def test_fatigue_factor_examples():
    assert fatigue_factor(state(1, 0, 0)) == 1.0
    assert fatigue_factor(state(0, 0, 1)) == 0.0
    assert fatigue_factor(state(0.5, 0.25, 0.25)) == 0.75
    assert state(0.5, 0.25, 0.25).fatigue_factor == 0.75


def _run(s0, s, seconds, dt, params):
    a, cur = s0.activation_a, s0
    out = [cur]
    for _ in range(int(round(seconds / dt))):
        a_new = activation_step(a, s, dt, params)
        cur = fatigue_step(cur, lambda m, a=a: drive_C(s, a, m), dt, params)
        a = a_new
        out.append(cur)
    return out


def test_full_stimulation_fatigue_is_monotone():
    p = P.with_fatigue_multiplier(5)
    traj = _run(state(1, 0, 0), 1.0, 300.0, 0.01, p)
    ff = np.array([x.fatigue_factor for x in traj])
    steady = ff[-1]
    live = ff > steady + 1e-6
    assert np.all(np.diff(ff)[live[:-1]] <= 0.0)
    assert ff[-1] < 0.5


@settings(max_examples=30, deadline=None)
@given(compartments().filter(lambda m: m.m_fatigued > 1e-3), st.floats(0, 1))
def test_recovery_without_stimulation(s0, act):
    # once the activated pool has drained below the balance point R/F * M_F
    # the fatigued pool only shrinks
    p = P.with_fatigue_multiplier(5)
    traj = _run(MuscleState(act, s0.m_rest, s0.m_active, s0.m_fatigued), 0.0, 20.0, 0.01, p)
    mf = np.array([x.m_fatigued for x in traj])
    ma = np.array([x.m_active for x in traj])
    drained = ma * p.fatigue_rate_F < mf * p.recovery_rate_R
    assert drained[-1]
    first = int(np.argmax(drained))
    assert np.all(np.diff(mf[first:]) < 0.0)
    assert np.all(np.diff(ma[first:]) <= 0.0)


# ------------------------------------------------------------ force

def test_force_factors_isometric_optimum():
    f = force_factors(1.0, 0.0, P)
    assert (f.f_length, f.f_velocity, f.f_passive) == (1.0, 1.0, 0.0)


def test_force_velocity_zero_at_max_shortening():
    assert force_factors(1.0, -P.v_max, P).f_velocity == 0.0
    assert force_factors(1.0, -2 * P.v_max, P).f_velocity == 0.0


def test_force_length_one_width_out():
    assert force_factors(1.45, 0.0, P).f_length == pytest.approx(math.exp(-1.0), rel=1e-12)


def test_force_factors_rejects_nonpositive_length():
    with pytest.raises(ValueError):
        force_factors(0.0, 0.0, P)


@given(st.floats(0.3, 2.0), st.floats(-10, 10), st.floats(-10, 10))
def test_force_factor_ranges_and_monotone_velocity(l, v1, v2):
    f1 = force_factors(l, v1, P)
    f2 = force_factors(l, v2, P)
    assert 0.0 <= f1.f_length <= 1.0
    assert 0.0 <= f1.f_velocity <= 1.5
    assert f1.f_passive >= 0.0
    if v1 <= v2:
        assert f1.f_velocity <= f2.f_velocity + 1e-15


def test_force_velocity_plateau():
    assert force_factors(1.0, 1e6, P).f_velocity == pytest.approx(1.5, rel=1e-5)


def test_muscle_force_examples():
    p = MuscleParams(max_isometric_force=1000.0)
    assert muscle_force(1.0, ForceFactors(1, 1, 0), 1.0, p) == 1000.0
    assert muscle_force(0.8, ForceFactors(0.9, 1.0, 0.1), 0.0, p) == pytest.approx(100.0)
    assert muscle_force(0.0, ForceFactors(0.7, 1.2, 0.0), 1.0, p) == 0.0
