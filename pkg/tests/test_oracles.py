import numpy as np
import pytest

from oracles import (
    FULL_STIM_EXACT,
    brute_force_full_stimulation,
    conservation_error,
    drive_mismatches,
    fatigue_oracle,
    package_full_stimulation,
)
from fescycle.physio import MuscleParams

P = MuscleParams()


def test_brute_force_matches_closed_form():
    ref = brute_force_full_stimulation(60.0, 1e-5, P.fatigue_rate_F, P.recovery_rate_R,
                                       P.tau_act, P.tau_deact, 1.0, 10.0)
    for k, t in enumerate((10.0, 60.0)):
        np.testing.assert_allclose(ref[(1, 6)[k]], FULL_STIM_EXACT[t], atol=2e-5)


def test_package_matches_closed_form():
    got = package_full_stimulation(60.0, 0.01, P)
    for t, want in FULL_STIM_EXACT.items():
        np.testing.assert_allclose(got[int(t * 100)], want, atol=2e-5)


@pytest.mark.parametrize("mult", [1.0, 5.0])
def test_fatigue_matches_brute_force(mult):
    dev, wall, _ = fatigue_oracle(60.0, P.with_fatigue_multiplier(mult))
    assert np.all(dev < 1e-4), dev
    assert wall < 10.0


def test_euler_alone_misses_the_oracle():
    # documents why the compartments use a second-order step
    from fescycle.physio import MuscleState, activation_step, drive_C, fatigue_step
    ref = brute_force_full_stimulation(60.0, 1e-5, P.fatigue_rate_F, P.recovery_rate_R,
                                       P.tau_act, P.tau_deact, 1.0, 0.01)
    st, a, worst = MuscleState(), 0.0, 0.0
    for k in range(1, 6001):
        a2 = activation_step(a, 1.0, 0.01, P)
        st = fatigue_step(st, drive_C(1.0, a, st), 0.01, P, method="euler")
        st = MuscleState(a2, st.m_rest, st.m_active, st.m_fatigued)
        a = a2
        worst = max(worst, abs(st.m_active - ref[k, 1]))
    assert worst > 1e-4


def test_drive_matches_literal_cases():
    assert drive_mismatches(10_000) == []


def test_conservation_over_session():
    assert conservation_error(120.0) < 1e-9
