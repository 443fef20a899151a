import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fescycle.bench import (
    SCENARIOS,
    PatternController,
    Scenario,
    Trajectory,
    ZeroController,
    compare,
    fine_tune_config,
    response_time,
    rmse,
    run_session,
    summarize,
    RunMetrics,
    write_report,
)
from fescycle.ddpg import TrainConfig

CASE2 = Scenario("case2", 8.0)


def synthetic(cadence, scenario=CASE2, dt=0.1):
    n = int(round(scenario.duration / dt))
    t = np.arange(n + 1) * dt
    cad = np.array([cadence(x) for x in t], dtype=float)
    des = np.array([scenario.desired(x) for x in t])
    z = np.zeros((n + 1, 6))
    return Trajectory("x", scenario.name, 0, t, np.zeros(n + 1), cad, des, z, z.copy())


def ramp(t):
    # 5 -> 8 over six seconds starting at the switch
    return 5.0 if t < 60 else min(8.0, 5.0 + 0.5 * (t - 60))


# ------------------------------------------------------------ scenario

def test_scenario_validation_and_setpoints():
    with pytest.raises(ValueError):
        Scenario("bad", 8.0, switch_time=120.0)
    assert CASE2.desired(59.9) == 5.0 and CASE2.desired(60.0) == 8.0
    assert [s.second_half_target for s in SCENARIOS] == [5.0, 8.0, 3.0]


# ------------------------------------------------------------ rmse

def test_rmse_perfect_tracking_is_zero():
    assert rmse(synthetic(CASE2.desired), CASE2) == 0.0


def test_rmse_constant_error():
    assert rmse(synthetic(lambda t: CASE2.desired(t) + 0.5), CASE2) == pytest.approx(0.5, abs=1e-12)


def test_rmse_sine_error():
    amp = 0.7
    tr = synthetic(lambda t: CASE2.desired(t) + amp * math.sin(2 * math.pi * t / 3.0))
    assert rmse(tr, CASE2) == pytest.approx(amp / math.sqrt(2), rel=0.01)


def test_rmse_ignores_first_half():
    tr = synthetic(lambda t: 0.0 if t < 60 else 8.0)
    assert rmse(tr, CASE2) == 0.0


def test_rmse_rejects_short_trajectory():
    tr = synthetic(CASE2.desired)
    short = Trajectory("x", "case2", 0, tr.t[:300], tr.theta[:300], tr.theta_dot[:300],
                       tr.desired[:300], tr.action[:300], tr.fatigue[:300])
    with pytest.raises(ValueError):
        rmse(short, CASE2)


@settings(deadline=None, max_examples=40)
@given(st.floats(0.0, 10.0), st.floats(0.1, 5.0), st.floats(0.1, 10.0))
def test_rmse_scales_with_error(k, amp, period):
    def err(t):
        return amp * math.sin(2 * math.pi * t / period) + 0.3
    base = synthetic(lambda t: CASE2.desired(t) + err(t))
    scaled = synthetic(lambda t: CASE2.desired(t) + k * err(t))
    assert rmse(scaled, CASE2) == pytest.approx(k * rmse(base, CASE2), rel=1e-9, abs=1e-12)


# ------------------------------------------------------------ response time

def test_response_instant_jump():
    assert response_time(synthetic(CASE2.desired), CASE2) == 0.0


def test_response_ramp_hand_value():
    assert response_time(synthetic(ramp), CASE2) == pytest.approx(5.2, abs=1e-9)


def test_response_never():
    assert response_time(synthetic(lambda t: 5.0), CASE2) == math.inf


def test_response_requires_dwell():
    # a brief overshoot crossing is not credited
    def blip(t):
        if 61.0 <= t < 61.5:
            return 8.0
        return ramp(t - 4.0) if t >= 64 else 5.0
    assert response_time(synthetic(blip), CASE2) == pytest.approx(9.2, abs=1e-9)


def test_response_downward_step():
    case3 = Scenario("case3", 3.0)
    tr = synthetic(lambda t: 5.0 if t < 60 else max(3.0, 5.0 - 0.5 * (t - 60)), case3)
    # band edge 3.15 reached at (5 - 3.15) / 0.5 = 3.7 s
    assert response_time(tr, case3) == pytest.approx(3.7, abs=1e-9)


@settings(deadline=None, max_examples=40)
@given(st.floats(0.05, 3.0), st.floats(0.0, 0.5), st.floats(0.1, 5.0))
def test_response_tighter_band_never_faster(slope, wobble, period):
    def cad(t):
        if t < 60:
            return 5.0
        return min(8.0, 5.0 + slope * (t - 60)) + wobble * math.sin(2 * math.pi * t / period)
    tr = synthetic(cad)
    assert response_time(tr, CASE2, band=0.02) >= response_time(tr, CASE2, band=0.05)


# ------------------------------------------------------------ sessions

def test_zero_controller_stays_still():
    tr = run_session(ZeroController(), SCENARIOS[0], 0)
    assert tr.complete and len(tr.t) == 1201
    # passive tension alone only nudges the crank into a rest position
    assert np.max(np.abs(tr.theta_dot)) < 0.5
    assert rmse(tr, SCENARIOS[0]) == pytest.approx(5.0, abs=0.01)
    assert np.all(tr.fatigue == 1.0)


def test_session_deterministic():
    a = run_session(PatternController("fuzzy"), SCENARIOS[1], 3)
    b = run_session(PatternController("fuzzy"), SCENARIOS[1], 3)
    assert np.array_equal(a.theta_dot, b.theta_dot)
    assert np.array_equal(a.action, b.action)


def test_seed_changes_start_angle():
    a = run_session(ZeroController(), SCENARIOS[0], 0)
    b = run_session(ZeroController(), SCENARIOS[0], 1)
    assert a.theta[0] != b.theta[0]


# ------------------------------------------------------------ aggregation

def test_summary_any_failure_is_inf():
    runs = [RunMetrics("a", "c", 0, 0.1, 2.0), RunMetrics("a", "c", 1, 0.3, math.inf)]
    s = summarize(runs)
    assert s.response_mean == math.inf and s.n_fail == 1
    assert s.rmse_mean == pytest.approx(0.2)


def test_compare_shape_and_report(tmp_path):
    ctls = {"zero": ZeroController(), "pid": PatternController("pid"),
            "fuzzy": PatternController("fuzzy")}
    res = compare(ctls, SCENARIOS, seeds=[0, 1])
    assert len(res.runs) == 18
    doc = json.loads(res.to_json())
    assert set(doc["summary"]) == {"zero", "pid", "fuzzy"}
    for row in doc["summary"].values():
        assert set(row) == {"case1", "case2", "case3"}
        for cell in row.values():
            assert {"rmse_mean", "response_time_mean"} <= set(cell)
    assert doc["summary"]["zero"]["case2"]["response_time_mean"] is None
    table = res.table()
    assert "(A) RMSE" in table and "(B) response time" in table
    assert table.count("\nzero") == 2

    write_report(res, tmp_path / "a")
    again = compare(ctls, SCENARIOS, seeds=[0, 1])
    write_report(again, tmp_path / "b")
    assert (tmp_path / "a/report.json").read_bytes() == (tmp_path / "b/report.json").read_bytes()
    assert len(list((tmp_path / "a/trajectories").iterdir())) == 18


def test_compare_parallel_matches_serial():
    ctls = {"pid": PatternController("pid")}
    a = compare(ctls, SCENARIOS[:2], seeds=[0, 1], workers=1)
    b = compare(ctls, SCENARIOS[:2], seeds=[0, 1], workers=2)
    assert a.to_json() == b.to_json()


# ------------------------------------------------------------ transfer

def test_fine_tune_config():
    cfg = fine_tune_config(TrainConfig(), budget_steps=6000, max_steps=100)
    assert cfg.episodes == 60
    assert cfg.sigma_start == cfg.sigma_end == 0.02
    assert cfg.warmup == 1000
    assert fine_tune_config(TrainConfig(), 250, 100).warmup == 125
