import json
import math

import numpy as np
import pytest

from fescycle.baselines import StimPattern
from fescycle.env import TRACKER, build_observation
from fescycle.export import (
    export_checkpoint,
    export_policy,
    grid,
    on_arcs,
    pattern_from_export,
    stim_pattern_arcs,
)
from fescycle.nnet import DenseNet, Layer, PolicyCheckpoint


def linear_actor(w_theta=0.0, w_fatigue=0.0, bias=0.0):
    """Sigmoid of a weighted crank angle and own-muscle fatigue."""
    W = np.zeros((9, 6))
    W[0, :] = w_theta
    for m in range(6):
        W[3 + m, m] = w_fatigue
    return DenseNet([Layer(W, np.full(6, float(bias)), "sigmoid")])


def test_grid():
    assert len(grid(2.0)) == 180 and grid(2.0)[-1] == 358.0
    with pytest.raises(ValueError):
        grid(7.0)


def test_on_arcs_merges_through_zero():
    mask = np.zeros(12, bool)
    mask[[0, 1, 10, 11]] = True
    assert on_arcs(mask, 30.0) == [(300.0, 420.0)]


def test_on_arcs_full_and_empty():
    assert on_arcs(np.ones(4, bool), 90.0) == [(0.0, 360.0)]
    assert on_arcs(np.zeros(4, bool), 90.0) == []


def test_on_arcs_several_runs():
    mask = np.array([0, 1, 1, 0, 1, 0], bool)
    assert on_arcs(mask, 60.0) == [(60.0, 180.0), (240.0, 300.0)]


def test_zero_actor_has_no_arcs():
    exp = export_policy(linear_actor(bias=-50.0), cadence=5.0)
    assert all(a == [] for a in exp.arcs)
    assert np.all(exp.intensities < 1e-20)


def test_intensities_match_direct_queries():
    actor = DenseNet.build([9, 16, 6], output="sigmoid", rng=np.random.default_rng(3),
                           final_scale=1.0)
    exp = export_policy(actor, cadence=6.0, fatigue_level=0.8, resolution_deg=5.0)
    for k, ang in enumerate(exp.angles_deg):
        obs = build_observation(math.radians(ang), 6.0, np.full(6, 0.8), TRACKER, 6.0)
        assert np.array_equal(exp.intensities[k], actor.forward(obs))
    assert np.all((exp.intensities >= 0) & (exp.intensities <= 1))


def test_fatigue_changes_arcs():
    actor = linear_actor(w_theta=20.0, w_fatigue=-10.0)
    fresh = export_policy(actor, cadence=5.0, fatigue_level=1.0)
    tired = export_policy(actor, cadence=5.0, fatigue_level=0.5)
    assert fresh.arcs != tired.arcs
    # a tired muscle is switched on over a longer arc
    assert tired.arcs[0][0][0] < fresh.arcs[0][0][0]


def test_arcs_are_grid_aligned():
    actor = DenseNet.build([9, 16, 6], output="sigmoid", rng=np.random.default_rng(1),
                           final_scale=3.0)
    exp = export_policy(actor, cadence=5.0, threshold=0.5, resolution_deg=4.0)
    for arcs in exp.arcs:
        for a, b in arcs:
            assert a % 4.0 == 0 and b % 4.0 == 0


def test_write_and_rebuild_pattern(tmp_path):
    actor = linear_actor(w_theta=20.0, w_fatigue=-10.0)
    exp = export_policy(actor, cadence=5.0)
    paths = exp.write(tmp_path)
    doc = json.loads(open(paths["json"]).read())
    assert doc["schema"] == "fescycle.pattern/1" and len(doc["muscles"]) == 6
    rows = open(paths["csv"]).read().splitlines()
    assert rows[0].startswith("angle_deg,s1") and len(rows) == 181
    pat = pattern_from_export(doc)
    assert pat.on_angle[0] == pytest.approx(math.radians(exp.arcs[0][0][0]))


def test_baseline_pattern_uses_same_arc_format():
    arcs = stim_pattern_arcs(StimPattern())
    assert len(arcs) == 6 and all(len(a) == 1 for a in arcs)
    assert all(b - a == pytest.approx(110.0) for (a, b), in arcs)


def test_export_checkpoint_requires_tracker():
    ckpt = PolicyCheckpoint("starter", DenseNet.build([8, 4, 6], output="sigmoid",
                                                       rng=np.random.default_rng(0)))
    with pytest.raises(Exception):
        export_checkpoint(ckpt, cadence=5.0)


def test_bad_fatigue_level():
    with pytest.raises(ValueError):
        export_policy(linear_actor(), cadence=5.0, fatigue_level=1.5)
