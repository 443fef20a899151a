import pytest

from fescycle.baselines import FuzzyRuleBase, PidGains, StimPattern
from fescycle.bench import SCENARIOS
from fescycle.config import ConfigError, WorkbenchConfig, load, loads, reference_text
from fescycle.ddpg import TrainConfig
from fescycle.env import Plant


def test_reference_equals_defaults():
    assert loads(reference_text()) == WorkbenchConfig()


def test_empty_document_is_defaults():
    assert loads("") == WorkbenchConfig()


def test_defaults_build_library_defaults():
    cfg = WorkbenchConfig()
    assert cfg.ddpg.build() == TrainConfig()
    assert cfg.baselines.pid.build() == PidGains()
    assert cfg.baselines.fuzzy.build() == FuzzyRuleBase()
    assert cfg.scenarios() == list(SCENARIOS)
    plant = cfg.plant()
    assert plant.geometry == Plant().geometry and plant.muscles == Plant().muscles
    ref, got = StimPattern(), cfg.pattern()
    assert got.lead_time == ref.lead_time
    assert got.on_angle == pytest.approx(ref.on_angle, abs=1e-12)
    assert got.off_angle == pytest.approx(ref.off_angle, abs=1e-12)


def test_yaml_round_trip(tmp_path):
    cfg = loads("ddpg: {episodes: 7, hidden: [8, 8]}\nmech: {seat_shift: 0.1}\n")
    path = tmp_path / "c.yaml"
    path.write_text(cfg.to_yaml())
    again = load(path)
    assert again == cfg and again.digest() == cfg.digest()


def test_digest_tracks_content():
    assert WorkbenchConfig().digest() != loads("ddpg: {episodes: 3}").digest()


def test_unknown_key_reports_line():
    with pytest.raises(ConfigError) as exc:
        loads("mech:\n  crank_inertai: 0.5\n", "rig.yaml")
    assert str(exc.value) == "rig.yaml:2: mech.crank_inertai: unknown key"


def test_type_error_reports_line():
    with pytest.raises(ConfigError) as exc:
        loads("env:\n  max_steps: 100\n  dt: fast\n")
    assert str(exc.value).startswith("<config>:3: env.dt:")


def test_domain_error_reports_section_line():
    with pytest.raises(ConfigError) as exc:
        loads("# comment\nenv: {}\nddpg:\n  gamma: 1.5\n")
    assert str(exc.value).startswith("<config>:3: ddpg: gamma must lie in (0, 1)")


def test_multiple_problems_listed():
    with pytest.raises(ConfigError) as exc:
        loads("mech: {bogus: 1}\nenv: {nope: 2}\n")
    assert len(exc.value.problems) == 2


def test_yaml_syntax_error():
    with pytest.raises(ConfigError) as exc:
        loads("ddpg: [1, 2\n")
    assert "YAML syntax error" in str(exc.value)


def test_muscle_override_applies_to_one_muscle():
    cfg = loads("physio:\n  overrides:\n    R-RF: {max_isometric_force: 120.0}\n")
    forces = [m.max_isometric_force for m in cfg.plant().muscles]
    assert forces == [150.0, 120.0, 150.0, 150.0, 150.0, 150.0]


def test_unknown_muscle_rejected():
    with pytest.raises(ConfigError):
        loads("physio:\n  overrides:\n    R-calf: {v_max: 2.0}\n")


def test_explicit_pattern_angles():
    cfg = loads("baselines:\n  pattern:\n    on_angle_deg: [0, 0, 0, 0, 0, 0]\n"
                "    off_angle_deg: [90, 90, 90, 90, 90, 90]\n")
    assert cfg.pattern().off_angle[0] == pytest.approx(1.5707963267948966)
