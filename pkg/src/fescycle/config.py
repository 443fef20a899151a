"""Workbench configuration: one YAML file, validated on load, unknown keys rejected."""
from __future__ import annotations

import hashlib
import json
import math
from importlib import resources
from typing import Dict, List, Optional, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .baselines import (FuzzyRuleBase, PidGains, StimPattern, _default_table, _label_sets,
                        centred_arcs)
from .bench import Scenario
from .ddpg import TrainConfig
from .env import EpisodeConfig, Plant
from .mech import MUSCLE_NAMES, RigGeometry, _default_phases
from .physio import MuscleParams

REFERENCE_CONFIG = "reference_config.yaml"


class ConfigError(ValueError):
    """Invalid configuration; ``str()`` lists one ``path:line: message`` per problem."""

    def __init__(self, problems: List[str]):
        super().__init__("\n".join(problems))
        self.problems = problems


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class MuscleSection(_Section):
    max_isometric_force: float = 150.0
    tau_act: float = 0.05
    tau_deact: float = 0.06
    fatigue_rate_F: float = 0.01
    recovery_rate_R: float = 0.002
    fl_width: float = 0.45
    v_max: float = 3.0
    passive_scale: float = 0.5


class MuscleOverride(_Section):
    max_isometric_force: Optional[float] = None
    tau_act: Optional[float] = None
    tau_deact: Optional[float] = None
    fatigue_rate_F: Optional[float] = None
    recovery_rate_R: Optional[float] = None
    fl_width: Optional[float] = None
    v_max: Optional[float] = None
    passive_scale: Optional[float] = None


class PhysioSection(_Section):
    default: MuscleSection = MuscleSection()
    overrides: Dict[str, MuscleOverride] = Field(default_factory=dict)

    @field_validator("overrides")
    @classmethod
    def _known_muscles(cls, v):
        for name in v:
            if name not in MUSCLE_NAMES:
                raise ValueError(f"unknown muscle {name!r}; expected one of {list(MUSCLE_NAMES)}")
        return v

    def build(self) -> Tuple[MuscleParams, ...]:
        base = self.default.model_dump()
        out = []
        for name in MUSCLE_NAMES:
            fields = dict(base)
            if name in self.overrides:
                fields.update({k: v for k, v in self.overrides[name].model_dump().items()
                               if v is not None})
            out.append(MuscleParams(**fields))
        return tuple(out)


class MechSection(_Section):
    moment_arm_peak: List[float] = [0.05] * 6
    phase_offset: List[float] = Field(default_factory=lambda: list(_default_phases()))
    slack_norm_length: List[float] = [0.85] * 6
    length_gain: List[float] = [0.3] * 6
    crank_inertia: float = 0.5
    seat_shift: float = 0.0
    crank_damping: float = 0.1

    def build(self) -> RigGeometry:
        return RigGeometry(**{k: tuple(v) if isinstance(v, list) else v
                              for k, v in self.model_dump().items()})


class EnvSection(_Section):
    max_steps: int = 100
    dt: float = 0.1
    desired_cadence_range: Tuple[float, float] = (3.0, 8.0)
    fatigue_rate_multiplier: float = 5.0

    def build(self, mode: str, seed: Optional[int] = None) -> EpisodeConfig:
        return EpisodeConfig(mode=mode, seed=seed, **self.model_dump())


class DdpgSection(_Section):
    episodes: int = 1000
    batch_size: int = 64
    gamma: float = 0.99
    tau: float = 0.001
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    buffer_capacity: int = 1_000_000
    sigma_start: float = 0.2
    sigma_end: float = 0.02
    noise: str = "gaussian"
    ou_theta: float = 0.15
    warmup: int = 1000
    hidden: List[int] = [250, 250]
    grad_clip: float = 1.0
    best_window: int = 50

    def build(self, seed: int = 0, **overrides) -> TrainConfig:
        fields = self.model_dump()
        fields.update(overrides)
        return TrainConfig(seed=seed, **fields)


class PatternSection(_Section):
    arc_width_deg: float = 110.0
    on_angle_deg: Optional[List[float]] = None
    off_angle_deg: Optional[List[float]] = None
    lead_time: float = 0.1

    def build(self, geometry: Optional[RigGeometry] = None) -> StimPattern:
        if (self.on_angle_deg is None) != (self.off_angle_deg is None):
            raise ValueError("give both on_angle_deg and off_angle_deg, or neither")
        if self.on_angle_deg is None:
            if not 0.0 < self.arc_width_deg < 360.0:
                raise ValueError("arc_width_deg must lie in (0, 360)")
            _, phase, _, _ = (geometry or RigGeometry()).effective()
            on, off = centred_arcs(phase, math.radians(self.arc_width_deg))
            return StimPattern(on, off, self.lead_time)
        return StimPattern(tuple(math.radians(x) for x in self.on_angle_deg),
                           tuple(math.radians(x) for x in self.off_angle_deg), self.lead_time)


class PidSection(_Section):
    kp: float = 0.15
    ki: float = 0.05
    kd: float = 0.01
    integral_limit: float = 2.0

    def build(self) -> PidGains:
        return PidGains(**self.model_dump())


class FuzzySection(_Section):
    error_span: float = 5.0
    rate_span: float = 5.0
    singletons: List[float] = [-0.8, -0.3, 0.0, 0.3, 0.8]
    table: List[List[int]] = Field(default_factory=lambda: [list(r) for r in _default_table()])

    def build(self) -> FuzzyRuleBase:
        return FuzzyRuleBase(_label_sets(self.error_span), _label_sets(self.rate_span),
                             tuple(self.singletons), tuple(tuple(r) for r in self.table))


class BaselinesSection(_Section):
    pattern: PatternSection = PatternSection()
    pid: PidSection = PidSection()
    fuzzy: FuzzySection = FuzzySection()


class ScenarioSection(_Section):
    name: str
    second_half_target: float
    first_half_target: float = 5.0
    duration: float = 120.0
    switch_time: float = 60.0
    fatigue_multiplier: float = 1.0

    def build(self) -> Scenario:
        return Scenario(**self.model_dump())


def _default_scenarios():
    return [ScenarioSection(name=n, second_half_target=v)
            for n, v in (("case1", 5.0), ("case2", 8.0), ("case3", 3.0))]


class BenchSection(_Section):
    seeds: List[int] = [0, 1, 2, 3, 4]
    scenarios: List[ScenarioSection] = Field(default_factory=_default_scenarios)
    workers: int = 0  # 0 = one per CPU

    @field_validator("seeds")
    @classmethod
    def _enough_seeds(cls, v):
        if not v:
            raise ValueError("need at least one seed")
        return v


class WorkbenchConfig(_Section):
    physio: PhysioSection = PhysioSection()
    mech: MechSection = MechSection()
    env: EnvSection = EnvSection()
    ddpg: DdpgSection = DdpgSection()
    baselines: BaselinesSection = BaselinesSection()
    bench: BenchSection = BenchSection()
    output_dir: str = "runs"
    log_level: str = "info"

    @field_validator("log_level")
    @classmethod
    def _level(cls, v):
        if v not in ("debug", "info", "warning", "error"):
            raise ValueError("log_level must be debug, info, warning or error")
        return v

    def plant(self) -> Plant:
        return Plant(self.mech.build(), self.physio.build())

    def pattern(self) -> StimPattern:
        """The baselines' pattern, derived from the configured geometry unless given."""
        return self.baselines.pattern.build(self.mech.build())

    def scenarios(self) -> List[Scenario]:
        return [s.build() for s in self.bench.scenarios]

    def domain_checks(self):
        """(section path, builder) pairs; building checks the runtime invariants."""
        return [
            (("physio",), lambda: self.physio.build()),
            (("mech",), lambda: self.mech.build()),
            (("env",), lambda: self.env.build("starter")),
            (("ddpg",), lambda: self.ddpg.build()),
            (("baselines", "pattern"), self.pattern),
            (("baselines", "pid"), lambda: self.baselines.pid.build()),
            (("baselines", "fuzzy"), lambda: self.baselines.fuzzy.build()),
        ] + [(("bench", "scenarios", i), s.build) for i, s in enumerate(self.bench.scenarios)]

    def to_dict(self) -> dict:
        return self.model_dump(mode="json")

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------- loading

def _line_of(node, loc) -> Optional[int]:
    """1-based line of the YAML node addressed by a pydantic error location."""
    line = node.start_mark.line + 1 if node is not None else None
    for key in loc:
        if isinstance(node, yaml.MappingNode):
            nxt = None
            for k, v in node.value:
                if k.value == key:
                    nxt, line = v, k.start_mark.line + 1
                    break
            if nxt is None:
                return line
            node = nxt
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            node = node.value[key]
            line = node.start_mark.line + 1
        else:
            return line
    return line


def loads(text: str, source: str = "<config>") -> WorkbenchConfig:
    try:
        data = yaml.safe_load(text)
        tree = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}" if mark is not None else source
        raise ConfigError([f"{where}: YAML syntax error: {getattr(exc, 'problem', exc)}"]) from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError([f"{source}:1: top level must be a mapping"])
    try:
        cfg = WorkbenchConfig.model_validate(data)
    except ValidationError as exc:
        problems = []
        for err in exc.errors():
            loc = [p for p in err["loc"] if not (isinstance(p, str) and p.startswith("function-"))]
            line = _line_of(tree, loc)
            path = ".".join(str(p) for p in loc) or "<root>"
            msg = err["msg"]
            if err["type"] == "extra_forbidden":
                msg = "unknown key"
            problems.append(f"{source}:{line if line else '?'}: {path}: {msg}")
        raise ConfigError(problems) from None
    problems = []
    for path, build in cfg.domain_checks():
        try:
            build()
        except ValueError as exc:
            line = _line_of(tree, path)
            problems.append(f"{source}:{line if line else '?'}: {'.'.join(map(str, path))}: {exc}")
    if problems:
        raise ConfigError(problems)
    return cfg


def load(path) -> WorkbenchConfig:
    with open(path) as fh:
        return loads(fh.read(), str(path))


def reference_text() -> str:
    return resources.files("fescycle").joinpath(REFERENCE_CONFIG).read_text()
