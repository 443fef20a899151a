"""Convert a Tracker policy into an angle-indexed stimulation pattern.

The export is a CSV of intensities on a crank-angle grid plus a JSON file
with the ON arcs obtained by thresholding, in the same arc format used for
the baselines' fixed pattern.
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .baselines import StimPattern
from .env import TRACKER, build_observation
from .mech import MUSCLE_NAMES, N_MUSCLES
from .nnet import DenseNet, PolicyCheckpoint

EXPORT_SCHEMA = "fescycle.pattern/1"

Arc = Tuple[float, float]  # (on_deg, off_deg), off may wrap past 360


@dataclass
class PatternExport:
    resolution_deg: float
    angles_deg: np.ndarray
    intensities: np.ndarray  # (n_bins, 6)
    arcs: List[List[Arc]]
    cadence: float
    fatigue_level: float
    threshold: float

    def to_json(self) -> str:
        doc = {
            "schema": EXPORT_SCHEMA,
            "resolution_deg": self.resolution_deg,
            "cadence": self.cadence,
            "fatigue_level": self.fatigue_level,
            "threshold": self.threshold,
            "muscles": [{"name": n, "arcs": [list(a) for a in arcs]}
                        for n, arcs in zip(MUSCLE_NAMES, self.arcs)],
        }
        return json.dumps(doc, indent=2) + "\n"

    def write(self, out_dir) -> dict:
        os.makedirs(out_dir, exist_ok=True)
        paths = {"csv": os.path.join(out_dir, "pattern.csv"),
                 "json": os.path.join(out_dir, "pattern.json")}
        with open(paths["csv"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["angle_deg"] + [f"s{i + 1}" for i in range(N_MUSCLES)])
            for ang, row in zip(self.angles_deg, self.intensities):
                w.writerow([repr(float(ang))] + [repr(float(x)) for x in row])
        with open(paths["json"], "w") as fh:
            fh.write(self.to_json())
        return paths


def grid(resolution_deg: float) -> np.ndarray:
    n = 360.0 / resolution_deg
    if resolution_deg <= 0 or abs(n - round(n)) > 1e-9:
        raise ValueError("resolution_deg must divide 360")
    return np.arange(int(round(n))) * resolution_deg


def on_arcs(mask: Sequence[bool], resolution_deg: float) -> List[Arc]:
    """Runs of ON bins as (on, off) degrees; a run through 0 deg is one arc."""
    mask = np.asarray(mask, dtype=bool)
    n = len(mask)
    if mask.all():
        return [(0.0, 360.0)]
    if not mask.any():
        return []
    start = int(np.argmin(mask))  # begin scanning at an OFF bin so no run is split
    arcs = []
    k = 0
    while k < n:
        i = (start + k) % n
        if mask[i]:
            j = k
            while j + 1 < n and mask[(start + j + 1) % n]:
                j += 1
            on = i * resolution_deg
            arcs.append((on, on + (j - k + 1) * resolution_deg))
            k = j + 1
        else:
            k += 1
    return sorted(arcs)


def export_policy(actor: DenseNet, cadence: float, fatigue_level: float = 1.0,
                  threshold: float = 0.1, resolution_deg: float = 2.0) -> PatternExport:
    """Sweep the crank angle at fixed cadence (also used as the setpoint) and
    uniform fatigue factor; intensities are direct actor outputs."""
    if not 0.0 <= fatigue_level <= 1.0:
        raise ValueError("fatigue_level must lie in [0, 1]")
    angles = grid(resolution_deg)
    fatigue = np.full(N_MUSCLES, float(fatigue_level))
    rows = np.empty((len(angles), N_MUSCLES))
    for k, ang in enumerate(angles):
        obs = build_observation(math.radians(ang), cadence, fatigue, TRACKER, cadence)
        rows[k] = actor.forward(obs)
    arcs = [on_arcs(rows[:, m] > threshold, resolution_deg) for m in range(N_MUSCLES)]
    return PatternExport(float(resolution_deg), angles, rows, arcs, float(cadence),
                         float(fatigue_level), float(threshold))


def export_checkpoint(ckpt: PolicyCheckpoint, **kw) -> PatternExport:
    ckpt.require_mode(TRACKER)
    return export_policy(ckpt.actor, **kw)


def stim_pattern_arcs(pattern: StimPattern) -> List[List[Arc]]:
    """A fixed baseline pattern in the export's arc format."""
    out = []
    for on, off in zip(pattern.on_angle, pattern.off_angle):
        a = math.degrees(on)
        width = math.degrees((off - on) % (2 * math.pi))
        out.append([(a, a + width)])
    return out


def pattern_from_export(doc: dict, lead_time: float = 0.1) -> StimPattern:
    """Rebuild a gating pattern from an export whose muscles have one arc each."""
    on, off = [], []
    for m in doc["muscles"]:
        if len(m["arcs"]) != 1:
            raise ValueError(f"muscle {m['name']} has {len(m['arcs'])} arcs; the gate needs one")
        a, b = m["arcs"][0]
        on.append(math.radians(a % 360.0))
        off.append(math.radians(b % 360.0))
    return StimPattern(tuple(on), tuple(off), lead_time)
