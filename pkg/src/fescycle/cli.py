"""fescycle command line: train, bench, export-pattern, transfer, calibrate-baselines.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import time
from typing import List, Optional

import numpy as np

from . import __version__

log = logging.getLogger("fescycle")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- helpers

def _load_config(path: Optional[str]):
    from .config import WorkbenchConfig, load
    cfg = load(path) if path else WorkbenchConfig()
    if log.level != logging.DEBUG:
        log.setLevel(cfg.log_level.upper())
    return cfg


def _prepare_out(path: str, force: bool) -> str:
    if os.path.exists(path) and (not os.path.isdir(path) or os.listdir(path)) and not force:
        raise UsageError(f"output {path!r} already exists; pass --force to overwrite")
    os.makedirs(path, exist_ok=True)
    return path


def _require_file(path: Optional[str], flag: str) -> str:
    if not path:
        raise UsageError(f"{flag} is required")
    if not os.path.isfile(path):
        raise FileNotFoundError(f"{flag}: no such file {path!r}")
    return path


def _file_digest(path: str) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _versions() -> dict:
    import numba
    import pydantic
    return {"fescycle": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "numba": numba.__version__, "pydantic": pydantic.__version__}


def _write_manifest(out: str, command: str, argv: List[str], cfg, seeds, t0: float,
                    inputs: Optional[dict] = None, outputs: Optional[dict] = None) -> None:
    doc = {
        "command": command,
        "argv": argv,
        "config_sha256": cfg.digest(),
        "config": cfg.to_dict(),
        "seeds": list(seeds),
        "inputs": {k: {"path": v, "sha256": _file_digest(v)} for k, v in (inputs or {}).items()},
        "outputs": outputs or {},
        "versions": _versions(),
        "wall_time_s": round(time.perf_counter() - t0, 3),
    }
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _workers(requested: Optional[int], cfg) -> int:
    n = requested if requested is not None else cfg.bench.workers
    return n if n and n > 0 else (os.cpu_count() or 1)


# ---------------------------------------------------------------- commands

def cmd_train(args, argv) -> int:
    from .ddpg import ActorPolicy, train, write_curve
    from .env import STARTER, TRACKER, CyclingEnv, ScriptedStarter, obs_scale
    from .nnet import PolicyCheckpoint

    cfg = _load_config(args.config)
    starter = inputs = None
    if args.mode == TRACKER:
        if args.scripted_starter:
            starter = ScriptedStarter(cfg.mech.build())
            inputs = {}
        else:
            path = _require_file(args.starter, "--starter (Tracker mode)")
            starter = ActorPolicy.from_checkpoint(PolicyCheckpoint.load(path, expect_mode=STARTER))
            inputs = {"starter": path}
    out = _prepare_out(args.out, args.force)
    t0 = time.perf_counter()
    overrides = {} if args.episodes is None else {"episodes": args.episodes}
    tcfg = cfg.ddpg.build(seed=args.seed, **overrides)
    ep_cfg = cfg.env.build(args.mode)
    plant = cfg.plant()

    def factory(seed):
        return CyclingEnv(ep_cfg, plant, starter, seed=seed)

    def progress(s):
        if (s.episode + 1) % 50 == 0:
            log.info("episode %d  length %d  mean|err| %.3f  return %.1f", s.episode + 1,
                     s.length, s.mean_abs_error, s.ret)

    res = train(factory, args.mode, tcfg, obs_scale=obs_scale(args.mode), progress=progress,
                metadata={"config_sha256": cfg.digest()})
    outputs = {"checkpoint": "checkpoint.pol", "best": "best.pol", "curve": "curve.csv"}
    res.final.save(os.path.join(out, outputs["checkpoint"]))
    res.best.save(os.path.join(out, outputs["best"]))
    write_curve(os.path.join(out, outputs["curve"]), res.curve)
    _write_manifest(out, "train", argv, cfg, [args.seed], t0, inputs, outputs)
    log.info("trained %d episodes (%d updates) in %.1f s -> %s", len(res.curve), res.updates,
             res.wall_time, out)
    return EXIT_OK


def _rl_controller(args):
    from .bench import RLController
    from .env import STARTER, TRACKER
    from .nnet import PolicyCheckpoint
    st = _require_file(args.starter, "--starter")
    tr = _require_file(args.tracker, "--tracker")
    return (RLController(PolicyCheckpoint.load(st, expect_mode=STARTER),
                         PolicyCheckpoint.load(tr, expect_mode=TRACKER)),
            {"starter": st, "tracker": tr})


def cmd_bench(args, argv) -> int:
    from .bench import PatternController, compare, write_report

    cfg = _load_config(args.config)
    names = [c.strip().lower() for c in args.controllers.split(",") if c.strip()]
    unknown = set(names) - {"rl", "pid", "fuzzy"}
    if unknown or not names:
        raise UsageError(f"--controllers takes a comma list of rl, pid, fuzzy (got {args.controllers!r})")
    controllers, inputs = {}, {}
    for n in names:
        if n == "rl":
            controllers["rl"], inputs = _rl_controller(args)
        elif n == "pid":
            controllers["pid"] = PatternController("pid", cfg.pattern(),
                                                   gains=cfg.baselines.pid.build())
        else:
            controllers["fuzzy"] = PatternController("fuzzy", cfg.pattern(),
                                                     rules=cfg.baselines.fuzzy.build())
    out = _prepare_out(args.out, args.force)
    t0 = time.perf_counter()
    seeds = args.seeds if args.seeds else cfg.bench.seeds
    result = compare(controllers, cfg.scenarios(), seeds, cfg.plant(), _workers(args.workers, cfg))
    paths = write_report(result, out, trajectories=not args.no_trajectories)
    _write_manifest(out, "bench", argv, cfg, seeds, t0, inputs,
                    {k: os.path.basename(v) for k, v in paths.items()})
    print(result.table())
    return EXIT_OK


def cmd_export_pattern(args, argv) -> int:
    from .env import TRACKER
    from .export import export_checkpoint
    from .mech import MUSCLE_NAMES
    from .nnet import PolicyCheckpoint

    path = _require_file(args.checkpoint, "checkpoint")
    ckpt = PolicyCheckpoint.load(path, expect_mode=TRACKER)
    out = _prepare_out(args.out, args.force)
    t0 = time.perf_counter()
    exp = export_checkpoint(ckpt, cadence=args.cadence, fatigue_level=args.fatigue_level,
                            threshold=args.threshold, resolution_deg=args.resolution)
    paths = exp.write(out)
    _write_manifest(out, "export-pattern", argv, _load_config(None), [], t0, {"tracker": path},
                    {k: os.path.basename(v) for k, v in paths.items()})
    for name, arcs in zip(MUSCLE_NAMES, exp.arcs):
        txt = ", ".join(f"{a:.0f}-{b:.0f}" for a, b in arcs) or "off"
        print(f"{name:7s} {txt}")
    return EXIT_OK


def cmd_transfer(args, argv) -> int:
    from .bench import transfer_experiment, write_report
    from .env import STARTER, TRACKER
    from .nnet import PolicyCheckpoint

    cfg = _load_config(args.config)
    st = _require_file(args.starter, "--starter")
    tr = _require_file(args.tracker, "--tracker")
    starter = PolicyCheckpoint.load(st, expect_mode=STARTER)
    tracker = PolicyCheckpoint.load(tr, expect_mode=TRACKER)
    out = _prepare_out(args.out, args.force)
    t0 = time.perf_counter()
    seeds = args.seeds if args.seeds else cfg.bench.seeds
    res = transfer_experiment(starter, tracker, args.seat_shift, args.budget, cfg.plant(),
                              cfg.scenarios(), seeds, cfg.ddpg.build(seed=args.seed),
                              cfg.env.build(TRACKER), _workers(args.workers, cfg))
    with open(os.path.join(out, "transfer.json"), "w") as fh:
        fh.write(res.to_json())
    res.adapted_tracker.save(os.path.join(out, "adapted_tracker.pol"))
    write_report(res.zero_shot, os.path.join(out, "zero_shot"), trajectories=False)
    write_report(res.adapted, os.path.join(out, "adapted"), trajectories=False)
    _write_manifest(out, "transfer", argv, cfg, list(seeds) + [args.seed], t0,
                    {"starter": st, "tracker": tr},
                    {"report": "transfer.json", "checkpoint": "adapted_tracker.pol"})
    print("zero-shot\n" + res.zero_shot.table())
    print("adapted\n" + res.adapted.table())
    print(f"zero-shot stalled: {res.stalled()}")
    return EXIT_OK


def cmd_calibrate(args, argv) -> int:
    from .bench import calibrate_pid

    cfg = _load_config(args.config)
    out = _prepare_out(args.out, args.force)
    t0 = time.perf_counter()
    seeds = args.seeds if args.seeds else cfg.bench.seeds[:3]
    rows = calibrate_pid(args.kp, args.ki, args.kd, seeds, cfg.plant(), cfg.scenarios()[0],
                         cfg.pattern())
    with open(os.path.join(out, "pid_grid.json"), "w") as fh:
        json.dump(rows, fh, indent=2)
        fh.write("\n")
    _write_manifest(out, "calibrate-baselines", argv, cfg, seeds, t0, None,
                    {"grid": "pid_grid.json"})
    for r in rows[:5]:
        print(f"kp={r['kp']:<6} ki={r['ki']:<6} kd={r['kd']:<6} rmse={r['rmse']:.4f}")
    return EXIT_OK


def cmd_reference_config(args, argv) -> int:
    from .config import reference_text
    sys.stdout.write(reference_text())
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _floats(text):
    return [float(x) for x in text.split(",")]


def _ints(text):
    return [int(x) for x in text.split(",")]


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fescycle", description="FES cycling control workbench")
    p.add_argument("--version", action="version", version=f"fescycle {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out=True):
        sp.add_argument("--config", help="YAML workbench config (defaults if omitted)")
        if out:
            sp.add_argument("--out", required=True, help="output directory")
            sp.add_argument("--force", action="store_true", help="overwrite a non-empty --out")

    t = sub.add_parser("train", help="train a Starter or Tracker agent")
    common(t)
    t.add_argument("--mode", required=True, choices=["starter", "tracker"])
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--episodes", type=int, help="override ddpg.episodes")
    t.add_argument("--starter", help="Starter checkpoint (required in Tracker mode)")
    t.add_argument("--scripted-starter", action="store_true",
                   help="use the hand-written spin-up surrogate instead of --starter")
    t.set_defaults(func=cmd_train)

    b = sub.add_parser("bench", help="compare controllers on the cadence scenarios")
    common(b)
    b.add_argument("--controllers", default="rl,pid,fuzzy")
    b.add_argument("--starter")
    b.add_argument("--tracker")
    b.add_argument("--seeds", type=_ints, help="comma list, overrides bench.seeds")
    b.add_argument("--workers", type=int)
    b.add_argument("--no-trajectories", action="store_true", help="skip per-run CSVs")
    b.set_defaults(func=cmd_bench)

    e = sub.add_parser("export-pattern", help="turn a Tracker policy into an ON/OFF pattern")
    e.add_argument("checkpoint")
    e.add_argument("--out", required=True)
    e.add_argument("--force", action="store_true")
    e.add_argument("--cadence", type=float, default=5.0)
    e.add_argument("--fatigue-level", type=float, default=1.0)
    e.add_argument("--threshold", type=float, default=0.1)
    e.add_argument("--resolution", type=float, default=2.0, help="grid step in degrees")
    e.set_defaults(func=cmd_export_pattern)

    x = sub.add_parser("transfer", help="seat-shift zero-shot and fine-tuning study")
    common(x)
    x.add_argument("--starter", required=True)
    x.add_argument("--tracker", required=True)
    x.add_argument("--seat-shift", type=float, default=0.15)
    x.add_argument("--budget", type=float, default=600.0, help="fine-tuning env-seconds")
    x.add_argument("--seed", type=int, default=0)
    x.add_argument("--seeds", type=_ints)
    x.add_argument("--workers", type=int)
    x.set_defaults(func=cmd_transfer)

    c = sub.add_parser("calibrate-baselines", help="grid-search PID gains on case 1")
    common(c)
    c.add_argument("--kp", type=_floats, default=[0.05, 0.1, 0.15, 0.2, 0.3])
    c.add_argument("--ki", type=_floats, default=[0.0, 0.02, 0.05, 0.1])
    c.add_argument("--kd", type=_floats, default=[0.0, 0.01, 0.02])
    c.add_argument("--seeds", type=_ints)
    c.set_defaults(func=cmd_calibrate)

    r = sub.add_parser("reference-config", help="print the commented reference config")
    r.set_defaults(func=cmd_reference_config)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    from .config import ConfigError

    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(format="%(levelname)s %(message)s")
    log.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    try:
        return args.func(args, argv)
    except (UsageError, ConfigError) as exc:
        print(f"fescycle: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime failures get a one-line diagnostic
        log.debug("traceback", exc_info=True)
        print(f"fescycle: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
