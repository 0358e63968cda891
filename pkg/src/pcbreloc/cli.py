"""Command-line entry point: simulate, run, eval, bench.

Exit codes: 0 ok, 2 configuration error, 3 I/O or unreadable input,
4 inputs that are readable but inconsistent.
"""
from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import evaluate, io, kpr, reloc, sim
from .core import Atlas, Frame, Keyframe, compute_psd, make_pose
from .errors import (
    EmptyInput, InvalidConfig, InvariantViolation, MissingGroundTruth, NoOverlap, ParseError, ScheduleOutOfRange,
    SeedMismatch,
)

log = logging.getLogger("pcbreloc")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_SEMANTIC = 0, 2, 3, 4

SCENARIO_FILE = "scenario.json"
DETECTIONS_FILE = "detections.jsonl"
GROUNDTRUTH_FILE = "groundtruth.txt"
ODOMETRY_FILE = "odometry.txt"
RECORD_FILE = "run_record.json"
ESTIMATE_FILE = "estimated_trajectory.txt"

# epsilon, class band and identity tolerance mirror the filter defaults
RUN_DEFAULTS = {
    "dt_th": 0.5,
    "n_fail": 20,
    "d_iou": 0.9,
    "class_band": 0.1,
    "epsilon": 1e-4,
    "identity_tol": 1e-9,
    "pairing": "greedy",
    "top_k": 1,
    "trans_tol": 0.5,
    "rot_tol": 0.35,
    "recovered_noise": 0.0,
}
_PARAM_TYPES = {"n_fail": int, "top_k": int, "pairing": str}


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def parse_seeds(text: str) -> list:
    """'0..9' (inclusive), '1,4,7' or '3'."""
    try:
        if ".." in text:
            a, b = text.split("..", 1)
            lo, hi = int(a), int(b)
            if hi < lo:
                raise ValueError
            return list(range(lo, hi + 1))
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed range {text!r}; use A..B, A,B,C or N") from None


def read_params_file(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(EXIT_CONFIG, f"cannot read params file {path}: {exc.strerror}") from None
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(EXIT_CONFIG, f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in RUN_DEFAULTS:
            raise CliError(EXIT_CONFIG, f"{path}:{lineno}: unknown parameter {key!r}")
        try:
            out[key] = _PARAM_TYPES.get(key, float)(value)
        except ValueError:
            raise CliError(EXIT_CONFIG, f"{path}:{lineno}: bad value for {key}: {value!r}") from None
    return out


def resolve_params(args) -> dict:
    """Flags override the params file, which overrides the defaults."""
    params = dict(RUN_DEFAULTS)
    if args.params:
        params.update(read_params_file(args.params))
    for key in RUN_DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            params[key] = value
    if params["n_fail"] < 1 or params["top_k"] < 1:
        raise CliError(EXIT_CONFIG, "n_fail and top_k must be >= 1")
    return params


# -- simulate ---------------------------------------------------------------

def cmd_simulate(args) -> int:
    path = Path(args.config)
    if not path.is_file():
        raise CliError(EXIT_CONFIG, f"scenario config not found: {path}")
    cfg = io.read_scenario_config(path)
    scenario = sim.generate_scenario(cfg, args.seed)
    frames = sim.render_frames(scenario)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_scenario(scenario, out / SCENARIO_FILE)
    io.write_detections([(f.timestep, f.image_id, f.semantics) for f in frames], out / DETECTIONS_FILE)
    io.write_trajectory(scenario.trajectory, out / GROUNDTRUTH_FILE)
    if cfg.odometry_drift_sigma > 0:
        io.write_trajectory([(f.timestep, f.pose_estimate) for f in frames], out / ODOMETRY_FILE)
    log.info("wrote %d frames, losses at %s to %s", len(frames), list(scenario.loss_schedule), out)
    return EXIT_OK


# -- run --------------------------------------------------------------------

def load_scenario_dir(path):
    """Frames, ground-truth poses and (optional) scenario snapshot from a directory."""
    d = Path(path)
    if not d.is_dir():
        raise CliError(EXIT_IO, f"scenario directory not found: {d}")
    dets = io.read_detections(d / DETECTIONS_FILE)
    gt = dict(io.read_trajectory(d / GROUNDTRUTH_FILE))
    est = dict(io.read_trajectory(d / ODOMETRY_FILE)) if (d / ODOMETRY_FILE).exists() else gt
    scenario = io.read_scenario(d / SCENARIO_FILE) if (d / SCENARIO_FILE).exists() else None
    frames = []
    for t, image_id, sm in dets:
        if t not in est:
            raise CliError(EXIT_SEMANTIC, f"detections at timestep {t} have no trajectory pose")
        frames.append(Frame(t, image_id, sm, est[t]))
    return frames, gt, scenario


def build_reloc_params(params: dict, method: str, seed: int, check: bool = False) -> reloc.RelocParams:
    kp = kpr.KprParams(
        delta_t_th=params["dt_th"], epsilon=params["epsilon"], delta_iou=params["d_iou"],
        class_band=params["class_band"], identity_tol=params["identity_tol"], pairing=params["pairing"],
    )
    retriever = reloc.pcb_retriever if method == "pcb" else reloc.BaselineRetriever(params["top_k"])
    backend = reloc.OracleBackend(params["trans_tol"], params["rot_tol"], params["recovered_noise"], seed)
    return reloc.RelocParams(params["n_fail"], kp, backend, retriever, check)


def seeded_schedule(scenario, seed: int) -> tuple:
    cfg = scenario.config
    rng = np.random.default_rng([scenario.seed, seed])
    return sim.draw_loss_schedule(cfg.n_frames, cfg.n_losses, rng, cfg.warmup_fraction, cfg.min_loss_spacing)


def cmd_run(args) -> int:
    params = resolve_params(args)
    frames, gt, scenario = load_scenario_dir(args.scenario)
    label = Path(args.scenario).resolve().name
    if args.seeds is None:
        seeds = [scenario.seed if scenario else 0]
        schedules = {seeds[0]: tuple(scenario.loss_schedule) if scenario else ()}
    else:
        if scenario is None:
            raise CliError(EXIT_SEMANTIC, f"--seeds needs {SCENARIO_FILE} in the scenario directory")
        seeds = args.seeds
        schedules = {s: seeded_schedule(scenario, s) for s in seeds}
    out = Path(args.out)
    records = []
    for seed in seeds:
        rp = build_reloc_params(params, args.method, seed, args.check)
        record = reloc.run_sequence(
            frames, schedules[seed], Atlas(), rp, gt, method=args.method, seed=seed, scenario=label,
        )
        d = out / f"seed_{seed}"
        d.mkdir(parents=True, exist_ok=True)
        io.write_run_record(record, d / RECORD_FILE)
        io.write_trajectory([(t, make_pose(np.asarray(m)[:3, :3], np.asarray(m)[:3, 3])) for t, m in record.estimated], d / ESTIMATE_FILE)
        evaluate.write_episodes_csv([record], d / "episodes.csv")
        records.append(record)
        log.info("seed %d: %d episodes, %d local maps", seed, len(record.episodes), record.n_local_maps)
    evaluate.write_episodes_csv(records, out / "episodes.csv")
    return EXIT_OK


# -- eval -------------------------------------------------------------------

def cmd_eval(args) -> int:
    records = []
    for d in args.run_dirs:
        p = Path(d)
        if not p.exists():
            raise CliError(EXIT_IO, f"run directory not found: {p}")
        files = [p] if p.is_file() else sorted(p.rglob(RECORD_FILE))
        records += [io.read_run_record(f) for f in files]
    if not records:
        raise CliError(EXIT_SEMANTIC, "no run records found in " + ", ".join(args.run_dirs))
    by_method = {}
    for r in records:
        by_method.setdefault(r.method, []).append(r)
    summaries = {m: evaluate.summarize(rs, args.ate_mode) for m, rs in sorted(by_method.items())}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    evaluate.write_summary_csv(summaries.values(), out / "summary.csv")
    evaluate.write_episodes_csv(records, out / "episodes.csv")
    if "pcb" in summaries and "baseline" in summaries:
        comp = evaluate.compare(summaries["pcb"], summaries["baseline"])
        evaluate.write_comparison_csv(comp, out / "comparison.csv")
    for s in summaries.values():
        # ATE here covers only the relocalization harness, not full SLAM tracking
        ate = "n/a" if s.ate_rmse_m is None else f"{s.ate_rmse_m:.4f}m"
        print(
            f"{s.method}: runs={s.n_runs} lost={s.avg_lost_timesteps:.3f} maps={s.avg_local_maps:.3f} "
            f"candidates={s.avg_candidates:.3f} kpr={s.avg_kpr_time_ms:.4f}ms harness_ate={ate}"
        )
    return EXIT_OK


# -- bench ------------------------------------------------------------------

def synthetic_db(db_size: int, seed: int = 0):
    """``db_size`` keyframes from a long random walk, plus the frames they came from."""
    n_frames = max(3, math.ceil(db_size * 1.5) + 10)
    cfg = sim.ScenarioConfig(
        trajectory="random_walk", n_frames=n_frames, n_losses=0,
        room_min=(-10.0, -10.0, 0.0), room_max=(10.0, 10.0, 3.0), n_objects=60,
    )
    scenario = sim.generate_scenario(cfg, seed)
    keyframes, frames = [], []
    for f in sim.render_frames(scenario):
        psd = compute_psd(f)
        if psd is None:
            continue
        keyframes.append(Keyframe(f.timestep, psd, gt_pose=f.pose_estimate))
        frames.append(f)
        if len(keyframes) == db_size:
            break
    if len(keyframes) < db_size:
        raise CliError(EXIT_SEMANTIC, f"could only build {len(keyframes)} keyframes")
    return keyframes, frames


def bench(db_size: int, queries: int, seed: int = 0, params: kpr.KprParams | None = None) -> list:
    params = params or kpr.KprParams()
    keyframes, frames = synthetic_db(db_size, seed)
    index = kpr.KeyframeIndex(keyframes)
    rng = np.random.default_rng(seed)
    picks = rng.integers(0, len(frames), queries)
    qs = []
    for i in picks:
        f = frames[i]
        # nudge the pose so the query is not an exact duplicate of its keyframe
        t = f.pose_estimate.translation + rng.normal(0.0, 0.05, 3)
        qs.append(compute_psd(Frame(f.timestep, f.image_id, f.semantics, make_pose(f.pose_estimate.r, t))))
    runs = {
        "pcb": lambda q: kpr.pcb(q, index, params),
        "cb": lambda q: kpr.cb(q, index, params),
        "baseline_l1": lambda q: kpr.baseline_l1(q, index, 1),
    }
    rows = []
    for name, fn in runs.items():
        fn(qs[0])  # warm caches (histograms) outside the timed loop
        times, cands = [], []
        for q in qs:
            t0 = time.perf_counter_ns()
            res = fn(q)
            times.append((time.perf_counter_ns() - t0) / 1e6)
            cands.append(len(res))
        rows.append({
            "method": name, "db_size": db_size, "queries": queries,
            "avg_candidates": float(np.mean(cands)),
            "mean_ms": float(np.mean(times)), "p99_ms": float(np.percentile(times, 99)),
        })
    return rows


def cmd_bench(args) -> int:
    if args.db_size < 1 or args.queries < 1:
        raise CliError(EXIT_CONFIG, "--db-size and --queries must be >= 1")
    rows = bench(args.db_size, args.queries, args.seed)
    out = Path(args.out)
    if out.parent and not out.parent.exists():
        out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        print(f"{r['method']}: mean {r['mean_ms']:.4f} ms  p99 {r['p99_ms']:.4f} ms  candidates {r['avg_candidates']:.2f}")
    return EXIT_OK


# -- wiring -----------------------------------------------------------------

class _Fmt(argparse.HelpFormatter):
    """Append the default to a flag's help unless the help already states it."""

    def _get_help_string(self, action):
        text = action.help or ""
        if "default" in text or action.default in (None, argparse.SUPPRESS) or not action.option_strings:
            return text
        return f"{text} (default: %(default)s)".lstrip()


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pcbreloc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", formatter_class=_Fmt, help="generate a synthetic scenario")
    s.add_argument("--config", required=True, help="flat key = value scenario config")
    s.add_argument("--seed", type=int, default=None, help="overrides the config's seed (default: the config's seed, else 0)")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("run", formatter_class=_Fmt, help="replay a scenario through the relocalization state machine")
    r.add_argument("--scenario", required=True, help="directory written by 'simulate'")
    r.add_argument("--method", choices=("pcb", "baseline"), default="pcb", help="candidate retriever")
    r.add_argument("--params", help="key = value file of run parameters (flags take precedence)")
    r.add_argument("--dt-th", dest="dt_th", type=float, help="pose radius delta_T_th (default 0.5)")
    r.add_argument("--n-fail", dest="n_fail", type=int, help="attempt budget per lost episode (default 20)")
    r.add_argument("--d-iou", dest="d_iou", type=float, help="IoU threshold as a fraction (default 0.9)")
    r.add_argument("--class-band", dest="class_band", type=float, help="relative class-score band (default 0.1)")
    r.add_argument("--epsilon", type=float, help="lower pose-distance bound (default 1e-4)")
    r.add_argument("--identity-tol", dest="identity_tol", type=float, help="identity-pose test tolerance (default 1e-9)")
    r.add_argument("--pairing", choices=kpr.PAIRINGS, help="box pairing rule (default greedy)")
    r.add_argument("--top-k", dest="top_k", type=int, help="baseline candidates per query (default 1)")
    r.add_argument("--trans-tol", dest="trans_tol", type=float, help="oracle translation tolerance, m (default 0.5)")
    r.add_argument("--rot-tol", dest="rot_tol", type=float, help="oracle rotation tolerance, rad (default 0.35)")
    r.add_argument("--recovered-noise", dest="recovered_noise", type=float, help="recovered pose jitter, m (default 0)")
    r.add_argument("--seeds", type=parse_seeds, help="re-draw the loss schedule per seed, e.g. 0..9 (default: the scenario's own schedule and seed)")
    r.add_argument("--check", action="store_true", help="assert filter and routing invariants on every attempt")
    r.add_argument("--out", required=True, help="output directory")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", formatter_class=_Fmt, help="summarize run directories")
    e.add_argument("run_dirs", nargs="+", metavar="DIR")
    e.add_argument("--ate-mode", choices=evaluate.ATE_MODES, default="se3", help="trajectory alignment before ATE")
    e.add_argument("--out", required=True, help="output directory for summary.csv and comparison.csv")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", formatter_class=_Fmt, help="time filter queries over a synthetic keyframe database")
    b.add_argument("--db-size", dest="db_size", type=int, default=5000, help="keyframes in the synthetic database")
    b.add_argument("--queries", type=int, default=1000, help="number of timed queries")
    b.add_argument("--seed", type=int, default=0, help="database and query seed")
    b.add_argument("--out", required=True, help="CSV file for the latency report")
    b.set_defaults(func=cmd_bench)
    return p


def _setup_logging():
    level = os.environ.get("KPR_LOG", "warn").lower()
    levels = {"error": logging.ERROR, "warn": logging.WARNING, "warning": logging.WARNING,
              "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        msg, code = str(exc), exc.code
    except InvalidConfig as exc:
        msg, code = str(exc), EXIT_CONFIG
    except (ScheduleOutOfRange, SeedMismatch, EmptyInput, NoOverlap, MissingGroundTruth,
            InvariantViolation) as exc:
        msg, code = str(exc), EXIT_SEMANTIC
    except (ParseError, OSError) as exc:
        msg, code = str(exc), EXIT_IO
    print(f"pcbreloc {args.command}: error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
