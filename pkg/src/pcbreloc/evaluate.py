"""Trajectory error, lost-state statistics and method comparison tables."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import Pose
from .errors import DegenerateInput, EmptyInput, NoOverlap, SeedMismatch
from .records import OUTCOME_TRUNCATED, RunRecord

ATE_MODES = ("none", "se3", "sim3")


def umeyama_align(est, gt, with_scale: bool = False, check: bool = True):
    """Least-squares (R, t, s) with ``gt ~= s * R @ est + t``.

    Reflections are removed, so ``det(R) == +1`` always.
    """
    x = np.asarray(est, dtype=float)
    y = np.asarray(gt, dtype=float)
    if x.shape != y.shape or x.ndim != 2 or x.shape[1] != 3:
        raise DegenerateInput(f"need two (n, 3) arrays of equal shape, got {x.shape} and {y.shape}")
    n = x.shape[0]
    if n < 3:
        raise DegenerateInput(f"need at least 3 points, got {n}")
    mx, my = x.mean(axis=0), y.mean(axis=0)
    xc, yc = x - mx, y - my
    if check:
        for pts in (xc, yc):
            sv = np.linalg.svd(pts, compute_uv=False)
            if sv[0] == 0 or sv[1] <= 1e-9 * sv[0]:
                raise DegenerateInput("points are collinear or coincident")
    cov = yc.T @ xc / n
    u, d, vt = np.linalg.svd(cov)
    sign = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sign[2, 2] = -1.0
    r = u @ sign @ vt
    scale = 1.0
    if with_scale:
        var_x = np.sum(xc ** 2) / n
        scale = float(np.trace(np.diag(d) @ sign) / var_x) if var_x > 0 else 1.0
    t = my - scale * r @ mx
    return r, t, scale


def _positions(traj) -> dict:
    out = {}
    for t, p in traj:
        if isinstance(p, Pose):
            out[t] = p.translation
        else:
            a = np.asarray(p, dtype=float)
            out[t] = a[:3, 3] if a.shape == (4, 4) else a.reshape(3)
    return out


@dataclass(frozen=True)
class AteResult:
    rmse: float
    matched: int
    unmatched_est: int
    unmatched_gt: int


def _rmse(x, y) -> float:
    return float(np.sqrt(np.mean(np.sum((y - x) ** 2, axis=1))))


def ate(est_traj, gt_traj, mode: str = "se3") -> AteResult:
    """Translational RMSE after aligning the estimate onto ground truth.

    Poses are associated by exact timestep; unmatched poses are counted and
    dropped.
    """
    if mode not in ATE_MODES:
        raise ValueError(f"mode must be one of {ATE_MODES}")
    e, g = _positions(est_traj), _positions(gt_traj)
    common = sorted(set(e) & set(g))
    if len(common) < 3:
        raise NoOverlap(f"only {len(common)} matched timesteps, need 3")
    x = np.array([e[t] for t in common])
    y = np.array([g[t] for t in common])
    rmse = _rmse(x, y)
    if mode != "none":
        r, t, s = umeyama_align(x, y, with_scale=mode == "sim3", check=False)
        # identity is in the alignment family, so the optimum never exceeds
        # the unaligned error; this also keeps SVD round-off off exact matches
        rmse = min(rmse, _rmse(s * x @ r.T + t, y))
    return AteResult(rmse, len(common), len(e) - len(common), len(g) - len(common))


def ate_rmse(est_traj, gt_traj, mode: str = "se3") -> float:
    return ate(est_traj, gt_traj, mode).rmse


@dataclass(frozen=True)
class MetricsSummary:
    method: str
    avg_kpr_time_ms: float
    avg_candidates: float
    avg_lost_timesteps: float
    avg_local_maps: float
    ate_rmse_m: Optional[float] = None
    p99_kpr_time_ms: float = 0.0
    n_runs: int = 0
    runs: tuple = field(default=(), compare=False)

    def row(self) -> dict:
        return {
            "method": self.method,
            "avg_kpr_time_ms": self.avg_kpr_time_ms,
            "avg_candidates": self.avg_candidates,
            "avg_lost_timesteps": self.avg_lost_timesteps,
            "avg_local_maps": self.avg_local_maps,
            "ate_rmse_m": self.ate_rmse_m,
            "p99_kpr_time_ms": self.p99_kpr_time_ms,
            "n_runs": self.n_runs,
        }


SUMMARY_COLUMNS = (
    "method", "avg_kpr_time_ms", "avg_candidates", "avg_lost_timesteps",
    "avg_local_maps", "ate_rmse_m", "p99_kpr_time_ms", "n_runs",
)


def _mean(xs) -> float:
    return float(np.mean(xs)) if len(xs) else 0.0


def summarize(records: Sequence[RunRecord], ate_mode: str = "se3") -> MetricsSummary:
    """Table-style averages over a set of runs of one method.

    Latency and candidate counts are pooled over attempts that ran the
    retriever; lost duration is pooled over finished episodes (truncated
    ones are excluded); local maps and ATE are per-run means.
    """
    if not records:
        raise EmptyInput("summarize needs at least one run record")
    # sort so float sums do not depend on input order
    records = sorted(records, key=lambda r: (r.scenario, r.seed, r.method))
    times, cands, durations, ates = [], [], [], []
    for rec in records:
        for a in rec.attempts():
            if not a.skipped:
                times.append(a.kpr_time_ms)
                cands.append(a.n_candidates)
        durations += [ep.duration for ep in rec.episodes if ep.outcome != OUTCOME_TRUNCATED]
        if rec.estimated and rec.ground_truth:
            try:
                ates.append(ate_rmse(rec.estimated, rec.ground_truth, ate_mode))
            except NoOverlap:
                pass
    methods = sorted({r.method for r in records})
    return MetricsSummary(
        method="+".join(methods),
        avg_kpr_time_ms=_mean(times),
        avg_candidates=_mean(cands),
        avg_lost_timesteps=_mean(durations),
        avg_local_maps=_mean([r.n_local_maps for r in records]),
        ate_rmse_m=_mean(ates) if ates else None,
        p99_kpr_time_ms=float(np.percentile(times, 99)) if times else 0.0,
        n_runs=len(records),
        runs=tuple(sorted((r.scenario, r.seed) for r in records)),
    )


def _ratio(a, b):
    if a is None or b is None:
        return None
    if a == b:
        return 1.0
    if b == 0:
        return math.inf
    return a / b


@dataclass(frozen=True)
class Comparison:
    pcb: MetricsSummary
    baseline: MetricsSummary
    ratios: dict

    def rows(self) -> list:
        out = []
        for col in SUMMARY_COLUMNS[1:]:
            out.append({
                "metric": col,
                "pcb": getattr(self.pcb, col),
                "baseline": getattr(self.baseline, col),
                "ratio": _ratio(getattr(self.pcb, col), getattr(self.baseline, col)),
            })
        return out


def compare(pcb_summary: MetricsSummary, baseline_summary: MetricsSummary) -> Comparison:
    """Side-by-side metrics with pcb/baseline ratios. Both summaries must cover the same runs."""
    if pcb_summary.runs != baseline_summary.runs:
        raise SeedMismatch("summaries were computed over different scenario/seed sets")
    ratios = {
        "lost_time_ratio": _ratio(pcb_summary.avg_lost_timesteps, baseline_summary.avg_lost_timesteps),
        "candidate_ratio": _ratio(pcb_summary.avg_candidates, baseline_summary.avg_candidates),
        "latency_ratio": _ratio(pcb_summary.avg_kpr_time_ms, baseline_summary.avg_kpr_time_ms),
        "local_maps_ratio": _ratio(pcb_summary.avg_local_maps, baseline_summary.avg_local_maps),
        "ate_ratio": _ratio(pcb_summary.ate_rmse_m, baseline_summary.ate_rmse_m),
    }
    return Comparison(pcb_summary, baseline_summary, ratios)


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def write_summary_csv(summaries: Iterable[MetricsSummary], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_COLUMNS)
        for s in summaries:
            row = s.row()
            w.writerow([_cell(row[c]) for c in SUMMARY_COLUMNS])


def write_comparison_csv(comp: Comparison, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "pcb", "baseline", "ratio"])
        for row in comp.rows():
            w.writerow([row["metric"], _cell(row["pcb"]), _cell(row["baseline"]), _cell(row["ratio"])])
        for name, value in comp.ratios.items():
            w.writerow([name, "", "", _cell(value)])


EPISODE_COLUMNS = (
    "method", "scenario", "seed", "loss_timestep", "duration", "outcome",
    "variants", "candidates", "stage_sizes", "kpr_time_ms",
)


def episode_rows(record: RunRecord) -> list:
    rows = []
    for ep in record.episodes:
        stages = []
        for a in ep.attempts:
            stages.append("/".join("" if v is None else str(v) for v in a.stage_sizes.values()) or "-")
        rows.append({
            "method": record.method,
            "scenario": record.scenario,
            "seed": record.seed,
            "loss_timestep": ep.loss_timestep,
            "duration": ep.duration,
            "outcome": ep.outcome,
            "variants": "|".join(v or "-" for v in ep.variant_sequence),
            "candidates": "|".join(str(a.n_candidates) for a in ep.attempts),
            "stage_sizes": "|".join(stages),
            # timing last so everything to its left is reproducible byte for byte
            "kpr_time_ms": "|".join(f"{a.kpr_time_ms:.6f}" for a in ep.attempts),
        })
    return rows


def write_episodes_csv(records: Iterable[RunRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=EPISODE_COLUMNS)
        w.writeheader()
        for rec in records:
            w.writerows(episode_rows(rec))
