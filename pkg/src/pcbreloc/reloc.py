"""Short-term relocalization state machine.

Tracking -> Lost(1) -> Lost(2) -> ... -> Lost(n_fail) -> Failed.
Every lost frame is one attempt. A successful recovery returns to tracking;
exhausting ``n_fail`` attempts closes the active local map and opens a new
one, after which tracking resumes on the next frame.
"""
from __future__ import annotations

import dataclasses
import enum
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, NamedTuple, Optional, Sequence

import numpy as np

from . import kpr
from .core import Atlas, Frame, Keyframe, Pose, atlas_new_map, compute_psd, make_pose
from .errors import InvalidState, InvariantViolation, MissingGroundTruth, ScheduleOutOfRange
from .kpr import CandidateList, KeyframeIndex, KprParams, Stage, Variant
from .records import (
    OUTCOME_NEW_MAP, OUTCOME_RECOVERED, OUTCOME_TRUNCATED, Attempt, Episode, RunRecord,
)

log = logging.getLogger(__name__)


class Mode(enum.Enum):
    TRACKING = "tracking"
    LOST = "lost"
    FAILED = "failed"


@dataclass(frozen=True)
class TrackingState:
    mode: Mode
    n_r: int = 0

    @classmethod
    def tracking(cls):
        return cls(Mode.TRACKING)

    @classmethod
    def lost(cls, n_r: int = 1):
        if n_r < 1:
            raise ValueError("attempt counter starts at 1")
        return cls(Mode.LOST, n_r)

    @classmethod
    def failed(cls):
        return cls(Mode.FAILED)


@dataclass(frozen=True)
class RecoveryOutcome:
    success: bool
    recovered_pose: Optional[Pose]
    used_candidates: CandidateList
    attempt: Optional[Attempt] = None

    def __post_init__(self):
        if self.success != (self.recovered_pose is not None):
            raise ValueError("recovered_pose must be present exactly when success is set")


class Retrieval(NamedTuple):
    variant: Optional[Variant]
    candidates: CandidateList
    stage_sizes: dict
    trace: Optional[kpr.StageTrace] = None


def pcb_retriever(psd, index: KeyframeIndex, params: KprParams) -> Retrieval:
    trace = kpr.run_stages(psd, index, params)
    return Retrieval(trace.variant, trace.final, trace.sizes(), trace)


@dataclass(frozen=True)
class BaselineRetriever:
    """Histogram-L1 retriever; ``top_k=1`` mirrors a bag-of-words relocalizer
    that hands a single best keyframe to the pose solver."""

    top_k: int = 1

    def __call__(self, psd, index, params) -> Retrieval:
        cands = kpr.baseline_l1(psd, index, self.top_k)
        return Retrieval(None, cands, {"ranked": len(cands)})


def empty_retriever(psd, index, params) -> Retrieval:
    return Retrieval(None, CandidateList((), Stage.RANKED), {})


def rotation_angle(ra: np.ndarray, rb: np.ndarray) -> float:
    c = (np.trace(ra.T @ rb) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def oracle_backend(candidates: CandidateList, db, query_gt: Pose, trans_tol: float,
                   rot_tol: float, recovered_noise: float = 0.0,
                   rng: np.random.Generator | None = None) -> RecoveryOutcome:
    """Ground-truth stand-in for a 3D-2D pose solver.

    Succeeds when any candidate's true pose is within ``trans_tol`` metres and
    ``rot_tol`` radians of the query's true pose. The recovered pose is the
    true pose with Gaussian translation jitter of std ``recovered_noise``.
    """
    index = kpr.as_index(db)
    by_id = {kf.id: kf for kf in index.keyframes}
    kfs = []
    for cid in candidates.keyframe_ids:
        kf = by_id[cid]
        if kf.gt_pose is None:
            raise MissingGroundTruth(f"keyframe {cid} has no ground-truth pose")
        kfs.append(kf)
    if query_gt is None:
        raise MissingGroundTruth("query frame has no ground-truth pose")
    q_t = query_gt.translation
    hit = any(
        np.linalg.norm(kf.gt_pose.translation - q_t) <= trans_tol
        and rotation_angle(kf.gt_pose.r, query_gt.r) <= rot_tol
        for kf in kfs
    )
    if not hit:
        return RecoveryOutcome(False, None, candidates)
    pose = query_gt
    if recovered_noise > 0:
        if rng is None:
            rng = np.random.default_rng()
        pose = make_pose(query_gt.r, q_t + rng.normal(0.0, recovered_noise, 3), 1.0)
    return RecoveryOutcome(True, pose, candidates)


@dataclass(frozen=True)
class OracleBackend:
    trans_tol: float = 0.5
    rot_tol: float = 0.35
    recovered_noise: float = 0.0
    seed: int = 0

    def __call__(self, candidates, index, query_gt, timestep) -> RecoveryOutcome:
        rng = np.random.default_rng([self.seed, timestep])
        return oracle_backend(
            candidates, index, query_gt, self.trans_tol, self.rot_tol, self.recovered_noise, rng
        )


Backend = Callable[[CandidateList, KeyframeIndex, Optional[Pose], int], RecoveryOutcome]
Retriever = Callable[..., Retrieval]


@dataclass(frozen=True)
class RelocParams:
    n_fail: int = 20
    kpr: KprParams = field(default_factory=KprParams)
    backend: Backend = field(default_factory=OracleBackend)
    retriever: Retriever = pcb_retriever
    check_invariants: bool = False

    def __post_init__(self):
        if self.n_fail < 1:
            raise ValueError(f"n_fail must be >= 1, got {self.n_fail}")


def check_stages(psd, index: KeyframeIndex, params: KprParams, trace: kpr.StageTrace) -> None:
    """Raise InvariantViolation unless stage outputs are nested and CB covers PCB."""
    db_ids = set(int(i) for i in index.ids)
    box, cls = set(trace.after_box), set(trace.after_class)
    upper = db_ids if trace.after_pose is None else set(trace.after_pose)
    if not (box <= cls <= upper <= db_ids):
        raise InvariantViolation(f"stage outputs not nested at timestep {psd.timestep}")
    full = kpr.run_stages(psd, index, params, Variant.FULL_PCB).final
    reduced = kpr.run_stages(psd, index, params, Variant.CLASS_BOX).final
    if not set(full) <= set(reduced):
        raise InvariantViolation(f"CB result does not contain PCB result at timestep {psd.timestep}")


def reloc_attempt(frame: Frame, atlas: Atlas, state: TrackingState, params: RelocParams,
                  gt_pose: Pose | None = None):
    """One relocalization attempt on ``frame``; returns (state, outcome, atlas)."""
    if state.mode is not Mode.LOST:
        raise InvalidState(f"relocalization attempted while {state.mode.value}")
    n_r = state.n_r
    psd = compute_psd(frame)
    # re-fetched on every attempt so the query always sees the current map
    index = atlas.active_map.index()
    if psd is None:
        log.debug("timestep %d: no detections, attempt %d skipped", frame.timestep, n_r)
        attempt = Attempt(frame.timestep, n_r, None, {}, 0, False, skipped=True)
        outcome = RecoveryOutcome(False, None, CandidateList((), Stage.AFTER_BOX), attempt)
    else:
        t0 = time.perf_counter_ns()
        retrieval = params.retriever(psd, index, params.kpr)
        kpr_ms = (time.perf_counter_ns() - t0) / 1e6
        if params.check_invariants and retrieval.trace is not None:
            check_stages(psd, index, params.kpr, retrieval.trace)
        result = params.backend(retrieval.candidates, index, gt_pose, frame.timestep)
        attempt = Attempt(
            frame.timestep, n_r,
            None if retrieval.variant is None else retrieval.variant.value,
            dict(retrieval.stage_sizes), len(retrieval.candidates), result.success,
            kpr_time_ms=kpr_ms,
        )
        outcome = dataclasses.replace(result, attempt=attempt)
    if outcome.success:
        return TrackingState.tracking(), outcome, atlas
    if n_r < params.n_fail:
        return TrackingState.lost(n_r + 1), outcome, atlas
    log.info("timestep %d: %d attempts failed, opening a new local map", frame.timestep, n_r)
    atlas_new_map(atlas)
    return TrackingState.failed(), outcome, atlas


def _check_schedule(frames: Sequence[Frame], loss_schedule: Sequence[int]) -> None:
    steps = {f.timestep for f in frames}
    prev = None
    for t in loss_schedule:
        if t not in steps:
            raise ScheduleOutOfRange(f"loss timestep {t} is not a frame of the sequence")
        if prev is not None and t <= prev:
            raise ScheduleOutOfRange("loss schedule must be strictly increasing")
        prev = t


def _matrix(p: Pose) -> list:
    return p.matrix.tolist()


def run_sequence(frames: Sequence[Frame], loss_schedule: Sequence[int], atlas: Atlas,
                 params: RelocParams, gt_poses: Mapping[int, Pose] | None = None,
                 method: str = "pcb", seed: int = 0, scenario: str = "") -> RunRecord:
    """Drive the state machine over a frame sequence with induced tracking losses.

    While tracking, every frame with at least one detection becomes a keyframe
    of the active map. At a scheduled loss the tracker goes lost: the first
    lost frame keeps its own pose estimate, later ones carry the identity.
    """
    _check_schedule(frames, loss_schedule)
    losses = set(loss_schedule)
    gt_poses = gt_poses or {}
    record = RunRecord(method=method, seed=seed, n_fail=params.n_fail, scenario=scenario)
    state = TrackingState.tracking()
    episode = None
    identity = Pose.identity()

    for frame in frames:
        t = frame.timestep
        gt = gt_poses.get(t)
        if gt is not None:
            record.ground_truth.append((t, _matrix(gt)))

        if state.mode is Mode.TRACKING and t not in losses:
            psd = compute_psd(frame)
            if psd is not None:
                atlas.active_map.add_keyframe(Keyframe(t, psd, gt_pose=gt))
            record.estimated.append((t, _matrix(frame.pose_estimate)))
            continue

        if state.mode is Mode.TRACKING:
            state = TrackingState.lost(1)
            episode = Episode(t)
            record.episodes.append(episode)
            query_frame = frame
        else:
            if t in losses:
                log.warning("timestep %d: scheduled loss while already lost, ignored", t)
                record.skipped_losses.append(t)
            query_frame = dataclasses.replace(frame, pose_estimate=identity)

        state, outcome, atlas = reloc_attempt(query_frame, atlas, state, params, gt)
        episode.attempts.append(outcome.attempt)
        if params.check_invariants:
            _check_routing(episode, frame, params.kpr)
        if outcome.success:
            episode.outcome = OUTCOME_RECOVERED
            record.estimated.append((t, _matrix(outcome.recovered_pose)))
            episode = None
        elif state.mode is Mode.FAILED:
            episode.outcome = OUTCOME_NEW_MAP
            episode = None
            state = TrackingState.tracking()

    if episode is not None:
        episode.outcome = OUTCOME_TRUNCATED
    record.n_local_maps = len(atlas.maps)
    return record


def _check_routing(episode: Episode, frame: Frame, params: KprParams) -> None:
    a = episode.attempts[-1]
    if a.variant is None:
        return
    if a.n_r == 1:
        expected = kpr.select_variant(frame.pose_estimate, params).value
    else:
        expected = Variant.CLASS_BOX.value
    if a.variant != expected:
        raise InvariantViolation(
            f"timestep {a.timestep}: attempt {a.n_r} routed {a.variant}, expected {expected}"
        )
