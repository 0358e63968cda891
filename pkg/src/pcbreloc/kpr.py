"""Pose-Class-Box keyframe place recognition.

The filter runs up to three stages over the keyframes of the active map:

1. pose: keep keyframes whose pose lies within a Frobenius-distance shell
   ``epsilon <= ||T_query - T_kf||_F <= delta_t_th`` around the query;
2. class: score label lists by ``| ||labels_q||_2 - ||labels_kf||_2 |`` and
   keep the scores within ``[m, m + class_band * m]`` where ``m`` is the
   smallest score;
3. box: pair query boxes with candidate boxes of the same label and keep
   candidates where every query box found a partner with IoU above
   ``delta_iou``.

An identity query pose (the pose a monocular tracker assigns after it has
lost track) carries no location, so the pose stage is skipped and only the
class and box stages run.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .core import Keyframe, Pose, PoseSemanticDescriptor, check_box
from .errors import EmptyLabelList, InvalidConfig

PAIRINGS = ("greedy", "all_pairs")


@dataclass(frozen=True)
class KprParams:
    delta_t_th: float = 0.5
    epsilon: float = 1e-4
    delta_iou: float = 0.9
    class_band: float = 0.1
    identity_tol: float = 1e-9
    pairing: str = "greedy"

    def __post_init__(self):
        if not self.epsilon > 0:
            raise InvalidConfig(f"epsilon must be > 0, got {self.epsilon}")
        if not self.epsilon < self.delta_t_th:
            raise InvalidConfig(
                f"epsilon ({self.epsilon}) must be below delta_t_th ({self.delta_t_th})"
            )
        if not 0 < self.delta_iou <= 1:
            raise InvalidConfig(f"delta_iou must lie in (0, 1], got {self.delta_iou}")
        if not self.class_band >= 0:
            raise InvalidConfig(f"class_band must be >= 0, got {self.class_band}")
        if not self.identity_tol > 0:
            raise InvalidConfig(f"identity_tol must be > 0, got {self.identity_tol}")
        if self.pairing not in PAIRINGS:
            raise InvalidConfig(f"pairing must be one of {PAIRINGS}, got {self.pairing!r}")


class Stage(enum.Enum):
    AFTER_POSE = "after_pose"
    AFTER_CLASS = "after_class"
    AFTER_BOX = "after_box"
    RANKED = "ranked"


class Variant(enum.Enum):
    FULL_PCB = "pcb"
    CLASS_BOX = "cb"


@dataclass(frozen=True)
class CandidateList:
    keyframe_ids: tuple
    stage: Stage

    def __len__(self):
        return len(self.keyframe_ids)

    def __iter__(self):
        return iter(self.keyframe_ids)


class KeyframeIndex:
    """Column-wise arrays over a keyframe list, in list order.

    Built once per database snapshot so that a query costs a handful of
    vectorized passes instead of a Python loop over every keyframe.
    """

    def __init__(self, keyframes: Sequence[Keyframe]):
        self.keyframes = list(keyframes)
        n = len(self.keyframes)
        self.ids = np.array([kf.id for kf in self.keyframes], dtype=np.int64)
        if n:
            self.poses = np.stack([kf.pose.matrix.reshape(16) for kf in self.keyframes])
        else:
            self.poses = np.zeros((0, 16))
        # exact integer sums so the square root matches any other exact path
        sq = [sum(int(c) * int(c) for c in kf.psd.class_labels) for kf in self.keyframes]
        self.label_norms = np.sqrt(np.array(sq, dtype=np.float64))
        # all boxes back to back; keyframe i owns rows offsets[i]:offsets[i + 1]
        sizes = np.array([kf.psd.k for kf in self.keyframes], dtype=np.int64)
        self.offsets = np.concatenate(([0], np.cumsum(sizes))).astype(np.int64)
        if n:
            self.flat_boxes = np.concatenate([kf.psd.boxes for kf in self.keyframes]).astype(float)
            self.flat_labels = np.concatenate([kf.psd.class_labels for kf in self.keyframes]).astype(np.int64)
        else:
            self.flat_boxes = np.zeros((0, 4))
            self.flat_labels = np.zeros(0, dtype=np.int64)
        self._hist = None

    def __len__(self):
        return len(self.keyframes)

    def subset(self, positions) -> list:
        return [self.keyframes[i] for i in positions]

    def histograms(self):
        """Normalized label histograms as a dense (n, n_labels) matrix."""
        if self._hist is None:
            labels = sorted({c for kf in self.keyframes for c in kf.psd.class_labels})
            col = {c: i for i, c in enumerate(labels)}
            h = np.zeros((len(self.keyframes), len(labels)))
            for row, kf in enumerate(self.keyframes):
                for c in kf.psd.class_labels:
                    h[row, col[c]] += 1.0
                h[row] /= kf.psd.k
            self._hist = (col, h)
        return self._hist


DB = Union[Sequence[Keyframe], KeyframeIndex]


def as_index(db: DB) -> KeyframeIndex:
    return db if isinstance(db, KeyframeIndex) else KeyframeIndex(db)


def frobenius_delta(a: Pose, b: Pose) -> float:
    return float(np.linalg.norm(a.matrix - b.matrix))


def class_score(labels_a, labels_b) -> float:
    if len(labels_a) == 0 or len(labels_b) == 0:
        raise EmptyLabelList("class score needs two non-empty label lists")
    na = np.sqrt(float(sum(int(c) * int(c) for c in labels_a)))
    nb = np.sqrt(float(sum(int(c) * int(c) for c in labels_b)))
    return float(abs(na - nb))


def iou(box_a, box_b) -> float:
    ax1, ay1, ax2, ay2 = check_box(box_a)
    bx1, by1, bx2, by2 = check_box(box_b)
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return min(1.0, inter / union)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between the rows of two (n, 4) box arrays."""
    a = a[:, None, :]
    b = b[None, :, :]
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    return np.minimum(1.0, inter / (area_a + area_b - inter))


def count_overlaps(q_labels, q_boxes, c_labels, c_boxes, delta_iou, pairing="greedy") -> int:
    """Number of query objects re-observed in a candidate (the v_j counter).

    ``greedy`` pairs boxes of equal label in order of decreasing IoU, each
    box used at most once. ``all_pairs`` counts every box pair above the
    threshold regardless of label, so a count can exceed the query size.
    """
    m = iou_matrix(np.asarray(q_boxes, dtype=float), np.asarray(c_boxes, dtype=float))
    if pairing == "all_pairs":
        return int(np.count_nonzero(m > delta_iou))
    same = np.asarray(q_labels)[:, None] == np.asarray(c_labels)[None, :]
    qi, ci = np.nonzero(same & (m > delta_iou))
    if qi.size == 0:
        return 0
    # pairs below the threshold sort after every pair above it, so they can
    # never change which above-threshold pairs the greedy pass consumes
    order = np.lexsort((ci, qi, -m[qi, ci]))
    used_q, used_c = set(), set()
    for k in order:
        a, b = int(qi[k]), int(ci[k])
        if a in used_q or b in used_c:
            continue
        used_q.add(a)
        used_c.add(b)
    return len(used_q)


def _pose_positions(index: KeyframeIndex, pose: Pose, params: KprParams) -> np.ndarray:
    if len(index) == 0:
        return np.zeros(0, dtype=np.int64)
    d = np.sqrt(np.sum((index.poses - pose.matrix.reshape(16)) ** 2, axis=1))
    return np.flatnonzero((d >= params.epsilon) & (d <= params.delta_t_th))


def _class_positions(index, positions, labels, params) -> np.ndarray:
    if len(positions) == 0:
        return positions
    q = np.sqrt(float(sum(int(c) * int(c) for c in labels)))
    scores = np.abs(q - index.label_norms[positions])
    lo = scores.min()
    hi = lo + params.class_band * lo
    return positions[(scores >= lo) & (scores <= hi)]


def _box_positions(index, positions, psd, params) -> np.ndarray:
    positions = np.asarray(positions, dtype=np.int64)
    if len(positions) == 0:
        return positions
    starts, ends = index.offsets[positions], index.offsets[positions + 1]
    lengths = ends - starts
    seg = np.concatenate(([0], np.cumsum(lengths)[:-1]))
    rows = np.repeat(starts - seg, lengths) + np.arange(lengths.sum())
    q_boxes = np.asarray(psd.boxes, dtype=float)
    above = iou_matrix(q_boxes, index.flat_boxes[rows]) > params.delta_iou
    b_n = psd.k
    if params.pairing == "all_pairs":
        counts = np.add.reduceat(above.sum(axis=0), seg)
        return positions[counts >= b_n]
    # greedy can only reach b_n if every query box has a same-label partner
    hit = above & (np.asarray(psd.class_labels)[:, None] == index.flat_labels[rows][None, :])
    possible = np.logical_or.reduceat(hit, seg, axis=1).all(axis=0)
    keep = []
    for i in positions[possible]:
        kf = index.keyframes[i]
        v = count_overlaps(
            psd.class_labels, psd.boxes, kf.psd.class_labels, kf.psd.boxes,
            params.delta_iou, params.pairing,
        )
        if v >= b_n:
            keep.append(i)
    return np.array(keep, dtype=np.int64)


def _result(index, positions, stage) -> CandidateList:
    return CandidateList(tuple(int(x) for x in index.ids[positions]), stage)


def pose_constraint(query: PoseSemanticDescriptor, db: DB, params: KprParams) -> CandidateList:
    index = as_index(db)
    return _result(index, _pose_positions(index, query.pose, params), Stage.AFTER_POSE)


def class_constraint(query: PoseSemanticDescriptor, candidates: DB, params: KprParams) -> CandidateList:
    index = as_index(candidates)
    pos = _class_positions(index, np.arange(len(index)), query.class_labels, params)
    return _result(index, pos, Stage.AFTER_CLASS)


def box_constraint(query: PoseSemanticDescriptor, candidates: DB, params: KprParams) -> CandidateList:
    index = as_index(candidates)
    pos = _box_positions(index, np.arange(len(index)), query, params)
    return _result(index, pos, Stage.AFTER_BOX)


def select_variant(query_pose: Pose, params: KprParams) -> Variant:
    if np.linalg.norm(query_pose.matrix - np.eye(4)) > params.identity_tol:
        return Variant.FULL_PCB
    return Variant.CLASS_BOX


@dataclass(frozen=True)
class StageTrace:
    """Candidates surviving each stage of one filter run.

    ``after_pose`` is None when the pose stage was skipped.
    """

    variant: Variant
    after_pose: CandidateList | None
    after_class: CandidateList
    after_box: CandidateList

    @property
    def final(self) -> CandidateList:
        return self.after_box

    def sizes(self) -> dict:
        return {
            "pose": None if self.after_pose is None else len(self.after_pose),
            "class": len(self.after_class),
            "box": len(self.after_box),
        }


def run_stages(query: PoseSemanticDescriptor, db: DB, params: KprParams,
               variant: Variant | None = None) -> StageTrace:
    index = as_index(db)
    if variant is None:
        variant = select_variant(query.pose, params)
    if variant is Variant.FULL_PCB:
        p = _pose_positions(index, query.pose, params)
        after_pose = _result(index, p, Stage.AFTER_POSE)
    else:
        p = np.arange(len(index))
        after_pose = None
    c = _class_positions(index, p, query.class_labels, params)
    b = _box_positions(index, c, query, params)
    return StageTrace(
        variant, after_pose,
        _result(index, c, Stage.AFTER_CLASS), _result(index, b, Stage.AFTER_BOX),
    )


def pcb(query: PoseSemanticDescriptor, db: DB, params: KprParams) -> CandidateList:
    return run_stages(query, db, params, Variant.FULL_PCB).final


def cb(query: PoseSemanticDescriptor, db: DB, params: KprParams) -> CandidateList:
    return run_stages(query, db, params, Variant.CLASS_BOX).final


def query(query: PoseSemanticDescriptor, db: DB, params: KprParams):
    """Route to the full or reduced filter by the query pose; returns (variant, candidates)."""
    trace = run_stages(query, db, params)
    return trace.variant, trace.final


def baseline_l1(query: PoseSemanticDescriptor, db: DB, top_k: int = 1) -> CandidateList:
    """Top-k keyframes by normalized-L1 similarity of class-label histograms.

    score = 1 - L1(h_query, h_kf) / 2, in [0, 1]. Ties go to the lower id.
    """
    if top_k < 1:
        raise ValueError(f"top_k must be >= 1, got {top_k}")
    index = as_index(db)
    if len(index) == 0:
        return CandidateList((), Stage.RANKED)
    scores = baseline_scores(query, index)
    order = np.lexsort((index.ids, -scores))[:top_k]
    return CandidateList(tuple(int(x) for x in index.ids[order]), Stage.RANKED)


def baseline_scores(query: PoseSemanticDescriptor, db: DB) -> np.ndarray:
    """Per-keyframe histogram similarity, in index order."""
    index = as_index(db)
    if len(index) == 0:
        return np.zeros(0)
    col, h = index.histograms()
    q = np.zeros(h.shape[1])
    outside = 0.0
    for c in query.class_labels:
        if c in col:
            q[col[c]] += 1.0
        else:
            outside += 1.0
    return 1.0 - 0.5 * (np.abs(h - q / query.k).sum(axis=1) + outside / query.k)
