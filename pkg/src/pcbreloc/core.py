"""Domain types: poses, detections, frames, keyframes and the multi-map atlas.

Everything except :class:`LocalMap` and :class:`Atlas` is immutable once
constructed. Arrays held by immutable types are flagged read-only.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import MalformedBox, NegativeLabel, NonPositiveScale, NonRotation

ROTATION_TOL = 1e-9


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Pose:
    """Camera-to-world transform with a separate scale factor.

    The materialized 4x4 matrix is ``[[R, s*t], [0, 1]]``. All distance
    computations go through :attr:`matrix`.
    """

    r: np.ndarray
    t: np.ndarray
    s: float = 1.0

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.r
        m[:3, 3] = self.s * self.t
        return m

    @property
    def translation(self) -> np.ndarray:
        """Scaled translation column, the only recoverable product of s and t."""
        return self.s * self.t

    @classmethod
    def identity(cls) -> "Pose":
        return make_pose(np.eye(3), np.zeros(3), 1.0)

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=float)
        if m.shape != (4, 4):
            raise ValueError(f"expected a 4x4 matrix, got shape {m.shape}")
        return make_pose(m[:3, :3], m[:3, 3], 1.0)

    def is_identity(self, tol: float = 0.0) -> bool:
        return float(np.linalg.norm(self.matrix - np.eye(4))) <= tol

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return (
            np.array_equal(self.r, other.r)
            and np.array_equal(self.t, other.t)
            and self.s == other.s
        )

    def __hash__(self):
        return hash((self.r.tobytes(), self.t.tobytes(), self.s))

    def __repr__(self):
        return f"Pose(t={self.translation.tolist()}, s={self.s})"


def make_pose(r, t, s: float = 1.0) -> Pose:
    r = np.asarray(r, dtype=float)
    t = np.asarray(t, dtype=float).reshape(-1)
    if r.shape != (3, 3) or t.shape != (3,):
        raise NonRotation(f"bad shapes r={r.shape} t={t.shape}")
    if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
        raise NonRotation("rotation or translation is not finite")
    if not (math.isfinite(s) and s > 0):
        raise NonPositiveScale(f"scale must be positive, got {s}")
    if np.linalg.norm(r.T @ r - np.eye(3)) > ROTATION_TOL or np.linalg.det(r) < 0:
        raise NonRotation("matrix is not a proper rotation")
    return Pose(_frozen(r), _frozen(t), float(s))


@dataclass(frozen=True)
class Detection:
    class_label: int
    box: tuple
    confidence: float = 1.0

    def __post_init__(self):
        label = self.class_label
        if isinstance(label, bool) or not isinstance(label, (int, np.integer)):
            raise NegativeLabel(f"class label must be an integer, got {label!r}")
        if label < 0:
            raise NegativeLabel(f"class label must be >= 0, got {label}")
        object.__setattr__(self, "class_label", int(label))
        object.__setattr__(self, "box", check_box(self.box))
        conf = float(self.confidence)
        if not 0.0 <= conf <= 1.0:
            raise ValueError(f"confidence must lie in [0, 1], got {conf}")
        object.__setattr__(self, "confidence", conf)


def check_box(box) -> tuple:
    try:
        x1, y1, x2, y2 = (float(v) for v in box)
    except (TypeError, ValueError) as exc:
        raise MalformedBox(f"box must be 4 numbers, got {box!r}") from exc
    if not all(math.isfinite(v) for v in (x1, y1, x2, y2)):
        raise MalformedBox(f"box has non-finite coordinates: {box!r}")
    if not (x1 < x2 and y1 < y2):
        raise MalformedBox(f"box must satisfy x1<x2 and y1<y2: {box!r}")
    return (x1, y1, x2, y2)


@dataclass(frozen=True)
class SemanticMatrix:
    """Detections of one image, one row per object."""

    rows: tuple = ()
    image_size: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "rows", tuple(self.rows))
        if self.image_size is not None:
            w, h = self.image_size
            for d in self.rows:
                x1, y1, x2, y2 = d.box
                if x1 < 0 or y1 < 0 or x2 > w or y2 > h:
                    raise MalformedBox(f"box {d.box} outside image {w}x{h}")

    def __len__(self):
        return len(self.rows)

    @property
    def labels(self) -> list:
        return [d.class_label for d in self.rows]

    @property
    def boxes(self) -> np.ndarray:
        return np.array([d.box for d in self.rows], dtype=float).reshape(-1, 4)


@dataclass(frozen=True)
class Frame:
    timestep: int
    image_id: str
    semantics: SemanticMatrix
    pose_estimate: Pose
    keypoints: Optional[tuple] = None


@dataclass(frozen=True, eq=False)
class PoseSemanticDescriptor:
    timestep: int
    class_labels: tuple
    boxes: np.ndarray
    pose: Pose

    def __post_init__(self):
        object.__setattr__(self, "class_labels", tuple(int(c) for c in self.class_labels))
        boxes = _frozen(np.asarray(self.boxes, dtype=float).reshape(-1, 4))
        object.__setattr__(self, "boxes", boxes)
        if len(self.class_labels) < 1:
            raise ValueError("a descriptor needs at least one detection")
        if len(self.class_labels) != boxes.shape[0]:
            raise ValueError("label count does not match box rows")

    @property
    def k(self) -> int:
        return len(self.class_labels)

    def __eq__(self, other):
        if not isinstance(other, PoseSemanticDescriptor):
            return NotImplemented
        return (
            self.timestep == other.timestep
            and self.class_labels == other.class_labels
            and np.array_equal(self.boxes, other.boxes)
            and self.pose == other.pose
        )

    __hash__ = None


def compute_psd(frame: Frame) -> Optional[PoseSemanticDescriptor]:
    """Descriptor of a frame, or None when nothing was detected."""
    if len(frame.semantics) == 0:
        return None
    return PoseSemanticDescriptor(
        timestep=frame.timestep,
        class_labels=tuple(frame.semantics.labels),
        boxes=frame.semantics.boxes,
        pose=frame.pose_estimate,
    )


@dataclass(frozen=True, eq=False)
class Keyframe:
    id: int
    psd: PoseSemanticDescriptor
    map_points: Optional[np.ndarray] = None
    gt_pose: Optional[Pose] = None

    def __post_init__(self):
        if self.map_points is not None:
            pts = _frozen(np.asarray(self.map_points, dtype=float).reshape(-1, 3))
            if not np.all(np.isfinite(pts)):
                raise ValueError("map points must be finite")
            object.__setattr__(self, "map_points", pts)

    @property
    def pose(self) -> Pose:
        return self.psd.pose

    def __eq__(self, other):
        if not isinstance(other, Keyframe):
            return NotImplemented
        if (self.map_points is None) != (other.map_points is None):
            return False
        if self.map_points is not None and not np.array_equal(self.map_points, other.map_points):
            return False
        return self.id == other.id and self.psd == other.psd and self.gt_pose == other.gt_pose

    __hash__ = None


@dataclass
class LocalMap:
    map_id: int
    keyframes: list = field(default_factory=list)
    active: bool = True
    _index: object = field(default=None, init=False, repr=False, compare=False)

    def add_keyframe(self, kf: Keyframe) -> None:
        if self.keyframes and kf.id <= self.keyframes[-1].id:
            raise ValueError(
                f"keyframe id {kf.id} does not follow {self.keyframes[-1].id} in map {self.map_id}"
            )
        self.keyframes.append(kf)

    def index(self):
        """Vectorized view of the keyframes, rebuilt when keyframes were added."""
        from .kpr import KeyframeIndex

        if self._index is None or len(self._index) != len(self.keyframes):
            self._index = KeyframeIndex(self.keyframes)
        return self._index


@dataclass
class Atlas:
    maps: list = field(default_factory=lambda: [LocalMap(0)])
    active_index: int = 0

    def __post_init__(self):
        if not self.maps:
            raise ValueError("an atlas holds at least one map")
        actives = [i for i, m in enumerate(self.maps) if m.active]
        if actives != [self.active_index]:
            raise ValueError("exactly one map must be active and match active_index")

    @property
    def active_map(self) -> LocalMap:
        return self.maps[self.active_index]

    def __len__(self):
        return len(self.maps)


def atlas_new_map(atlas: Atlas) -> Atlas:
    """Close the active map and open a fresh empty one. Mutates and returns ``atlas``."""
    atlas.active_map.active = False
    new_id = max(m.map_id for m in atlas.maps) + 1
    atlas.maps.append(LocalMap(new_id))
    atlas.active_index = len(atlas.maps) - 1
    return atlas


def poses_stack(poses: Sequence[Pose]) -> np.ndarray:
    return np.stack([p.matrix for p in poses]) if poses else np.zeros((0, 4, 4))
