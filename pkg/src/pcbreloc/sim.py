"""Deterministic synthetic scenarios: a room of labelled boxes seen by a pinhole camera.

Randomness comes from numpy's PCG64 generator. A scenario seed is expanded
with ``SeedSequence(seed).spawn(4)`` into four independent streams, used in
this order:

0. objects    - class labels, centres, half extents
1. trajectory - start phase / direction / random-walk increments
2. noise      - per frame, in timestep order: for each visible object four
                box-jitter normals, one dropout uniform and one confidence
                uniform; then one false-positive uniform (plus the false
                positive's class, centre and size when it fires); then three
                odometry-drift normals
3. schedule   - the induced tracking-loss timesteps

Camera convention: poses are camera-to-world, the camera looks along +z,
x points right and y points down in the image.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .core import Detection, Frame, Pose, SemanticMatrix, make_pose
from .errors import InvalidConfig

TRAJECTORIES = ("circle", "random_walk", "lawnmower")
NEAR_PLANE = 0.1
MIN_BOX_PX = 2.0


@dataclass(frozen=True)
class CameraModel:
    fx: float = 525.0
    fy: float = 525.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480

    def __post_init__(self):
        vals = (self.fx, self.fy, self.cx, self.cy, self.width, self.height)
        if not all(v > 0 for v in vals):
            raise InvalidConfig("camera parameters must be positive")
        if not (self.cx < self.width and self.cy < self.height):
            raise InvalidConfig("principal point must lie inside the image")


@dataclass(frozen=True)
class WorldObject:
    class_label: int
    center: tuple
    half_extents: tuple

    def __post_init__(self):
        if any(h <= 0 for h in self.half_extents):
            raise InvalidConfig("object half extents must be positive")

    def corners(self) -> np.ndarray:
        c = np.asarray(self.center, dtype=float)
        h = np.asarray(self.half_extents, dtype=float)
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
        return c + signs * h


@dataclass(frozen=True)
class NoiseConfig:
    box_jitter_sigma: float = 0.0
    dropout_p: float = 0.0
    false_positive_rate: float = 0.0
    n_classes: int = 10

    @property
    def is_zero(self) -> bool:
        return self.box_jitter_sigma == 0 and self.dropout_p == 0 and self.false_positive_rate == 0


@dataclass(frozen=True)
class ScenarioConfig:
    room_min: tuple = (-4.0, -4.0, 0.0)
    room_max: tuple = (4.0, 4.0, 3.0)
    n_objects: int = 8
    n_classes: int = 10
    trajectory: str = "circle"
    n_frames: int = 400
    n_losses: int = 5
    box_jitter_sigma: float = 0.5
    dropout_p: float = 0.02
    false_positive_rate: float = 0.01
    seed: int = 0
    odometry_drift_sigma: float = 0.0
    camera_speed: float = 0.01
    min_loss_spacing: int = 20
    warmup_fraction: float = 0.1
    camera: CameraModel = field(default_factory=CameraModel)

    def __post_init__(self):
        lo = np.asarray(self.room_min, dtype=float)
        hi = np.asarray(self.room_max, dtype=float)
        if lo.shape != (3,) or hi.shape != (3,) or not np.all(hi - lo >= 1.0):
            raise InvalidConfig("room_max must exceed room_min by at least 1 m on every axis")
        if self.n_objects < 1:
            raise InvalidConfig("n_objects must be >= 1")
        if self.n_classes < 1:
            raise InvalidConfig("n_classes must be >= 1")
        if self.trajectory not in TRAJECTORIES:
            raise InvalidConfig(f"trajectory must be one of {TRAJECTORIES}, got {self.trajectory!r}")
        if self.n_frames < 3:
            raise InvalidConfig("n_frames must be >= 3")
        if self.n_losses < 0:
            raise InvalidConfig("n_losses must be >= 0")
        if self.box_jitter_sigma < 0 or not 0 <= self.dropout_p <= 1 or not 0 <= self.false_positive_rate <= 1:
            raise InvalidConfig("noise parameters out of range")
        if not self.camera_speed > 0:
            raise InvalidConfig("camera_speed must be > 0")
        if self.odometry_drift_sigma < 0 or self.min_loss_spacing < 1:
            raise InvalidConfig("drift must be >= 0 and loss spacing >= 1")
        if not 0 <= self.warmup_fraction < 1:
            raise InvalidConfig("warmup_fraction must lie in [0, 1)")

    @property
    def noise(self) -> NoiseConfig:
        return NoiseConfig(self.box_jitter_sigma, self.dropout_p, self.false_positive_rate, self.n_classes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["room_min"] = list(self.room_min)
        d["room_max"] = list(self.room_max)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        cam = d.pop("camera", None)
        for key in ("room_min", "room_max"):
            if key in d:
                d[key] = tuple(float(v) for v in d[key])
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown scenario keys: {sorted(unknown)}")
        if cam is not None:
            d["camera"] = cam if isinstance(cam, CameraModel) else CameraModel(**cam)
        try:
            return cls(**d)
        except TypeError as exc:
            raise InvalidConfig(str(exc)) from exc


@dataclass(frozen=True)
class Scenario:
    config: ScenarioConfig
    camera: CameraModel
    objects: tuple
    trajectory: tuple  # of (timestep, Pose)
    loss_schedule: tuple
    seed: int
    noise: NoiseConfig

    @property
    def gt_poses(self) -> dict:
        return dict(self.trajectory)


def look_at(position, target) -> np.ndarray:
    """Rotation (camera-to-world) of a camera at ``position`` looking at ``target``, world z up."""
    f = np.asarray(target, dtype=float) - np.asarray(position, dtype=float)
    f /= np.linalg.norm(f)
    right = np.cross(f, [0.0, 0.0, 1.0])
    n = np.linalg.norm(right)
    if n < 1e-9:
        right = np.array([1.0, 0.0, 0.0])
    else:
        right /= n
    down = np.cross(f, right)
    return np.column_stack([right, down, f])


def _streams(seed: int):
    return [np.random.Generator(np.random.PCG64(s)) for s in np.random.SeedSequence(seed).spawn(4)]


def _place_objects(cfg: ScenarioConfig, rng) -> tuple:
    lo = np.asarray(cfg.room_min, dtype=float)
    hi = np.asarray(cfg.room_max, dtype=float)
    objs = []
    for _ in range(cfg.n_objects):
        label = int(rng.integers(0, cfg.n_classes))
        half = rng.uniform(0.15, 0.45, 3)
        half = np.minimum(half, (hi - lo) / 4)
        c_lo = lo + half
        c_hi = hi - half
        c_hi[2] = min(c_hi[2], lo[2] + 2.0)
        center = rng.uniform(c_lo, np.maximum(c_hi, c_lo))
        objs.append(WorldObject(label, tuple(float(v) for v in center), tuple(float(v) for v in half)))
    return tuple(objs)


def _circle(cfg, rng, n):
    lo = np.asarray(cfg.room_min, dtype=float)
    hi = np.asarray(cfg.room_max, dtype=float)
    mid = (lo + hi) / 2
    radius = 0.3 * float(min(hi[:2] - lo[:2]))
    height = min(lo[2] + 1.4, mid[2])
    phase = rng.uniform(0, 2 * math.pi)
    direction = 1.0 if rng.random() < 0.5 else -1.0
    step = cfg.camera_speed / radius
    poses = []
    for i in range(n):
        a = phase + direction * step * i
        pos = np.array([mid[0] + radius * math.cos(a), mid[1] + radius * math.sin(a), height])
        # aim past the centre so the far half of the room stays in view
        target = np.array([mid[0] - radius * math.cos(a), mid[1] - radius * math.sin(a), lo[2] + 0.8])
        poses.append(make_pose(look_at(pos, target), pos))
    return poses


def _random_walk(cfg, rng, n):
    lo = np.asarray(cfg.room_min, dtype=float)
    hi = np.asarray(cfg.room_max, dtype=float)
    inner_lo = lo[:2] + 0.25 * (hi[:2] - lo[:2])
    inner_hi = hi[:2] - 0.25 * (hi[:2] - lo[:2])
    height = min(lo[2] + 1.4, (lo[2] + hi[2]) / 2)
    xy = rng.uniform(inner_lo, inner_hi)
    heading = rng.uniform(0, 2 * math.pi)
    speed = cfg.camera_speed
    poses = []
    for _ in range(n):
        heading += rng.normal(0.0, 0.02)
        step = speed * np.array([math.cos(heading), math.sin(heading)])
        nxt = xy + step
        # reflect off the inner region
        for k in range(2):
            if nxt[k] < inner_lo[k] or nxt[k] > inner_hi[k]:
                step[k] = -step[k]
                heading = math.atan2(step[1], step[0])
        xy = np.clip(xy + step, inner_lo, inner_hi)
        pos = np.array([xy[0], xy[1], height])
        target = pos + np.array([math.cos(heading), math.sin(heading), -0.25])
        poses.append(make_pose(look_at(pos, target), pos))
    return poses


def _lawnmower(cfg, rng, n):
    lo = np.asarray(cfg.room_min, dtype=float)
    hi = np.asarray(cfg.room_max, dtype=float)
    height = min(lo[2] + 1.4, (lo[2] + hi[2]) / 2)
    x0, x1 = lo[0] + 0.3 * (hi[0] - lo[0]), hi[0] - 0.3 * (hi[0] - lo[0])
    rows = np.linspace(lo[1] + 0.3 * (hi[1] - lo[1]), hi[1] - 0.3 * (hi[1] - lo[1]), 3)
    if rng.random() < 0.5:
        rows = rows[::-1]
    pts = []
    for i, y in enumerate(rows):
        xs = (x0, x1) if i % 2 == 0 else (x1, x0)
        pts.extend([(xs[0], y), (xs[1], y)])
    pts = np.asarray(pts)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    # constant speed from a random start, bouncing back at the ends of the path
    length = cum[-1]
    u = rng.uniform(0.0, length) + cfg.camera_speed * np.arange(n)
    u = np.mod(u, 2 * length)
    s = np.where(u > length, 2 * length - u, u)
    xy = np.column_stack([np.interp(s, cum, pts[:, 0]), np.interp(s, cum, pts[:, 1])])
    mid = (lo + hi) / 2
    poses = []
    for i in range(n):
        pos = np.array([xy[i, 0], xy[i, 1], height])
        # the robot sweeps the floor while the camera watches the room centre
        target = np.array([mid[0], mid[1], lo[2] + 0.8])
        if np.linalg.norm(target[:2] - pos[:2]) < 0.5:
            target = pos + np.array([1.0, 0.0, -0.3])
        poses.append(make_pose(look_at(pos, target), pos))
    return poses


_TRAJ = {"circle": _circle, "random_walk": _random_walk, "lawnmower": _lawnmower}


def draw_loss_schedule(n_frames: int, n_losses: int, rng, warmup_fraction: float = 0.1,
                       spacing: int = 20) -> tuple:
    """``n_losses`` sorted timesteps, none in the warm-up, at least ``spacing`` apart,
    and each at least ``spacing`` frames before the end of the sequence."""
    if n_losses == 0:
        return ()
    lo = math.ceil(warmup_fraction * n_frames)
    hi = n_frames - 1 - spacing
    slack = hi - lo - (n_losses - 1) * spacing
    if slack < 0:
        raise InvalidConfig(
            f"cannot place {n_losses} losses {spacing} frames apart in {n_frames} frames"
        )
    u = np.sort(rng.integers(0, slack + 1, n_losses))
    return tuple(int(lo + u[i] + i * spacing) for i in range(n_losses))


def generate_scenario(config: ScenarioConfig, seed: int | None = None) -> Scenario:
    if seed is None:
        seed = config.seed
    config = dataclasses.replace(config, seed=int(seed))
    objects_rng, traj_rng, _noise_rng, sched_rng = _streams(seed)
    objects = _place_objects(config, objects_rng)
    poses = _TRAJ[config.trajectory](config, traj_rng, config.n_frames)
    schedule = draw_loss_schedule(
        config.n_frames, config.n_losses, sched_rng, config.warmup_fraction, config.min_loss_spacing
    )
    return Scenario(
        config=config,
        camera=config.camera,
        objects=objects,
        trajectory=tuple(enumerate(poses)),
        loss_schedule=schedule,
        seed=int(seed),
        noise=config.noise,
    )


def project_objects(camera: CameraModel, pose: Pose, objects, noise: NoiseConfig | None = None,
                    rng: np.random.Generator | None = None) -> SemanticMatrix:
    """Detections of ``objects`` seen from ``pose``; sorted by class, then x1."""
    if noise is None:
        noise = NoiseConfig()
    if rng is None and not noise.is_zero:
        raise ValueError("a random generator is required for non-zero noise")
    w, h = float(camera.width), float(camera.height)
    r = pose.r
    t = pose.translation
    dets = []
    for obj in objects:
        center_c = (np.asarray(obj.center) - t) @ r
        visible = center_c[2] > 0
        if visible:
            pc = (obj.corners() - t) @ r
            if np.any(pc[:, 2] < NEAR_PLANE):
                visible = False
        if visible:
            u = camera.fx * pc[:, 0] / pc[:, 2] + camera.cx
            v = camera.fy * pc[:, 1] / pc[:, 2] + camera.cy
            x1, x2 = max(u.min(), 0.0), min(u.max(), w)
            y1, y2 = max(v.min(), 0.0), min(v.max(), h)
            visible = x2 - x1 >= MIN_BOX_PX and y2 - y1 >= MIN_BOX_PX
        if not visible:
            continue
        conf = 1.0
        if rng is not None:
            jitter = rng.normal(0.0, 1.0, 4) * noise.box_jitter_sigma
            drop = rng.random() < noise.dropout_p
            conf = float(rng.uniform(0.6, 1.0))
            x1, x2 = np.clip([x1 + jitter[0], x2 + jitter[2]], 0.0, w)
            y1, y2 = np.clip([y1 + jitter[1], y2 + jitter[3]], 0.0, h)
            if drop or x2 - x1 < 1.0 or y2 - y1 < 1.0:
                continue
        dets.append(Detection(obj.class_label, (float(x1), float(y1), float(x2), float(y2)), conf))
    if rng is not None and rng.random() < noise.false_positive_rate:
        label = int(rng.integers(0, noise.n_classes))
        cx, cy = rng.uniform([0.0, 0.0], [w, h])
        bw, bh = rng.uniform(20.0, 120.0, 2)
        x1, x2 = max(cx - bw / 2, 0.0), min(cx + bw / 2, w)
        y1, y2 = max(cy - bh / 2, 0.0), min(cy + bh / 2, h)
        dets.append(Detection(label, (float(x1), float(y1), float(x2), float(y2)), float(rng.uniform(0.3, 0.6))))
    dets.sort(key=lambda d: (d.class_label, d.box[0]))
    return SemanticMatrix(tuple(dets), image_size=(camera.width, camera.height))


def render_frames(scenario: Scenario) -> list:
    """One frame per trajectory pose; the pose estimate is the true pose plus
    accumulated odometry drift (zero by default)."""
    rng = _streams(scenario.seed)[2]
    sigma = scenario.config.odometry_drift_sigma
    drift = np.zeros(3)
    frames = []
    for t, gt in scenario.trajectory:
        sm = project_objects(scenario.camera, gt, scenario.objects, scenario.noise, rng)
        drift = drift + rng.normal(0.0, 1.0, 3) * sigma
        est = gt if sigma == 0 else make_pose(gt.r, gt.translation + drift, 1.0)
        frames.append(Frame(t, f"sim/{scenario.seed}/{t}", sm, est))
    return frames
