"""Readers and writers for trajectories, detection logs, atlas snapshots,
scenario configs and run records.

Every ``parse_*`` function accepts ``str`` or ``bytes`` and raises only
subclasses of :class:`~pcbreloc.errors.PcbRelocError` on bad input.
"""
from __future__ import annotations

import configparser
import json
import math
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .core import Atlas, Detection, Keyframe, LocalMap, Pose, PoseSemanticDescriptor, SemanticMatrix, make_pose
from .errors import InvalidConfig, NegativeLabel, NonUnitQuaternion, ParseError, PcbRelocError, VersionMismatch
from .records import RunRecord
from .sim import CameraModel, Scenario, ScenarioConfig, WorldObject

SNAPSHOT_FORMAT = "pcbreloc.atlas"
SNAPSHOT_VERSION = 1
SCENARIO_FORMAT = "pcbreloc.scenario"
SCENARIO_VERSION = 1
QUAT_TOL = 1e-6


def fmt(x: float) -> str:
    """Shortest text that reads back to the same double; integral values print without '.0'."""
    x = float(x)
    if x.is_integer() and abs(x) < 1e15:
        return str(int(x))
    return repr(x)


def _text(data) -> str:
    if isinstance(data, (bytes, bytearray)):
        try:
            return bytes(data).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"not UTF-8: {exc.reason}", line=None) from exc
    return data


def _json(text, path=None):
    try:
        return json.loads(text)
    except (ValueError, RecursionError) as exc:
        raise ParseError(f"invalid JSON: {exc}", path=path) from None


def _finite(tok: str, line: int) -> float:
    try:
        v = float(tok)
    except ValueError:
        raise ParseError(f"not a number: {tok!r}", line=line) from None
    if not math.isfinite(v):
        raise ParseError(f"non-finite value: {tok!r}", line=line)
    return v


# -- trajectories -----------------------------------------------------------

def pose_to_row(timestamp, pose: Pose) -> str:
    q = Rotation.from_matrix(pose.r).as_quat()
    if q[3] < 0:
        q = -q
    vals = [timestamp, *pose.translation, *q]
    return " ".join(fmt(v) for v in vals)


def format_trajectory(poses) -> str:
    lines = ["# timestamp tx ty tz qx qy qz qw"]
    lines += [pose_to_row(t, p) for t, p in poses]
    return "\n".join(lines) + "\n"


def write_trajectory(poses, path) -> None:
    Path(path).write_text(format_trajectory(poses), encoding="utf-8")


def parse_trajectory(data) -> list:
    out = []
    prev = -math.inf
    for lineno, raw in enumerate(_text(data).splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        toks = line.split()
        if len(toks) != 8:
            raise ParseError(f"expected 8 fields, got {len(toks)}", line=lineno)
        v = [_finite(tok, lineno) for tok in toks]
        ts = v[0]
        if ts < prev:
            raise ParseError("timestamps must be non-decreasing", line=lineno)
        prev = ts
        q = np.array(v[4:8])
        if abs(np.linalg.norm(q) - 1.0) > QUAT_TOL:
            raise NonUnitQuaternion(f"quaternion norm {np.linalg.norm(q):.9g}", line=lineno)
        r = Rotation.from_quat(q).as_matrix()
        t = int(ts) if ts.is_integer() else ts
        out.append((t, make_pose(r, v[1:4], 1.0)))
    return out


def read_trajectory(path) -> list:
    data = Path(path).read_bytes()
    try:
        return parse_trajectory(data)
    except ParseError as exc:
        exc.path = str(path)
        raise


# -- detection logs ---------------------------------------------------------

def _det_record(timestep, image_id, sm: SemanticMatrix) -> str:
    rec = {
        "timestep": int(timestep),
        "image_id": image_id,
        "detections": [
            {"label": d.class_label, "box": list(d.box), "conf": d.confidence} for d in sm.rows
        ],
    }
    return json.dumps(rec, ensure_ascii=False)


def format_detections(records) -> str:
    return "".join(_det_record(*r) + "\n" for r in records)


def write_detections(records, path) -> None:
    Path(path).write_text(format_detections(records), encoding="utf-8")


def _parse_detection(d, lineno) -> Detection:
    if not isinstance(d, dict) or set(d) != {"label", "box", "conf"}:
        raise ParseError("detection must be an object with label, box, conf", line=lineno)
    label, box, conf = d["label"], d["box"], d["conf"]
    if isinstance(label, bool) or not isinstance(label, int):
        raise ParseError(f"label must be an integer, got {label!r}", line=lineno)
    if label < 0:
        raise NegativeLabel(f"line {lineno}: negative class label {label}")
    if not isinstance(box, list) or len(box) != 4 or not all(
        isinstance(v, (int, float)) and not isinstance(v, bool) for v in box
    ):
        raise ParseError(f"box must be a list of 4 numbers, got {box!r}", line=lineno)
    if isinstance(conf, bool) or not isinstance(conf, (int, float)) or not 0 <= conf <= 1:
        raise ParseError(f"conf must be a number in [0, 1], got {conf!r}", line=lineno)
    try:
        coords = tuple(float(v) for v in box)
    except OverflowError:
        raise ParseError(f"box coordinate out of range: {box!r}", line=lineno) from None
    return Detection(label, coords, float(conf))


def parse_detections(data) -> list:
    out = []
    prev = None
    for lineno, raw in enumerate(_text(data).splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            rec = json.loads(raw)
        except (ValueError, RecursionError) as exc:
            raise ParseError(f"invalid JSON: {exc}", line=lineno) from None
        if not isinstance(rec, dict) or set(rec) != {"timestep", "image_id", "detections"}:
            raise ParseError("record must have timestep, image_id, detections", line=lineno)
        t, image_id, dets = rec["timestep"], rec["image_id"], rec["detections"]
        if isinstance(t, bool) or not isinstance(t, int) or t < 0:
            raise ParseError(f"timestep must be a non-negative integer, got {t!r}", line=lineno)
        if prev is not None and t < prev:
            raise ParseError("timesteps must be non-decreasing", line=lineno)
        prev = t
        if not isinstance(image_id, str) or not isinstance(dets, list):
            raise ParseError("image_id must be a string and detections a list", line=lineno)
        out.append((t, image_id, SemanticMatrix(tuple(_parse_detection(d, lineno) for d in dets))))
    return out


def read_detections(path) -> list:
    try:
        return parse_detections(Path(path).read_bytes())
    except ParseError as exc:
        exc.path = str(path)
        raise


# -- atlas snapshots --------------------------------------------------------

def _pose_dict(p: Pose | None):
    if p is None:
        return None
    return {"r": p.r.tolist(), "t": p.t.tolist(), "s": p.s}


def _pose_from(d) -> Pose:
    if not isinstance(d, dict) or set(d) != {"r", "t", "s"}:
        raise ParseError("pose must have r, t, s")
    return make_pose(_matrix(d["r"], (3, 3)), _matrix(d["t"], (3,)), _number(d["s"]))


def _number(v) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ParseError(f"expected a number, got {v!r}")
    return float(v)


def _matrix(v, shape) -> np.ndarray:
    """Float array of ``shape``; a -1 entry accepts any length."""
    try:
        a = np.array(v, dtype=float)
    except (TypeError, ValueError):
        raise ParseError(f"expected a numeric array of shape {shape}") from None
    if a.size == 0 and shape[0] == -1:
        a = a.reshape((0,) + tuple(shape[1:]))
    if a.ndim != len(shape) or any(want not in (-1, got) for want, got in zip(shape, a.shape)):
        raise ParseError(f"expected shape {shape}, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ParseError("non-finite values in array")
    return a


def atlas_to_dict(atlas: Atlas) -> dict:
    return {
        "format": SNAPSHOT_FORMAT,
        "version": SNAPSHOT_VERSION,
        "active_index": atlas.active_index,
        "maps": [
            {
                "map_id": m.map_id,
                "active": m.active,
                "keyframes": [
                    {
                        "id": kf.id,
                        "psd": {
                            "timestep": kf.psd.timestep,
                            "labels": list(kf.psd.class_labels),
                            "boxes": kf.psd.boxes.tolist(),
                            "pose": _pose_dict(kf.psd.pose),
                        },
                        "map_points": None if kf.map_points is None else kf.map_points.tolist(),
                        "gt_pose": _pose_dict(kf.gt_pose),
                    }
                    for kf in m.keyframes
                ],
            }
            for m in atlas.maps
        ],
    }


def _int(v, what) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise ParseError(f"{what} must be an integer, got {v!r}")
    return v


def atlas_from_dict(d) -> Atlas:
    if not isinstance(d, dict) or d.get("format") != SNAPSHOT_FORMAT:
        raise ParseError("not an atlas snapshot")
    if d.get("version") != SNAPSHOT_VERSION:
        raise VersionMismatch(f"snapshot version {d.get('version')!r}, expected {SNAPSHOT_VERSION}")
    maps = []
    for m in d["maps"]:
        lm = LocalMap(_int(m["map_id"], "map_id"), active=bool(m["active"]))
        for k in m["keyframes"]:
            p = k["psd"]
            labels = [_int(c, "label") for c in p["labels"]]
            if any(c < 0 for c in labels):
                raise NegativeLabel("negative class label in snapshot")
            psd = PoseSemanticDescriptor(
                _int(p["timestep"], "timestep"), labels, _matrix(p["boxes"], (-1, 4)), _pose_from(p["pose"])
            )
            pts = None if k["map_points"] is None else _matrix(k["map_points"], (-1, 3))
            gt = None if k["gt_pose"] is None else _pose_from(k["gt_pose"])
            lm.add_keyframe(Keyframe(_int(k["id"], "id"), psd, pts, gt))
        maps.append(lm)
    return Atlas(maps, _int(d["active_index"], "active_index"))


def snapshot_db(atlas: Atlas, path) -> None:
    Path(path).write_text(json.dumps(atlas_to_dict(atlas), indent=1) + "\n", encoding="utf-8")


def _guarded(fn, data):
    """Run a structural decoder, turning stray Python errors into ParseError."""
    try:
        return fn(data)
    except PcbRelocError:
        raise
    except (KeyError, TypeError, ValueError, AttributeError, IndexError, OverflowError, RecursionError) as exc:
        raise ParseError(f"malformed document: {type(exc).__name__}: {exc}") from None


def parse_snapshot(data) -> Atlas:
    return _guarded(atlas_from_dict, _json(_text(data)))


def load_db(path) -> Atlas:
    return parse_snapshot(Path(path).read_bytes())


# -- scenario config (flat key = value) -------------------------------------

_INT_KEYS = {"n_objects", "n_classes", "n_frames", "n_losses", "seed", "min_loss_spacing", "width", "height"}
_VEC_KEYS = {"room_min", "room_max"}
_STR_KEYS = {"trajectory"}
_CAMERA_KEYS = {"fx", "fy", "cx", "cy", "width", "height"}


def parse_scenario_config(data) -> ScenarioConfig:
    text = _text(data)
    parser = configparser.ConfigParser(
        delimiters=("=",), comment_prefixes=("#",), inline_comment_prefixes=("#",),
        interpolation=None, strict=True,
    )
    parser.optionxform = str
    try:
        parser.read_string("[scenario]\n" + text)
    except configparser.Error as exc:
        raise InvalidConfig(f"cannot parse scenario config: {exc}") from None
    if parser.sections() != ["scenario"]:
        raise InvalidConfig("scenario config is flat key = value text; section headers are not allowed")
    values, camera = {}, {}
    for key, raw in parser["scenario"].items():
        raw = raw.strip()
        try:
            if key in _VEC_KEYS:
                parts = raw.replace(",", " ").split()
                if len(parts) != 3:
                    raise ValueError("expected 3 numbers")
                val = tuple(float(p) for p in parts)
            elif key in _STR_KEYS:
                val = raw
            elif key in _INT_KEYS:
                val = int(raw)
            else:
                val = float(raw)
        except ValueError as exc:
            raise InvalidConfig(f"bad value for {key!r}: {raw!r} ({exc})") from None
        (camera if key in _CAMERA_KEYS else values)[key] = val
    if camera:
        values["camera"] = CameraModel(**{**CameraModel().__dict__, **camera})
    return ScenarioConfig.from_dict(values)


def read_scenario_config(path) -> ScenarioConfig:
    return parse_scenario_config(Path(path).read_bytes())


def format_scenario_config(cfg: ScenarioConfig) -> str:
    d = cfg.to_dict()
    cam = d.pop("camera")
    lines = []
    for k, v in {**d, **cam}.items():
        if isinstance(v, list):
            v = " ".join(fmt(x) for x in v)
        elif isinstance(v, float):
            v = fmt(v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


# -- scenario snapshot ------------------------------------------------------

def scenario_to_dict(s: Scenario) -> dict:
    return {
        "format": SCENARIO_FORMAT,
        "version": SCENARIO_VERSION,
        "seed": s.seed,
        "config": s.config.to_dict(),
        "objects": [
            {"class_label": o.class_label, "center": list(o.center), "half_extents": list(o.half_extents)}
            for o in s.objects
        ],
        "trajectory": [[t, _pose_dict(p)] for t, p in s.trajectory],
        "loss_schedule": list(s.loss_schedule),
    }


def scenario_from_dict(d) -> Scenario:
    if not isinstance(d, dict) or d.get("format") != SCENARIO_FORMAT:
        raise ParseError("not a scenario snapshot")
    if d.get("version") != SCENARIO_VERSION:
        raise VersionMismatch(f"scenario version {d.get('version')!r}, expected {SCENARIO_VERSION}")
    cfg = ScenarioConfig.from_dict(d["config"])
    objects = tuple(
        WorldObject(_int(o["class_label"], "class_label"), tuple(o["center"]), tuple(o["half_extents"]))
        for o in d["objects"]
    )
    traj = tuple((_int(t, "timestep"), _pose_from(p)) for t, p in d["trajectory"])
    schedule = tuple(_int(t, "loss timestep") for t in d["loss_schedule"])
    return Scenario(cfg, cfg.camera, objects, traj, schedule, _int(d["seed"], "seed"), cfg.noise)


def write_scenario(s: Scenario, path) -> None:
    Path(path).write_text(json.dumps(scenario_to_dict(s), indent=1) + "\n", encoding="utf-8")


def parse_scenario(data) -> Scenario:
    return _guarded(scenario_from_dict, _json(_text(data)))


def read_scenario(path) -> Scenario:
    try:
        return parse_scenario(Path(path).read_bytes())
    except ParseError as exc:
        exc.path = str(path)
        raise


# -- run records ------------------------------------------------------------

def write_run_record(record: RunRecord, path) -> None:
    Path(path).write_text(json.dumps(record.to_dict(), indent=1) + "\n", encoding="utf-8")


def parse_run_record(data) -> RunRecord:
    return _guarded(RunRecord.from_dict, _json(_text(data)))


def read_run_record(path) -> RunRecord:
    try:
        return parse_run_record(Path(path).read_bytes())
    except ParseError as exc:
        exc.path = str(path)
        raise
