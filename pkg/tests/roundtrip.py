"""Per-format (generate, serialize, parse, compare) tables shared by the io tests
and the acceptance run."""
import json

import numpy as np
from scipy.spatial.transform import Rotation

import gen
from pcbreloc import io
from pcbreloc.errors import PcbRelocError


def _same_trajectory(a, b):
    if len(a) != len(b):
        return False
    for (ta, pa), (tb, pb) in zip(a, b):
        if ta != tb or type(ta) is not type(tb):
            return False
        if not np.allclose(pa.translation, pb.translation, atol=1e-9, rtol=0):
            return False
        qa, qb = Rotation.from_matrix(pa.r).as_quat(), Rotation.from_matrix(pb.r).as_quat()
        if qa @ qb < 0:
            qb = -qb
        if not np.allclose(qa, qb, atol=1e-9, rtol=0):
            return False
    return True


def _same_detections(a, b):
    return a == b


def _same_atlas(a, b):
    return io.atlas_to_dict(a) == io.atlas_to_dict(b)


def _same_config(a, b):
    return a == b


def _same_record(a, b):
    norm = lambda r: json.loads(json.dumps(r.to_dict()))
    return norm(a) == norm(b)


FORMATS = {
    "trajectory": (gen.random_trajectory, io.format_trajectory, io.parse_trajectory, _same_trajectory),
    "detections": (gen.random_detection_log, io.format_detections, io.parse_detections, _same_detections),
    "atlas": (gen.random_atlas, lambda a: json.dumps(io.atlas_to_dict(a)), io.parse_snapshot, _same_atlas),
    "scenario_config": (gen.random_scenario_config, io.format_scenario_config, io.parse_scenario_config, _same_config),
    "run_record": (gen.random_run_record, lambda r: json.dumps(r.to_dict()), io.parse_run_record, _same_record),
}

PARSERS = {
    "trajectory": io.parse_trajectory,
    "detections": io.parse_detections,
    "atlas": io.parse_snapshot,
    "scenario_config": io.parse_scenario_config,
    "scenario": io.parse_scenario,
    "run_record": io.parse_run_record,
}


def roundtrip_failures(name, n, seed=0):
    make, dump, parse, same = FORMATS[name]
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(n):
        x = make(rng)
        if not same(x, parse(dump(x))):
            bad += 1
    return bad


def _mutate(rng, data: bytes) -> bytes:
    b = bytearray(data)
    for _ in range(int(rng.integers(1, 6))):
        op = rng.integers(0, 3)
        pos = int(rng.integers(0, len(b) + 1))
        if op == 0 and b:
            b[min(pos, len(b) - 1)] = int(rng.integers(0, 256))
        elif op == 1:
            b[pos:pos] = bytes(rng.integers(0, 256, int(rng.integers(1, 8))).tolist())
        elif b:
            del b[pos:pos + int(rng.integers(1, 8))]
    return bytes(b)


def fuzz_crashes(parser, n, seed=0, seeds_text=()):
    """Feed random and mutated byte strings; return the inputs that raised
    anything other than a library error."""
    rng = np.random.default_rng(seed)
    crashes = []
    for i in range(n):
        if seeds_text and i % 2:
            data = _mutate(rng, seeds_text[i % len(seeds_text)].encode("utf-8"))
        else:
            data = bytes(rng.integers(0, 256, int(rng.integers(0, 200))).tolist())
        try:
            parser(data)
        except PcbRelocError:
            pass
        except Exception as exc:  # noqa: BLE001 - collecting crashes is the point
            crashes.append((data, repr(exc)))
    return crashes


def seed_documents(name, k=5, seed=1):
    """Valid serialized documents used as mutation seeds for ``name``."""
    rng = np.random.default_rng(seed)
    if name == "scenario":
        from pcbreloc import sim

        cfg = sim.ScenarioConfig(n_frames=5, n_losses=0)
        return [json.dumps(io.scenario_to_dict(sim.generate_scenario(cfg, s))) for s in range(k)]
    make, dump, _, _ = FORMATS[name]
    return [dump(make(rng)) for _ in range(k)]
