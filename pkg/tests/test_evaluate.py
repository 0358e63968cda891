import csv
import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

import oracles
from pcbreloc import evaluate
from pcbreloc.errors import DegenerateInput, EmptyInput, NoOverlap, SeedMismatch
from pcbreloc.evaluate import MetricsSummary
from pcbreloc.records import Attempt, Episode, RunRecord

RZ90 = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


def cloud(seed=0, n=20):
    return np.random.default_rng(seed).normal(0, 2, (n, 3))


def traj(points):
    return [(i, p) for i, p in enumerate(points)]


# -- alignment --------------------------------------------------------------

def test_align_identity():
    gt = cloud()
    r, t, s = evaluate.umeyama_align(gt, gt)
    assert np.allclose(r, np.eye(3), atol=1e-12) and np.allclose(t, 0, atol=1e-12) and s == 1.0


def test_align_recovers_rigid_transform():
    gt = cloud(1)
    est = gt @ RZ90.T + [1.0, 0.0, 0.0]
    r, t, s = evaluate.umeyama_align(est, gt)
    assert np.allclose(r, RZ90.T, atol=1e-9)
    assert np.allclose(t, -RZ90.T @ [1.0, 0.0, 0.0], atol=1e-9)
    assert np.max(np.abs(s * est @ r.T + t - gt)) < 1e-9


def test_align_recovers_scale():
    gt = cloud(2)
    r, t, s = evaluate.umeyama_align(2 * gt, gt, with_scale=True)
    assert abs(s - 0.5) < 1e-12
    assert np.allclose(r, np.eye(3), atol=1e-9)


def test_align_never_reflects_mirrored_input():
    gt = cloud(3)
    mirrored = gt * [1, 1, -1]
    r, _, _ = evaluate.umeyama_align(mirrored, gt)
    assert abs(np.linalg.det(r) - 1.0) < 1e-12


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1))
def test_align_proper_rotation_always(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    r, _, _ = evaluate.umeyama_align(a, b, with_scale=bool(seed % 2))
    assert abs(np.linalg.det(r) - 1.0) < 1e-9


def test_align_degenerate():
    with pytest.raises(DegenerateInput):
        evaluate.umeyama_align(cloud(n=2), cloud(n=2))
    line = np.outer(np.arange(5.0), [1, 2, 3])
    with pytest.raises(DegenerateInput):
        evaluate.umeyama_align(line, line)
    with pytest.raises(DegenerateInput):
        evaluate.umeyama_align(cloud(n=4), cloud(n=5))


# -- ATE --------------------------------------------------------------------

@pytest.mark.parametrize("mode", evaluate.ATE_MODES)
def test_ate_self_is_zero(mode):
    x = traj(cloud(4))
    assert evaluate.ate_rmse(x, x, mode) < 1e-12


def test_ate_removes_offset():
    gt = cloud(5)
    assert evaluate.ate_rmse(traj(gt + [1, 0, 0]), traj(gt), "se3") < 1e-6


def test_ate_hand_case():
    gt = np.zeros((9, 3))
    gt[:, 0] = np.arange(9)
    gt[:, 1] = np.arange(9) ** 2 / 10
    est = gt.copy()
    est[4, 2] += 0.3
    got = evaluate.ate_rmse(traj(est), traj(gt), "none")
    assert abs(got - 0.1) <= 1e-9
    assert abs(got - oracles.naive_rmse(est.tolist(), gt.tolist())) <= 1e-12


def test_ate_counts_unmatched():
    gt = traj(cloud(6, 10))
    est = [(t + 5, p) for t, p in gt]
    res = evaluate.ate(est, gt, "se3")
    assert (res.matched, res.unmatched_est, res.unmatched_gt) == (5, 5, 5)


def test_ate_no_overlap():
    with pytest.raises(NoOverlap):
        evaluate.ate_rmse(traj(cloud(n=5)), [(t + 3, p) for t, p in traj(cloud(n=5))])


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1))
def test_ate_rigid_invariance(seed):
    rng = np.random.default_rng(seed)
    gt = rng.normal(0, 3, (15, 3))
    est = gt + rng.normal(0, 0.2, gt.shape)
    r = Rotation.random(random_state=rng).as_matrix()
    t = rng.normal(0, 10, 3)
    a = evaluate.ate_rmse(traj(est), traj(gt), "se3")
    b = evaluate.ate_rmse(traj(est @ r.T + t), traj(gt @ r.T + t), "se3")
    assert abs(a - b) < 1e-9


# -- summaries --------------------------------------------------------------

def attempt(n_r, cands=1, skipped=False, ms=0.1):
    return Attempt(n_r, n_r, None if skipped else "pcb", {}, cands, False, skipped, ms)


def record(durations=(), maps=1, seed=0, method="pcb", cands=None):
    eps = []
    for i, d in enumerate(durations):
        eps.append(Episode(10 * i, [attempt(n + 1) for n in range(d)], "recovered"))
    if cands is not None:
        eps = [Episode(0, [attempt(i + 1, c) for i, c in enumerate(cands)], "recovered")]
    return RunRecord(method, seed, 20, eps, maps, scenario="s")


def test_summarize_single():
    s = evaluate.summarize([record([4], maps=1)])
    assert s.avg_lost_timesteps == 4 and s.avg_local_maps == 1


def test_summarize_map_mean():
    assert evaluate.summarize([record(maps=1, seed=0), record(maps=3, seed=1)]).avg_local_maps == 2


def test_summarize_candidates():
    assert evaluate.summarize([record(cands=[5, 6, 4, 4])]).avg_candidates == 4.75


def test_summarize_skips_skipped_and_truncated():
    ep = Episode(0, [attempt(1, 9, skipped=True), attempt(2, 3)], "recovered")
    trunc = Episode(50, [attempt(1, 3)] * 7, "truncated")
    s = evaluate.summarize([RunRecord("pcb", 0, 20, [ep, trunc], 1)])
    assert s.avg_candidates == 3 and s.avg_lost_timesteps == 2


def test_summarize_empty():
    with pytest.raises(EmptyInput):
        evaluate.summarize([])


@settings(max_examples=50)
@given(st.permutations(list(range(6))))
def test_summarize_permutation_invariant(order):
    rng = np.random.default_rng(0)
    recs = []
    for i in range(6):
        durs = rng.integers(1, 20, 3).tolist()
        r = record(durs, maps=int(rng.integers(1, 4)), seed=i)
        for a in r.attempts():
            a.kpr_time_ms = float(rng.random())
        recs.append(r)
    assert evaluate.summarize([recs[i] for i in order]) == evaluate.summarize(recs)


def summary(**kw):
    base = dict(method="pcb", avg_kpr_time_ms=0.3, avg_candidates=5.0, avg_lost_timesteps=8.0,
                avg_local_maps=1.0, ate_rmse_m=0.05, runs=(("s", 0),))
    base.update(kw)
    return MetricsSummary(**base)


def test_compare_identical():
    c = evaluate.compare(summary(), summary(method="baseline"))
    assert all(v == 1.0 for v in c.ratios.values())


def test_compare_lost_time_ratio():
    c = evaluate.compare(summary(avg_lost_timesteps=8.0), summary(avg_lost_timesteps=13.0))
    assert round(c.ratios["lost_time_ratio"], 3) == 0.615


def test_compare_candidate_ratio():
    c = evaluate.compare(summary(avg_candidates=4.0), summary(avg_candidates=1.0))
    assert c.ratios["candidate_ratio"] == 4.0


def test_compare_seed_mismatch():
    with pytest.raises(SeedMismatch):
        evaluate.compare(summary(), summary(runs=(("s", 1),)))


def test_csv_outputs(tmp_path):
    recs = [record([3, 20], maps=2)]
    s = evaluate.summarize(recs)
    evaluate.write_summary_csv([s], tmp_path / "summary.csv")
    rows = list(csv.DictReader(open(tmp_path / "summary.csv")))
    assert list(rows[0])[:6] == ["method", "avg_kpr_time_ms", "avg_candidates", "avg_lost_timesteps",
                                 "avg_local_maps", "ate_rmse_m"]
    assert float(rows[0]["avg_lost_timesteps"]) == 11.5
    evaluate.write_episodes_csv(recs, tmp_path / "episodes.csv")
    eps = list(csv.DictReader(open(tmp_path / "episodes.csv")))
    assert [int(e["duration"]) for e in eps] == [3, 20]
    assert list(eps[0])[-1] == "kpr_time_ms"
    c = evaluate.compare(s, dataclasses.replace(s, method="baseline"))
    evaluate.write_comparison_csv(c, tmp_path / "comparison.csv")
    comp = list(csv.reader(open(tmp_path / "comparison.csv")))
    assert comp[0] == ["metric", "pcb", "baseline", "ratio"]
    assert ["lost_time_ratio", "", "", "1.0"] in comp
