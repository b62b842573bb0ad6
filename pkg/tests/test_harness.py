import math
from pathlib import Path

import numpy as np
import pytest
import torch

from fieldsearch import harness
from fieldsearch.config import load_config
from fieldsearch.dqn import Checkpoint, QNetwork
from fieldsearch.env import SearchEnv
from fieldsearch.field_sim import Field, NoiseConfig, generate_prior_map
from fieldsearch.geo import DatasetBundle, grid_to_utm
from fieldsearch.harness import EvalRun, found_from_trace
from fieldsearch.metrics import coverage_plan, score
from fieldsearch.rollout import run_plan
from fieldsearch.synth import make_bundles

TINY = Path(__file__).resolve().parents[1] / "configs" / "tiny.json"


@pytest.fixture(scope="module")
def cfg():
    return load_config(TINY)


@pytest.fixture(scope="module")
def bundles(tmp_path_factory):
    return make_bundles(tmp_path_factory.mktemp("bundles"), 4, seed=11)


@pytest.fixture(scope="module")
def checkpoint(cfg):
    torch.manual_seed(0)
    return Checkpoint.from_network(QNetwork(cfg.network, cfg.field.M, cfg.env.N))


def test_level1_smoke(cfg, checkpoint):
    runs = harness.run_level1(checkpoint, cfg, n_fields=1)
    assert [r.planner for r in runs] == ["dqn", "coverage"]
    for r in runs:
        assert 0 <= r.metrics.precision <= 1 and 0 <= r.metrics.recall <= 1
        assert r.metrics.path_length >= 0
    assert runs[1].metrics.path_length == coverage_plan(24, 6).n_moves


def test_level1_without_checkpoint_runs_coverage_only(cfg):
    runs = harness.run_level1(None, cfg, n_fields=2)
    assert [r.planner for r in runs] == ["coverage", "coverage"]


def test_coverage_finds_everything_without_noise():
    M, N = 14, 4
    f = Field(M, np.argwhere(np.ones((M, M), dtype=bool)))
    from fieldsearch.env import EnvConfig

    env = SearchEnv(EnvConfig(N=N, b_init=5), NoiseConfig.noiseless())
    plan = coverage_plan(M, N)
    ep = run_plan(env, f, np.zeros((M, M), dtype=bool), plan, 0)
    m = score(ep.found_map, f, ep.moves)
    assert (m.precision, m.recall, m.path_length) == (1.0, 1.0, plan.n_moves)
    assert not ep.crashed


def test_perfect_prior_without_noise(bundles, cfg):
    bundle = DatasetBundle.load(bundles[0])
    field = harness.bundle_field(bundle, bundle.spec)
    prior = generate_prior_map(field, NoiseConfig.noiseless(), 0)
    np.testing.assert_array_equal(prior, field.occupancy())


def test_bundle_field_drops_objects_outside_grid_and_region(bundles):
    bundle = DatasetBundle.load(bundles[0])
    spec = bundle.spec
    far = grid_to_utm([(-5, 3)], spec)
    outside_region = grid_to_utm([(0, 12)], spec)  # grid row 0 lies outside the 60% tall polygon
    gt = np.vstack([bundle.ground_truth, far, outside_region])
    b2 = DatasetBundle(bundle.name, spec, gt, bundle.prior_detections, bundle.flight_detections,
                       bundle.field_polygon)
    assert harness.bundle_field(b2, spec) == harness.bundle_field(bundle, spec)


def test_l2_and_l3_coverage_identical(bundles, cfg):
    l2 = harness.run_level(2, None, bundles, cfg)
    l3 = harness.run_level(3, None, bundles, cfg)
    assert len(l2) == len(l3) == 16
    for a, b in zip(l2, l3):
        assert a.metrics == b.metrics and a.trace == b.trace


def test_l4_replay_deterministic(bundles, cfg, checkpoint):
    a = harness.run_level(4, checkpoint, bundles[:2], cfg, rotations=(0.0, 90.0))
    b = harness.run_level(4, checkpoint, bundles[:2], cfg, rotations=(0.0, 90.0))
    assert [r.run_id for r in a] == [r.run_id for r in b]
    assert all(x.metrics == y.metrics and x.trace == y.trace for x, y in zip(a, b))
    assert {r.run_id for r in a} >= {"L4-dqn-field_a-r000", "L4-coverage-field_b-r090"}


def test_parallel_matches_serial(bundles, cfg):
    a = harness.run_level(4, None, bundles[:2], cfg, rotations=(0.0, 180.0), jobs=1)
    b = harness.run_level(4, None, bundles[:2], cfg, rotations=(0.0, 180.0), jobs=2)
    assert [r.metrics for r in a] == [r.metrics for r in b]


def test_missing_files_are_named(tmp_path, bundles, cfg, checkpoint):
    b = DatasetBundle.load(bundles[0])
    DatasetBundle(b.name, b.spec, b.ground_truth, None, None, b.field_polygon).save(tmp_path / "bare")
    with pytest.raises(FileNotFoundError, match="prior_detections.csv"):
        harness.run_level(3, checkpoint, [tmp_path / "bare"], cfg)
    with pytest.raises(FileNotFoundError, match="flight_detections.csv"):
        harness.run_level(4, None, [tmp_path / "bare"], cfg)
    with pytest.raises(ValueError):
        harness.run_level(1, None, [], cfg)


def test_wrong_grid_size_rejected(tmp_path, bundles, cfg):
    b = DatasetBundle.load(bundles[0])
    from dataclasses import replace

    DatasetBundle(b.name, replace(b.spec, M=30), b.ground_truth, b.prior_detections,
                  b.flight_detections, b.field_polygon).save(tmp_path / "big")
    with pytest.raises(ValueError, match="M=30"):
        harness.run_level(2, None, [tmp_path / "big"], cfg)


def test_replay_observer_places_detection(bundles, cfg):
    b = DatasetBundle.load(bundles[0])
    cell = (10, 13)
    rec = np.column_stack([grid_to_utm([cell], b.spec), [[0.9]]])
    obs = harness.ReplayObserver(rec, b.spec, 6, 0.5)((8, 9))
    assert np.argwhere(obs).tolist() == [[2, 4]]


def test_runs_self_consistent(bundles, cfg, checkpoint):
    runs = harness.run_level(3, checkpoint, bundles[:1], cfg) + harness.run_level1(checkpoint, cfg, n_fields=2)
    for r in runs:
        found = found_from_trace(r.trace, 24)
        assert score(found, r.gt, r.metrics.path_length) == r.metrics
        curve = r.curve()
        assert curve[-1] == (r.trace[-1]["moves"], r.metrics.recall)
        assert all(a[1] <= b[1] and a[0] < b[0] for a, b in zip(curve, curve[1:]))


def test_prior_quality_matches_score(bundles, cfg):
    q = harness.prior_quality(bundles[:1], cfg, rotations=(0.0,))
    b = DatasetBundle.load(bundles[0])
    from fieldsearch.geo import build_prior_from_detections

    prior = build_prior_from_detections(b.prior_detections, b.spec, 0.05)
    assert q == [score(prior, harness.bundle_field(b, b.spec))]


# -- report tables on hand-built traces -------------------------------------

def _gt():
    gt = np.zeros((10, 10), dtype=bool)
    for c in [(1, 1), (2, 2), (3, 3), (4, 4)]:
        gt[c] = True
    return gt


def _run(rid, planner, steps):
    trace = [{"moves": m, "new_found": cells} for m, cells in steps]
    gt = _gt()
    m = score(found_from_trace(trace, 10), gt, steps[-1][0])
    return EvalRun(rid, 2, planner, "toy", 0, 0.0, m, trace, gt)


@pytest.fixture
def crafted():
    return [
        _run("a", "dqn", [(0, [[1, 1]]), (2, [[2, 2]]), (3, [])]),
        _run("b", "dqn", [(0, []), (1, [[1, 1], [2, 2], [3, 3]]), (4, [])]),
        _run("c", "coverage", [(0, [[9, 9]]), (2, [[1, 1], [2, 2], [3, 3], [4, 4]]), (5, [])]),
    ]


def test_recall_table_hand_values(crafted):
    rows = harness.recall_table(crafted, steps=(1, 2, 3))
    dqn, cov = rows
    assert (dqn["planner"], dqn["n_runs"], cov["planner"], cov["n_runs"]) == ("dqn", 2, "coverage", 1)
    # per-run recall at 1/2/3 moves: a = .25/.5/.5, b = .75/.75/.75, c = 0/1/1
    assert dqn["recall@1_mean"] == pytest.approx(0.5)
    assert dqn["recall@1_std"] == pytest.approx(math.sqrt(0.125))
    assert dqn["recall@2_mean"] == pytest.approx(0.625)
    assert dqn["recall@2_std"] == pytest.approx(math.sqrt(0.03125))
    assert (cov["recall@1_mean"], cov["recall@2_mean"], cov["recall@1_std"]) == (0.0, 1.0, 0.0)


def test_summary_table_hand_values(crafted):
    dqn, cov = harness.summary_table(crafted)
    assert dqn["recall_mean"] == pytest.approx(0.625) and dqn["precision_mean"] == 1.0
    assert dqn["path_length_mean"] == 3.5 and dqn["path_length_std"] == pytest.approx(math.sqrt(0.5))
    assert cov["precision_mean"] == pytest.approx(0.8) and cov["recall_mean"] == 1.0
    assert cov["path_length_mean"] == 5.0 and cov["path_length_std"] == 0.0


def test_mean_curves_hold_final_value(crafted):
    curves = harness.mean_curves(crafted)
    assert curves[(2, "dqn")] == pytest.approx([(0, 0.125), (1, 0.5), (2, 0.625), (3, 0.625), (4, 0.625)])
    assert [v for _, v in curves[(2, "coverage")]] == [0.0, 0.0, 1.0, 1.0, 1.0, 1.0]


def test_report_files_roundtrip(tmp_path, crafted):
    harness.report(crafted, tmp_path, steps=(1, 2))
    for name in ("runs.csv", "table_recall_at_steps.csv", "summary.csv", "curves.csv", "curves.svg"):
        assert (tmp_path / name).exists()
    assert sorted(p.name for p in (tmp_path / "traces").iterdir()) == ["a.jsonl", "b.jsonl", "c.jsonl"]
    rows = harness.read_runs_csv(tmp_path / "runs.csv")
    assert harness.recall_table(rows, (1, 2, 3)) == harness.recall_table(crafted, (1, 2, 3))
    assert rows[0]["curve"] == [(0, 0.25), (2, 0.5), (3, 0.5)]


def test_read_runs_csv_errors(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text(",".join(harness.RUN_COLUMNS) + "\n")
    with pytest.raises(ValueError, match="no runs"):
        harness.read_runs_csv(p)
    p.write_text("run_id,level\nx,2\n")
    with pytest.raises(ValueError, match="missing column"):
        harness.read_runs_csv(p)
    p.write_text(",".join(harness.RUN_COLUMNS) + "\nx,two,dqn,1,1,3,t,0,0,1,0,0,0:1\n")
    with pytest.raises(ValueError, match="malformed"):
        harness.read_runs_csv(p)


def test_svg_one_polyline_per_group(crafted):
    svg = harness.curves_svg(harness.mean_curves(crafted[:1]))
    assert svg.count("<polyline") == 1 and svg.startswith("<svg")
    svg = harness.curves_svg(harness.mean_curves(crafted))
    assert svg.count("<polyline") == 2
    assert "DQN level 2" in svg and "FCov level 2" in svg


def test_svg_golden():
    svg = harness.curves_svg({(1, "dqn"): [(0, 0.0), (2, 0.5), (4, 1.0)]}, width=300, height=200)
    # plot area: x 60..130 (70 px for 4 steps), y 20..150 (130 px for recall 0..1)
    assert ('points="60.00,150.00 95.00,150.00 95.00,85.00 130.00,85.00 130.00,20.00"') in svg
    assert svg == harness.curves_svg({(1, "dqn"): [(0, 0.0), (2, 0.5), (4, 1.0)]}, width=300, height=200)
