import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import naive_metrics

from sflabel.config import PipelineConfig
from sflabel.errors import ConfigError, InvalidArgument
from sflabel.evalkit import (
    CSV_HEADER,
    SyntheticObject,
    SyntheticSceneSpec,
    Wall,
    boxes_overlap,
    compute_metrics,
    evaluate_pipeline,
    generate_synthetic_scene,
    random_scene_spec,
    scene_specs_from_dict,
)
from sflabel.geom import BoxParams, RigidTransform, rot_z
from sflabel.labelgen import FlowLabel

WALLS = [Wall((-10, 5), (10, 5)), Wall((-10, -5), (10, -5))]


def test_perfect_prediction():
    gt = np.random.default_rng(0).normal(size=(50, 3))
    m = compute_metrics(FlowLabel(gt), FlowLabel(gt))
    assert (m.epe3d, m.acc3ds, m.acc3dr, m.outliers) == (0.0, 1.0, 1.0, 0.0)


@pytest.mark.parametrize("err, expected", [(0.04, (1, 1, 0)), (0.2, (0, 0, 1)), (0.35, (0, 0, 1))])
def test_threshold_cases(err, expected):
    gt = np.array([[1.0, 0, 0]])
    m = compute_metrics(gt + [err, 0, 0], gt)
    assert (m.acc3ds, m.acc3dr, m.outliers) == expected
    assert m.epe3d == pytest.approx(err)


def test_count_mismatch():
    with pytest.raises(InvalidArgument):
        compute_metrics(np.zeros((3, 3)), np.zeros((4, 3)))


@given(st.integers(0, 100_000), st.integers(1, 60))
def test_matches_naive_loop(seed, n):
    rng = np.random.default_rng(seed)
    gt = rng.normal(scale=rng.uniform(0.01, 2), size=(n, 3))
    gt[rng.random(n) < 0.2] = 0.0
    pred = gt + rng.normal(scale=rng.uniform(0.001, 0.5), size=(n, 3))
    m = compute_metrics(pred, gt)
    epe, s, r, o = naive_metrics(pred, gt)
    assert m.epe3d == pytest.approx(epe, rel=1e-12)
    assert (m.acc3ds, m.acc3dr, m.outliers) == (s, r, o)
    assert m.acc3ds <= m.acc3dr


def test_scene_identity_is_static():
    sc = generate_synthetic_scene(SyntheticSceneSpec(walls=WALLS, n_points=500))
    assert np.all(sc.gt_flow == 0)
    np.testing.assert_array_equal(sc.tgt.points, sc.src.points)


def test_scene_ego_translation():
    sc = generate_synthetic_scene(SyntheticSceneSpec(RigidTransform(np.eye(3), [1, 0, 0]), walls=WALLS, n_points=500))
    np.testing.assert_allclose(sc.gt_flow, np.tile([1.0, 0, 0], (500, 1)), atol=1e-12)


def test_scene_box_translation():
    obj = SyntheticObject(BoxParams((0, 0, -1), (4, 2, 1.5)), RigidTransform(np.eye(3), [0, 1, 0]), 100)
    sc = generate_synthetic_scene(SyntheticSceneSpec(objects=[obj], walls=WALLS, n_points=600))
    np.testing.assert_allclose(sc.gt_flow[sc.segment == 0], np.tile([0, 1.0, 0], (100, 1)), atol=1e-12)
    assert np.all(sc.gt_flow[sc.segment != 0] == 0)
    assert sc.truth.p_m == [1.0]


def test_overlapping_objects_rejected():
    a = SyntheticObject(BoxParams((0, 0, 0), (4, 2, 2)))
    b = SyntheticObject(BoxParams((1, 0.5, 0), (4, 2, 2), 0.7))
    assert boxes_overlap(a.box, b.box)
    with pytest.raises(InvalidArgument):
        generate_synthetic_scene(SyntheticSceneSpec(objects=[a, b], walls=WALLS, n_points=1000))
    far = BoxParams((2.0, 5.0, 0), (4, 2, 2), 0.3)
    assert not boxes_overlap(a.box, far)


@given(st.integers(0, 10_000))
def test_gt_flow_reconstructs_clean_target(seed):
    sc = generate_synthetic_scene(random_scene_spec(seed, n_dynamic=(0, 3), n_points=2000, ground_points=200))
    np.testing.assert_allclose(sc.src.points + sc.gt_flow, sc.tgt_clean, atol=1e-12, rtol=0)
    assert np.all(np.abs(np.linalg.norm(sc.tgt.normals, axis=1) - 1) < 1e-9)


def test_scene_is_deterministic():
    a = generate_synthetic_scene(random_scene_spec(5, n_dynamic=2, n_points=3000))
    b = generate_synthetic_scene(random_scene_spec(5, n_dynamic=2, n_points=3000))
    assert a.tgt.points.tobytes() == b.tgt.points.tobytes()


def test_random_spec_respects_limits():
    for seed in range(20):
        spec = random_scene_spec(seed, n_dynamic=(2, 4))
        assert 2 <= len(spec.objects) <= 4
        assert np.linalg.norm(spec.ego.translation) <= 2.0
        for o in spec.objects:
            assert np.linalg.norm(o.motion.translation) <= 1.5
            assert abs(np.degrees(np.arctan2(o.motion.rotation[1, 0], o.motion.rotation[0, 0]))) <= 10.0


def test_spec_file_errors_carry_field_path():
    with pytest.raises(ConfigError, match=r"scenes\[1\]\.n_points"):
        scene_specs_from_dict({"scenes": [{"seed": 1}, {"seed": 2, "n_points": "many"}]})
    with pytest.raises(ConfigError, match=r"scenes\[0\]\.colour"):
        scene_specs_from_dict({"scenes": [{"seed": 1, "colour": 3}]})
    with pytest.raises(ConfigError, match=r"scenes\[0\]\.seed"):
        scene_specs_from_dict([{}])
    specs = scene_specs_from_dict({"scenes": [{"seed": 1, "n_dynamic": [2, 3], "scene_id": "x"}]})
    assert specs[0].scene_id == "x"


@pytest.fixture(scope="module")
def stationary_batch(tmp_path_factory):
    cfg = PipelineConfig()
    cfg.optim.iterations = 80
    specs = [random_scene_spec(s, max_t=0.0, max_yaw_deg=0.0, n_points=3000, ground_points=300, noise=0.0)
             for s in (11, 12)]
    path = tmp_path_factory.mktemp("bench") / "report.csv"
    agg, reports = evaluate_pipeline(specs, cfg, csv_path=path)
    return agg, reports, path


def test_stationary_batch_is_near_zero(stationary_batch):
    agg, reports, _ = stationary_batch
    assert agg["mean"].epe3d < 1e-3
    assert all(r.metrics.epe3d < 1e-3 for r in reports)


def test_report_csv_rows(stationary_batch):
    _, reports, path = stationary_batch
    rows = list(csv.reader(open(path)))
    assert tuple(rows[0]) == CSV_HEADER
    assert len(rows) == 1 + len(reports) + 1
    assert rows[-1][0] == "mean"
