import math

import numpy as np
import pytest
from oracles import central_difference_error

from sflabel.anchor import AnchorSet
from sflabel.config import PipelineConfig
from sflabel.errors import ConfigError, OptimizationError
from sflabel.evalkit import generate_synthetic_scene, random_scene_spec
from sflabel.geom import BoxParams, RigidTransform, rot_z, so3_exp, yaw_of
from sflabel.ingest import PointCloud
from sflabel.labelgen import point_owner
from sflabel.optim import (
    LossBreakdown,
    MotionState,
    OptimConfig,
    SceneMotion,
    SceneObjective,
    background_loss,
    box_regularizers,
    foreground_loss,
    nn_correspondences,
    optimize_scene,
    write_history_csv,
)
from sflabel.pipeline import build_anchors


def _wall(x=5.0, n=41):
    g = np.stack(np.meshgrid(np.linspace(-4, 4, n), np.linspace(-2, 2, n)), -1).reshape(-1, 2)
    pts = np.column_stack([np.full(len(g), x), g])
    return PointCloud(pts, None, np.tile([-1.0, 0, 0], (len(g), 1)))


def _motion(ego=None, boxes=(), per_box=None, p_m=None, members=None):
    k = len(boxes)
    return SceneMotion(
        ego or RigidTransform.identity(),
        per_box or [RigidTransform.identity() for _ in range(k)],
        list(p_m) if p_m is not None else [1.0] * k,
        AnchorSet(list(boxes), members or [np.zeros(0, int) for _ in range(k)]),
    )


def test_nn_examples():
    cloud = _wall()
    idx, d = nn_correspondences(cloud.points, cloud.normals, cloud.points, cloud.normals, 0.5, 2.0)
    assert np.array_equal(idx, np.arange(len(cloud))) and np.all(d == 0)
    _, d = nn_correspondences([[100.0, 0, 0]], [[1.0, 0, 0]], cloud.points, cloud.normals, 0.5, 1.0)
    assert d[0] == 1.0
    tgt = np.array([[1.0, 0, 0], [-1.0, 0, 0]])
    tn = np.array([[0, 0, 1.0], [1.0, 0, 0]])
    idx, _ = nn_correspondences([[0.0, 0, 0]], [[1.0, 0, 0]], tgt, tn, 0.5, 5.0)
    assert idx[0] == 1


def test_background_loss_examples():
    scene = generate_synthetic_scene(random_scene_spec(0, n_points=2000, noise=0.0, ground_points=0))
    truth = _motion(scene.spec.ego)
    assert background_loss(truth, scene.src, scene.tgt) < 1e-9
    wall = _wall()
    shifted = PointCloud(wall.points + [0.5, 0, 0], None, wall.normals)
    cfg = OptimConfig(tau_nn=100.0)
    assert background_loss(_motion(), wall, shifted, cfg) == pytest.approx(0.5 + cfg.delta_weight * 0.5)
    assert background_loss(_motion(RigidTransform(rot_z(0.3), [1, 2, 0])), wall, shifted) >= 0


def _object_scene(seed=2):
    spec = random_scene_spec(seed, n_dynamic=1, n_points=2000, noise=0.0, ground_points=0)
    return generate_synthetic_scene(spec)


def test_foreground_loss_examples():
    sc = _object_scene()
    assert foreground_loss(_motion(sc.spec.ego), sc.src, sc.tgt) == 0.0
    truth = sc.truth
    assert foreground_loss(truth, sc.src, sc.tgt) < 1e-9
    wrong = truth.copy()
    wrong.per_box[0] = RigidTransform(np.eye(3), [3.0, 0, 0])
    assert foreground_loss(wrong, sc.src, sc.tgt) > 0.1
    wrong.p_m = [0.0]
    assert foreground_loss(wrong, sc.src, sc.tgt) == 0.0


def test_regularizer_examples():
    box = BoxParams((0, 0, 0), (4.0, 1.8, 1.6), 0.3)
    src = PointCloud(np.zeros((10, 3)))
    zero = _motion(boxes=[box], members=[np.arange(10)])
    assert box_regularizers(zero, src) == pytest.approx((0, 0, 0, 0), abs=1e-12)

    along = _motion(boxes=[box], per_box=[RigidTransform(np.eye(3), [math.cos(0.3), math.sin(0.3), 0])],
                    members=[np.arange(10)])
    assert box_regularizers(along, src)[1] == pytest.approx(0.0, abs=1e-12)
    across = _motion(boxes=[box], per_box=[RigidTransform(np.eye(3), [-math.sin(0.3), math.cos(0.3), 0])],
                     members=[np.arange(10)])
    assert box_regularizers(across, src)[1] == pytest.approx(1.0)
    slow = _motion(boxes=[box], per_box=[RigidTransform(np.eye(3), [0, 0.1, 0])], members=[np.arange(10)])
    assert box_regularizers(slow, src)[1] == 0.0

    spun = _motion(boxes=[box], per_box=[RigidTransform(rot_z(0.2), [0, 0, 0])], members=[np.arange(10)])
    assert box_regularizers(spun, src)[2] == pytest.approx(0.04)

    pts = PointCloud(np.random.default_rng(0).uniform(-2, 2, (200, 3)) * [1, 0.9, 0.8])
    small = BoxParams((0, 0, 0), (1.0, 0.5, 0.5))
    shrunk = _motion(boxes=[small], members=[np.arange(200)])
    shrunk.alpha = 50.0
    assert box_regularizers(shrunk, pts)[3] > 0.5
    assert all(v >= 0 for v in box_regularizers(shrunk, pts))


def test_breakdown_total_and_csv(tmp_path):
    sc = _object_scene()
    cfg = OptimConfig()
    obj = SceneObjective(sc.src, sc.tgt, cfg)
    st = MotionState.from_motion(sc.truth).retract(np.full(19, 0.01))
    obj.refresh_assignment(st)
    bd = obj.evaluate(st, [0.7], 5.0).breakdown
    w = cfg.weights
    expected = (w.bg * bd.l_bg + w.fg * bd.l_fg + w.dim * bd.l_dim + w.heading * bd.l_heading
                + w.angle * bd.l_angle + w.mass * bd.l_mass)
    assert bd.total == pytest.approx(expected)
    write_history_csv([bd, bd], tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "iteration," + ",".join(LossBreakdown.COLUMNS) and len(lines) == 3


def test_analytic_gradient_small_scene():
    spec = random_scene_spec(1, n_dynamic=2, n_points=512, object_points=(60, 80), ground_points=0)
    sc = generate_synthetic_scene(spec)
    obj = SceneObjective(sc.src, sc.tgt, OptimConfig())
    st0 = MotionState.from_motion(sc.truth)
    obj.refresh_assignment(st0, sc.truth.boxes.members)
    rng = np.random.default_rng(3)
    for _ in range(5):
        st = st0.retract(rng.normal(0, 0.05, st0.dof))
        assert central_difference_error(obj, st, rng.random(st.k), rng.uniform(0.5, 50)) < 1e-4


def _cfg():
    return PipelineConfig()


def test_stationary_scene():
    spec = random_scene_spec(3, max_t=0, max_yaw_deg=0, noise=0.0, ground_points=0, n_points=3000)
    sc = generate_synthetic_scene(spec)
    anchors = build_anchors(sc.src.points, _cfg())
    assert len(anchors) > 0
    m, hist = optimize_scene(sc.src, sc.src, anchors, OptimConfig(iterations=120))
    assert np.allclose(m.ego.rotation, np.eye(3), atol=1e-9) and np.allclose(m.ego.translation, 0, atol=1e-9)
    assert max(m.p_m) <= 0.5
    assert hist[-1].l_bg + hist[-1].l_fg < 1e-6


def test_ego_recovery_example():
    spec = random_scene_spec(4, n_points=4096, ground_points=0)
    spec.ego = RigidTransform(rot_z(math.radians(2.0)), [1.0, 0.1, 0.0])
    sc = generate_synthetic_scene(spec)
    m, hist = optimize_scene(sc.src, sc.tgt, build_anchors(sc.src.points, _cfg()))
    assert abs(math.degrees(yaw_of(m.ego.rotation)) - 2.0) < 0.2
    assert np.linalg.norm(m.ego.translation - [1.0, 0.1, 0.0]) < 0.02
    assert hist[-1].total < hist[0].total


def test_single_box_recovery_example():
    spec = random_scene_spec(5, n_dynamic=1, n_points=4096, ground_points=0, max_t=0, max_yaw_deg=0)
    obj = spec.objects[0]
    obj.motion = RigidTransform(np.eye(3), [math.cos(obj.box.heading), math.sin(obj.box.heading), 0.0])
    sc = generate_synthetic_scene(spec)
    m, _ = optimize_scene(sc.src, sc.tgt, build_anchors(sc.src.points, _cfg()))
    owner = point_owner(sc.src.points[sc.segment == 0], m.boxes.boxes)
    k = np.bincount(owner[owner >= 0]).argmax()
    assert m.p_m[k] > 0.5
    assert np.linalg.norm(m.per_box[k].translation - obj.motion.translation) < 0.05


def test_empty_anchor_set_gives_ego_only():
    sc = generate_synthetic_scene(random_scene_spec(6, n_points=2000, ground_points=0))
    m, hist = optimize_scene(sc.src, sc.tgt, AnchorSet(), OptimConfig(iterations=60, warmup=10))
    assert m.per_box == [] and m.p_m == []
    assert len(hist) == 61


def test_non_finite_aborts():
    wall = _wall()
    bad = PointCloud(wall.points.copy(), None, wall.normals)
    bad.points[0, 0] = np.nan
    with pytest.raises((OptimizationError, ValueError)):
        optimize_scene(wall, bad, AnchorSet(), OptimConfig(iterations=5, warmup=5))


def test_translation_reexpression_invariance():
    spec = random_scene_spec(7, n_dynamic=1, n_points=3000, ground_points=0)
    sc = generate_synthetic_scene(spec)
    cfg = OptimConfig(iterations=150)
    shift = np.array([13.0, -7.0, 0.0])

    def flow(src, tgt):
        m, _ = optimize_scene(src, tgt, build_anchors(src.points, _cfg()), cfg)
        from sflabel.augment import unaugmented
        from sflabel.labelgen import synthesize_target
        return synthesize_target(src, m.boxes, unaugmented(m), 0.5).points - src.points

    f0 = flow(sc.src, sc.tgt)
    moved = lambda c: PointCloud(c.points + shift, None, c.normals)
    # re-expressing both clouds in a translated frame changes the ego translation
    # by (I - R) shift, but not the scene flow
    f1 = flow(moved(sc.src), moved(sc.tgt))
    assert np.median(np.linalg.norm(f0 - f1, axis=1)) < 1e-3


def test_config_validation():
    with pytest.raises(ConfigError):
        OptimConfig(iterations=0).validate()
    with pytest.raises(ConfigError):
        OptimConfig(warmup=400).validate()
    bad = OptimConfig()
    bad.weights.mass = -1
    with pytest.raises(ConfigError):
        bad.validate()
    with pytest.raises(ValueError):
        SceneMotion(RigidTransform.identity(), [RigidTransform.identity()], [], AnchorSet())
