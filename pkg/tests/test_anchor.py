import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sflabel.anchor import (
    AnchorSet,
    GridSpec,
    SlopeConfig,
    SlopeState,
    adapt_slope,
    assign_points,
    box_motion_probability,
    init_anchor_grid,
    prune_boxes,
    residual_gain,
    soft_membership,
)
from sflabel.errors import ConfigError
from sflabel.geom import BoxParams


def test_grid_counts():
    grid = init_anchor_grid(((0, 0, -2), (20, 20, 2)), GridSpec())
    assert len(grid) == 50
    assert all(np.array_equal(b.size, [4.0, 1.8, 1.6]) for b in grid.boxes)
    assert sorted({b.heading for b in grid.boxes}) == [0.0, pytest.approx(math.pi / 2)]


def test_grid_smaller_than_stride():
    grid = init_anchor_grid(((0, 0, 0), (1, 2, 3)), GridSpec())
    assert len(grid) == 2
    for b in grid.boxes:
        np.testing.assert_allclose(b.center[:2], [0.5, 1.0])
        assert b.center[2] == pytest.approx(0.8)


def test_grid_rejects_bad_bounds():
    with pytest.raises(ConfigError):
        init_anchor_grid(((0, 0, 0), (-1, 1, 1)), GridSpec())
    with pytest.raises(ConfigError):
        init_anchor_grid(((0, 0, 0), (1, 1, 1)), GridSpec(stride=0))


def _members(counts):
    return AnchorSet([BoxParams((i * 10.0, 0, 0), (4, 1.8, 1.6)) for i in range(len(counts))],
                     [np.arange(c) for c in counts])


def test_prune_thresholds():
    out = prune_boxes(_members([0, 29, 30, 100]), 30)
    assert [b.center[0] for b in out.boxes] == [20.0, 30.0]
    assert len(prune_boxes(_members([0, 1]), 30)) == 0


def test_prune_cluster_scene():
    rng = np.random.default_rng(0)
    cluster = rng.normal([6.0, 6.0, -1.0], [0.8, 0.4, 0.3], (200, 3))
    grid = init_anchor_grid(((0, 0, -1.7), (20, 20, 2)), GridSpec(), cluster)
    touching = [k for k, m in enumerate(grid.members) if len(m) > 0]
    out = prune_boxes(grid, 30, cluster)
    assert 0 < len(out) <= len(touching)
    for b in out.boxes:
        assert np.linalg.norm(b.center[:2] - [6.0, 6.0]) < 1.0
    kept = {tuple(b.size) + (b.heading,) for b in out.boxes}
    assert kept <= {tuple(b.size) + (b.heading,) for b in grid.boxes}


def test_prune_recenters_on_centroid():
    pts = np.array([[1.0, 0.5, 0.1]] * 5 + [[1.2, 0.3, 0.1]] * 5)
    anchors = AnchorSet([BoxParams((0, 0, 0), (4, 1.8, 1.6))], [np.arange(10)])
    out = prune_boxes(anchors, 5, pts)
    np.testing.assert_allclose(out.boxes[0].center, pts.mean(axis=0))
    assert out.members[0].tolist() == list(range(10))


def test_assign_points():
    boxes = [BoxParams((0, 0, 0), (2, 2, 2)), BoxParams((5, 0, 0), (2, 2, 2))]
    pts = np.array([[0.5, 0, 0], [5, 0.9, 0], [3, 0, 0]])
    assert [m.tolist() for m in assign_points(pts, boxes)] == [[0], [1]]


def test_soft_membership_examples():
    box = BoxParams((0, 0, 0), (4, 1.8, 1.6))
    assert soft_membership(np.zeros(3), box, 50)[0] == pytest.approx(1.0, abs=1e-6)
    assert soft_membership([[12.0, 0, 0]], box, 50)[0] < 1e-9
    assert soft_membership([[2.0, 0, 0]], box, 50)[0] == pytest.approx(0.5, abs=1e-6)


def test_motion_probability_examples():
    w = np.array([0.2, 0.5, 1.0])
    r = np.array([0.3, 0.1, 0.7])
    assert box_motion_probability(w, residual_gain(r, r, 20.0)) == 0.5
    assert box_motion_probability(w, residual_gain([5.0] * 3, [0.0] * 3, 100.0)) == pytest.approx(1.0)
    assert box_motion_probability([1.0, 1.0], [1.0, 0.0]) == 0.5
    assert box_motion_probability([0.0, 0.0], [1.0, 1.0]) == 0.0


@given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.integers(0, 100))
def test_motion_probability_in_unit_interval(w, seed):
    g = np.random.default_rng(seed).random(len(w))
    assert 0.0 <= box_motion_probability(w, g) <= 1.0


def test_adapt_slope_examples():
    cfg = SlopeConfig()
    r = np.array([0.0, 1.0, 2.0, 3.0])
    v = float(np.var(r))
    assert adapt_slope(SlopeState(5.0, v_ref=v), r, cfg).alpha == pytest.approx(cfg.alpha_base)
    assert adapt_slope(SlopeState(5.0, v_ref=v), np.ones(4), cfg).alpha == cfg.alpha_min
    assert adapt_slope(SlopeState(5.0, v_ref=v / 2), r, cfg).alpha == pytest.approx(2 * cfg.alpha_base)
    s = adapt_slope(SlopeState(5.0), r, cfg)
    assert s.alpha == cfg.alpha_base and s.history == [v]


@given(st.floats(1e-6, 10), st.floats(0, 5), st.floats(0, 5))
def test_adapt_slope_monotone_and_clamped(v_ref, s1, s2):
    cfg = SlopeConfig()
    lo, hi = sorted([s1, s2])
    a = adapt_slope(SlopeState(5.0, v_ref=v_ref), np.array([-lo, lo]), cfg).alpha
    b = adapt_slope(SlopeState(5.0, v_ref=v_ref), np.array([-hi, hi]), cfg).alpha
    assert cfg.alpha_min <= a <= b <= cfg.alpha_max


def test_slope_config_validation():
    with pytest.raises(ConfigError):
        SlopeConfig(alpha_min=10, alpha_base=5).validate()
