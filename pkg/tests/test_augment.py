import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import truncnorm

from sflabel.anchor import AnchorSet
from sflabel.augment import (
    AugmentPolicy,
    augment_scene,
    draw_rotation_noise,
    perturb_probability,
    perturb_rotation,
    perturb_translation,
    truncated_std,
    unaugmented,
)
from sflabel.errors import ConfigError
from sflabel.geom import BoxParams, RigidTransform, is_rotation, so3_exp
from sflabel.optim import SceneMotion

ZERO = AugmentPolicy(0, 0, 0, 0, 0, k_aug=1)


def _motion(p_m=(0.1, 0.9)):
    boxes = [BoxParams((i * 10.0, 0, 0), (4, 1.8, 1.6)) for i in range(len(p_m))]
    per_box = [RigidTransform(so3_exp([0, 0, 0.05 * (i + 1)]), [0.5 * i, 0.2, 0]) for i in range(len(p_m))]
    return SceneMotion(RigidTransform(so3_exp([0.01, 0.02, 0.03]), [1, 0, 0]), per_box, list(p_m),
                       AnchorSet(boxes, [np.arange(3) for _ in boxes]))


def test_truncated_std_matches_scipy():
    assert truncated_std(1.0) == pytest.approx(truncnorm.std(-3, 3))
    assert truncated_std(0.0) == 0.0


def test_zero_scales_are_identity():
    rng = np.random.default_rng(0)
    r = so3_exp([0.2, 0.1, -0.3])
    assert np.array_equal(perturb_rotation(r, 0.0, rng), r)
    assert np.array_equal(perturb_translation(np.ones(3), 0.0, rng), np.ones(3))
    assert perturb_probability(0.3, 0.0, rng) == 0.3
    m = _motion()
    (aug,) = augment_scene(m, ZERO, 0.5, seed=1)
    assert np.array_equal(aug.ego.rotation, m.ego.rotation)
    assert np.array_equal(aug.ego.translation, m.ego.translation)
    for a, b in zip(aug.per_box, m.per_box):
        assert np.array_equal(a.rotation, b.rotation) and np.array_equal(a.translation, b.translation)
    assert aug.p_m == m.p_m


def test_rotation_from_recorded_draw():
    a, b = np.random.default_rng(5), np.random.default_rng(5)
    angle, u = draw_rotation_noise(0.1, a)
    np.testing.assert_allclose(perturb_rotation(np.eye(3), 0.1, b), so3_exp(angle * u), atol=1e-15)


def test_static_boxes_bitwise_unchanged():
    m = _motion()
    for aug in augment_scene(m, AugmentPolicy(sigma_r=0.1, sigma_t=0.5, k_aug=4), 0.5, seed=3):
        assert aug.per_box[0].rotation.tobytes() == m.per_box[0].rotation.tobytes()
        assert aug.per_box[0].translation.tobytes() == m.per_box[0].translation.tobytes()
        assert not np.array_equal(aug.per_box[1].rotation, m.per_box[1].rotation)
        assert aug.provenance["boxes"][0]["dynamic"] is False


def test_deterministic_per_seed():
    m = _motion()
    pol = AugmentPolicy(k_aug=3)
    a = augment_scene(m, pol, 0.5, seed=9)
    b = augment_scene(m, pol, 0.5, seed=9)
    for x, y in zip(a, b):
        assert np.array_equal(x.ego.rotation, y.ego.rotation) and x.p_m == y.p_m
        assert x.provenance == y.provenance
    c = augment_scene(m, pol, 0.5, seed=10)
    assert not np.array_equal(a[0].ego.translation, c[0].ego.translation)


def test_variants_independent_of_count():
    m = _motion()
    few = augment_scene(m, AugmentPolicy(k_aug=2), 0.5, seed=4)
    many = augment_scene(m, AugmentPolicy(k_aug=5), 0.5, seed=4)
    assert np.array_equal(few[1].ego.translation, many[1].ego.translation)


@given(st.floats(0, 0.5), st.integers(0, 10_000))
def test_perturbed_rotations_valid(sigma, seed):
    r = perturb_rotation(so3_exp([0.3, -1.0, 2.0]), sigma, np.random.default_rng(seed))
    assert is_rotation(r, 1e-9)


def test_probability_bounds_and_clamp():
    rng = np.random.default_rng(0)
    draws = np.array([perturb_probability(0.5, 0.05, rng) for _ in range(10_000)])
    assert draws.min() >= 0.35 and draws.max() <= 0.65
    ones = [perturb_probability(1.0, 0.05, rng) for _ in range(200)]
    assert max(ones) == 1.0 and min(ones) >= 0.85


def test_monte_carlo_scales():
    rng = np.random.default_rng(123)
    n = 10_000
    angles = np.array([draw_rotation_noise(0.02, rng)[0] for _ in range(n)])
    assert abs(angles.std() / truncated_std(0.02) - 1) < 0.1
    assert abs(angles.mean()) < 3 * angles.std() / np.sqrt(n)
    eps = np.array([perturb_translation(np.zeros(3), 0.1, rng) for _ in range(n)])
    assert np.all(np.abs(eps) <= 0.3)
    np.testing.assert_array_less(np.abs(eps.std(axis=0) / truncated_std(0.1) - 1), 0.1)
    assert np.all(np.abs(eps.mean(axis=0)) < 3 * eps.std(axis=0) / np.sqrt(n))


def test_unaugmented_copies_motion():
    m = _motion()
    u = unaugmented(m)
    assert np.array_equal(u.ego.rotation, m.ego.rotation) and u.p_m == m.p_m
    u.per_box[0].translation[0] = 99
    assert m.per_box[0].translation[0] != 99


def test_policy_validation():
    with pytest.raises(ConfigError):
        AugmentPolicy(sigma_t=-1).validate()
    with pytest.raises(ConfigError):
        AugmentPolicy(k_aug=0).validate()
