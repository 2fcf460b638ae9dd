"""Motion augmentation: Lie-algebra rotation noise and bounded additive noise.

Every channel draws from a normal distribution truncated at three standard
deviations. Per-box motions are only perturbed for dynamic boxes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import truncnorm

from .errors import ConfigError
from .geom import RigidTransform, compose_rotation, so3_exp

TRUNCATION = 3.0


@dataclass
class AugmentPolicy:
    sigma_r_ego: float = 0.017
    sigma_t_ego: float = 0.5
    sigma_r: float = 0.035
    sigma_t: float = 0.3
    sigma_p: float = 0.05
    k_aug: int = 8
    seed: int = 0

    def validate(self):
        scales = [self.sigma_r_ego, self.sigma_t_ego, self.sigma_r, self.sigma_t, self.sigma_p]
        if any(s < 0 for s in scales) or self.k_aug < 1:
            raise ConfigError(f"invalid augment policy: {self}")
        return self


@dataclass
class AugmentedScene:
    ego: RigidTransform
    per_box: list
    p_m: list
    provenance: dict = field(default_factory=dict)


def truncated_std(sigma: float, bound: float = TRUNCATION) -> float:
    """Standard deviation of N(0, sigma^2) truncated to ``|x| <= bound * sigma``."""
    return float(sigma * truncnorm.std(-bound, bound))


def _truncated(sigma: float, rng, size=None):
    if sigma == 0:
        return np.zeros(size) if size is not None else 0.0
    # rejection from the untruncated normal: exact, accepts 99.7% at 3 sigma, and
    # avoids the per-call overhead of truncnorm.rvs for scalar draws
    n = 1 if size is None else int(np.prod(size))
    out = np.empty(n)
    filled = 0
    while filled < n:
        z = rng.standard_normal(n - filled)
        z = z[np.abs(z) <= TRUNCATION]
        out[filled:filled + z.size] = z
        filled += z.size
    out *= sigma
    return float(out[0]) if size is None else out.reshape(size)


def draw_rotation_noise(sigma_r: float, rng) -> tuple[float, np.ndarray]:
    """Angle from the truncated normal and an axis uniform on the sphere."""
    angle = float(_truncated(sigma_r, rng))
    u = rng.standard_normal(3)
    u /= np.linalg.norm(u)
    return angle, u


def perturb_rotation(r: np.ndarray, sigma_r: float, rng) -> np.ndarray:
    """``r @ so3_exp(angle * axis)``; returns ``r`` untouched when ``sigma_r == 0``."""
    if sigma_r == 0:
        return np.array(r, dtype=float, copy=True)
    angle, u = draw_rotation_noise(sigma_r, rng)
    return compose_rotation(r, so3_exp(angle * u))


def perturb_translation(t: np.ndarray, sigma_t: float, rng) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    if sigma_t == 0:
        return t.copy()
    return t + _truncated(sigma_t, rng, size=3)


def perturb_probability(p: float, sigma_p: float, rng) -> float:
    if sigma_p == 0:
        return float(p)
    return float(np.clip(p + _truncated(sigma_p, rng), 0.0, 1.0))


def _perturb_transform(tf: RigidTransform, sigma_r: float, sigma_t: float, rng):
    rec = {}
    rot = tf.rotation.copy()
    if sigma_r > 0:
        angle, u = draw_rotation_noise(sigma_r, rng)
        rot = compose_rotation(tf.rotation, so3_exp(angle * u))
        rec["rotation_angle"] = angle
        rec["rotation_axis"] = [float(v) for v in u]
    trans = tf.translation.copy()
    if sigma_t > 0:
        eps = _truncated(sigma_t, rng, size=3)
        trans = trans + eps
        rec["translation_noise"] = [float(v) for v in eps]
    return RigidTransform(rot, trans), rec


def variant_rng(seed: int, variant: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(variant)]))


def augment_scene(motion, policy: AugmentPolicy, threshold: float, seed: int | None = None) -> list:
    """Draw ``policy.k_aug`` augmented copies of a fitted :class:`~sflabel.optim.SceneMotion`.

    Variant ``v`` uses its own generator seeded from ``(seed, v)``.
    """
    policy.validate()
    seed = policy.seed if seed is None else seed
    out = []
    for v in range(policy.k_aug):
        rng = variant_rng(seed, v)
        ego, ego_rec = _perturb_transform(motion.ego, policy.sigma_r_ego, policy.sigma_t_ego, rng)
        per_box, p_m, box_recs = [], [], []
        for tf, p in zip(motion.per_box, motion.p_m):
            dynamic = p >= threshold
            if dynamic:
                new_tf, rec = _perturb_transform(tf, policy.sigma_r, policy.sigma_t, rng)
            else:
                new_tf, rec = tf.copy(), {}
            new_p = perturb_probability(p, policy.sigma_p, rng)
            rec.update(dynamic=bool(dynamic), p_m=float(p), p_m_noise=float(new_p - p))
            per_box.append(new_tf)
            p_m.append(new_p)
            box_recs.append(rec)
        provenance = {
            "seed": int(seed),
            "variant": v,
            "ego": ego_rec,
            "boxes": box_recs,
            "source_ego": motion.ego.to_dict(),
            "source_per_box": [tf.to_dict() for tf in motion.per_box],
        }
        out.append(AugmentedScene(ego, per_box, p_m, provenance))
    return out


def unaugmented(motion) -> AugmentedScene:
    """The fitted motion itself, as an :class:`AugmentedScene`."""
    return AugmentedScene(
        motion.ego.copy(), [tf.copy() for tf in motion.per_box], [float(p) for p in motion.p_m], {"variant": None}
    )
