"""Rigid motion decomposition: ego-motion, per-box motions, box geometry, motion probability.

The objective is the weighted sum of six terms

* background: every source point warped by the ego transform, compared to the
  target by a truncated nearest-neighbour distance over ``[xyz, lam * normal]``
  plus a symmetric truncated chamfer distance on positions;
* foreground: the same two distances per box, on the box's member points
  warped by ego then by the box motion (rotation about the ego-moved box
  centre), weighted by the box's motion probability and averaged over boxes;
* four box regularisers (dimension prior, heading/translation alignment,
  spin magnitude, point mass inside the soft box).

Gradients are analytic. Nearest-neighbour assignments are held fixed inside
one evaluation, which gives the exact gradient almost everywhere. Rotations
are updated by left-multiplying ``so3_exp(step)``.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields

import numpy as np
from scipy.spatial import cKDTree

from . import kernels
from .anchor import (
    AnchorSet,
    SlopeConfig,
    SlopeState,
    adapt_slope,
    assign_points,
    box_motion_probability,
    residual_gain,
)
from .errors import ConfigError, OptimizationError
from .geom import BoxParams, RigidTransform, so3_exp, so3_log, wrap_angle, yaw_of
from .ingest import PointCloud

log = logging.getLogger(__name__)

# separates per-box point sets inside one shared KD-tree
_BOX_OFFSET = 1.0e4
# distances below this count as exact matches: the kink of |d| at 0 would
# otherwise turn rounding noise into unit-length gradients
_D_EPS = 1.0e-9
_MIN_SIZE = 0.1


@dataclass
class LossWeights:
    bg: float = 1.0
    fg: float = 1.0
    dim: float = 0.1
    heading: float = 0.1
    angle: float = 0.1
    mass: float = 0.5


@dataclass
class OptimConfig:
    iterations: int = 300
    warmup: int = 50
    generation: int = 25
    tau_nn: float = 2.0
    normal_weight: float = 0.5
    delta_weight: float = 1.0
    t_still: float = 0.2
    size_prior: tuple = (4.0, 1.8, 1.6)
    weights: LossWeights = field(default_factory=LossWeights)
    lr_rotation: float = 0.02
    lr_translation: float = 0.05
    lr_geometry: float = 0.01
    lr_final_fraction: float = 0.01
    region_margin: float = 0.0
    mass_margin: float = 1.0
    tolerance: float = 1e-6
    slope: SlopeConfig = field(default_factory=SlopeConfig)

    def validate(self):
        positive = [
            self.iterations, self.generation, self.tau_nn, self.normal_weight, self.lr_rotation,
            self.lr_translation, self.lr_geometry, self.lr_final_fraction, self.tolerance,
        ]
        if self.iterations < 1 or any(v <= 0 for v in positive):
            raise ConfigError(f"optim values must be positive: {self}")
        if not (0 <= self.warmup <= self.iterations):
            raise ConfigError("warmup must lie in [0, iterations]")
        if any(getattr(self.weights, f.name) < 0 for f in fields(self.weights)):
            raise ConfigError("loss weights must be non-negative")
        if min(self.delta_weight, self.region_margin, self.mass_margin, self.t_still) < 0:
            raise ConfigError("delta_weight, margins and t_still must be non-negative")
        if min(self.size_prior) <= 0:
            raise ConfigError("size_prior must be positive")
        self.slope.validate()
        return self


@dataclass
class SceneMotion:
    ego: RigidTransform
    per_box: list
    p_m: list
    boxes: AnchorSet
    alpha: float = 5.0

    def __post_init__(self):
        if not (len(self.per_box) == len(self.p_m) == len(self.boxes)):
            raise ValueError("per_box, p_m and boxes must have equal length")

    def copy(self) -> "SceneMotion":
        return SceneMotion(
            self.ego.copy(), [m.copy() for m in self.per_box], list(self.p_m), self.boxes.copy(), self.alpha
        )


@dataclass
class LossBreakdown:
    l_bg: float
    l_fg: float
    l_dim: float
    l_heading: float
    l_angle: float
    l_mass: float
    total: float

    COLUMNS = ("l_bg", "l_fg", "l_dim", "l_heading", "l_angle", "l_mass", "total")

    def as_row(self) -> list:
        return [getattr(self, c) for c in self.COLUMNS]


def write_history_csv(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("iteration",) + LossBreakdown.COLUMNS)
        for i, b in enumerate(history):
            w.writerow([i] + [repr(float(v)) for v in b.as_row()])


# -- correspondences -----------------------------------------------------------


class TargetIndex:
    """Immutable KD-trees over the target: 6-D ``[xyz, lam * n]`` and 3-D ``xyz``."""

    def __init__(self, points: np.ndarray, normals: np.ndarray, lam: float):
        self.points = np.ascontiguousarray(points, dtype=float)
        self.normals = np.ascontiguousarray(normals, dtype=float)
        self.lam = float(lam)
        self.tree6 = cKDTree(np.hstack([self.points, self.lam * self.normals]))
        self.tree3 = cKDTree(self.points)


def nn_correspondences(query_pts, query_normals, target_pts, target_normals, lam, tau, index=None):
    """Nearest target per query under ``|dp|^2 + lam^2 |dn|^2``; distances capped at ``tau``."""
    index = index or TargetIndex(target_pts, target_normals, lam)
    q = np.hstack([np.asarray(query_pts, float), index.lam * np.asarray(query_normals, float)])
    dist, idx = index.tree6.query(q)
    return idx, np.minimum(dist, tau)


def _unit_or_zero(diff, dist, active):
    scale = np.where(active, 1.0 / np.where(dist > 0, dist, 1.0), 0.0)
    return diff * scale[:, None]


def _segsum(idx, vals, n):
    vals = np.asarray(vals, dtype=float)
    if vals.ndim == 1:
        return np.bincount(idx, weights=vals, minlength=n)
    return np.stack([np.bincount(idx, weights=vals[:, j], minlength=n) for j in range(vals.shape[1])], axis=1)


# -- parameter state ------------------------------------------------------------


@dataclass
class MotionState:
    """Flat view of every optimised parameter.

    Gradient/step layout: ego ``[rot(3), trans(3)]`` then per box
    ``[rot(3), trans(3), center(3), size(3), heading(1)]``.
    """

    ego_r: np.ndarray
    ego_t: np.ndarray
    rot: np.ndarray  # (K, 3, 3)
    trans: np.ndarray  # (K, 3)
    center: np.ndarray  # (K, 3)
    size: np.ndarray  # (K, 3)
    heading: np.ndarray  # (K,)

    BOX_DOF = 13

    @property
    def k(self) -> int:
        return self.trans.shape[0]

    @property
    def dof(self) -> int:
        return 6 + self.BOX_DOF * self.k

    @classmethod
    def from_motion(cls, motion: SceneMotion) -> "MotionState":
        k = len(motion.boxes)
        return cls(
            motion.ego.rotation.copy(),
            motion.ego.translation.copy(),
            np.array([m.rotation for m in motion.per_box]).reshape(k, 3, 3),
            np.array([m.translation for m in motion.per_box]).reshape(k, 3),
            np.array([b.center for b in motion.boxes.boxes]).reshape(k, 3),
            np.array([b.size for b in motion.boxes.boxes]).reshape(k, 3),
            np.array([b.heading for b in motion.boxes.boxes], dtype=float).reshape(k),
        )

    def copy(self) -> "MotionState":
        return MotionState(*(np.array(getattr(self, f.name), copy=True) for f in fields(self)))

    def boxes(self) -> list:
        return [BoxParams(self.center[k], self.size[k], self.heading[k]) for k in range(self.k)]

    def box_rows(self) -> np.ndarray:
        """``(K, 7)`` kernel rows with half sizes."""
        return np.hstack([self.center, 0.5 * self.size, self.heading[:, None]])

    def retract(self, step: np.ndarray) -> "MotionState":
        """Apply an additive step in the layout above (rotations via left ``so3_exp``)."""
        s = self.copy()
        step = np.asarray(step, dtype=float)
        s.ego_r = so3_exp(step[0:3]) @ s.ego_r
        s.ego_t = s.ego_t + step[3:6]
        if s.k:
            b = step[6:].reshape(s.k, self.BOX_DOF)
            for k in range(s.k):
                if np.any(b[k, 0:3]):
                    s.rot[k] = so3_exp(b[k, 0:3]) @ s.rot[k]
            s.trans = s.trans + b[:, 3:6]
            s.center = s.center + b[:, 6:9]
            s.size = s.size + b[:, 9:12]
            s.heading = s.heading + b[:, 12]
        return s

    def canonicalize(self):
        self.size = np.maximum(self.size, _MIN_SIZE)
        self.heading = np.array([wrap_angle(h) for h in self.heading])


# -- objective ------------------------------------------------------------------


@dataclass
class Evaluation:
    breakdown: LossBreakdown
    grad: np.ndarray | None
    r_ego: np.ndarray  # per source point truncated 6-D residual under ego warp
    r_box: np.ndarray  # per (point, box) pair truncated 6-D residual under box warp


class SceneObjective:
    """Loss and gradient for one source/target pair."""

    def __init__(self, src: PointCloud, tgt: PointCloud, cfg: OptimConfig, index: TargetIndex | None = None):
        if src.normals is None or tgt.normals is None:
            raise ValueError("source and target clouds need normals")
        self.cfg = cfg
        self.p = np.ascontiguousarray(src.points, dtype=float)
        self.n = np.ascontiguousarray(src.normals, dtype=float)
        self.index = index or TargetIndex(tgt.points, tgt.normals, cfg.normal_weight)
        self.q = self.index.points
        self.m = self.index.normals
        self.set_members([])

    def set_regions(self, st: "MotionState"):
        """Freeze the per-box point sets that depend on box geometry.

        ``region``: target points inside each box moved by the current motion
        (reverse chamfer). ``neighbours``: source points within
        ``cfg.mass_margin`` of each box (mass term).
        """
        if st.k == 0:
            self.region = np.zeros((0, len(self.q)), dtype=np.uint8)
            self.neighbours = []
            return
        region = kernels.points_in_boxes(self.q, self.moved_box_rows(st, self.cfg.region_margin))
        region[self.counts == 0] = 0
        self.region = region
        near = kernels.points_in_boxes(self.p, st.box_rows(), self.cfg.mass_margin)
        self.neighbours = [np.flatnonzero(row) for row in near]

    def refresh_assignment(self, st: "MotionState", members: list | None = None):
        self.set_members(assign_points(self.p, st.boxes()) if members is None else members)
        self.set_regions(st)

    def set_members(self, members: list):
        self.members = [np.asarray(m, dtype=np.int64) for m in members]
        counts = np.array([len(m) for m in self.members], dtype=np.int64)
        self.counts = counts
        if counts.sum():
            self.pair_pt = np.concatenate(self.members)
            self.pair_box = np.repeat(np.arange(len(counts)), counts)
        else:
            self.pair_pt = np.zeros(0, np.int64)
            self.pair_box = np.zeros(0, np.int64)

    # background -------------------------------------------------------------
    def _background(self, st: MotionState, want_grad: bool):
        cfg = self.cfg
        tau, lam, wd = cfg.tau_nn, self.index.lam, cfg.delta_weight
        x = self.p @ st.ego_r.T + st.ego_t
        nr = self.n @ st.ego_r.T
        n_src, n_tgt = len(x), len(self.q)

        d6, j6 = self.index.tree6.query(np.hstack([x, lam * nr]))
        r6 = np.minimum(d6, tau)
        d3, j3 = self.index.tree3.query(x)
        db, lb = cKDTree(x).query(self.q)
        kappa = r6.mean()
        delta = 0.5 * (np.minimum(d3, tau).mean() + np.minimum(db, tau).mean())
        loss = kappa + wd * delta
        if not want_grad:
            return loss, None, r6

        a6 = (d6 < tau) & (d6 > _D_EPS)
        gx = _unit_or_zero(x - self.q[j6], d6, a6) / n_src
        gn = lam * lam * _unit_or_zero(nr - self.m[j6], d6, a6) / n_src
        gx += 0.5 * wd * _unit_or_zero(x - self.q[j3], d3, (d3 < tau) & (d3 > _D_EPS)) / n_src
        gb = 0.5 * wd * _unit_or_zero(x[lb] - self.q, db, (db < tau) & (db > _D_EPS)) / n_tgt
        gx += _segsum(lb, gb, n_src)
        g_rot = np.cross(x - st.ego_t, gx).sum(axis=0) + np.cross(nr, gn).sum(axis=0)
        return loss, np.concatenate([g_rot, gx.sum(axis=0)]), r6

    # foreground ---------------------------------------------------------------
    def moved_box_rows(self, st: MotionState, margin: float = 0.0) -> np.ndarray:
        ctr = st.center @ st.ego_r.T + st.ego_t + st.trans
        ego_yaw = yaw_of(st.ego_r)
        yaw = np.array([st.heading[k] + ego_yaw + yaw_of(st.rot[k]) for k in range(st.k)])
        return np.hstack([ctr, 0.5 * st.size + margin, yaw[:, None]])

    def _foreground(self, st: MotionState, p_m: np.ndarray, want_grad: bool):
        cfg = self.cfg
        K = st.k
        grad = np.zeros(6 + MotionState.BOX_DOF * K) if want_grad else None
        if K == 0 or len(self.pair_pt) == 0:
            return 0.0, np.zeros(K), grad, np.zeros(0)
        tau, lam, wd = cfg.tau_nn, self.index.lam, cfg.delta_weight
        pp, pb = self.pair_pt, self.pair_box
        cnt = np.maximum(self.counts, 1).astype(float)

        Re, te = st.ego_r, st.ego_t
        Rk = st.rot[pb]
        b = (self.p[pp] - st.center[pb]) @ Re.T
        a = np.einsum("pij,pj->pi", Rk, b)
        anchor = st.center @ Re.T + te + st.trans
        y = a + anchor[pb]
        m0 = self.n[pp] @ Re.T
        nt = np.einsum("pij,pj->pi", Rk, m0)

        d6, j6 = self.index.tree6.query(np.hstack([y, lam * nt]))
        r6 = np.minimum(d6, tau)
        d3, j3 = self.index.tree3.query(y)
        kappa_k = np.bincount(pb, weights=r6, minlength=K) / cnt
        fwd_k = np.bincount(pb, weights=np.minimum(d3, tau), minlength=K) / cnt

        # reverse chamfer: frozen target region of each box against that box's points
        rk, rj = np.nonzero(self.region)
        reg_cnt = np.bincount(rk, minlength=K).astype(float)
        bwd_k = np.zeros(K)
        if rk.size:
            off = np.zeros((K, 3))
            off[:, 0] = _BOX_OFFSET * np.arange(K)
            db_raw, lb = cKDTree(y + off[pb]).query(self.q[rj] + off[rk])
            diff_b = y[lb] - self.q[rj]
            db = np.sqrt(np.einsum("ij,ij->i", diff_b, diff_b))
            bwd_k = np.bincount(rk, weights=np.minimum(db, tau), minlength=K) / np.maximum(reg_cnt, 1.0)

        fg_k = kappa_k + wd * 0.5 * (fwd_k + bwd_k)
        loss = float((p_m * fg_k).sum() / K)
        if not want_grad:
            return loss, fg_k, None, r6

        scale = p_m / K
        sp = (scale / cnt)[pb]
        a6 = (d6 < tau) & (d6 > _D_EPS)
        gy = sp[:, None] * _unit_or_zero(y - self.q[j6], d6, a6)
        gn = (lam * lam * sp)[:, None] * _unit_or_zero(nt - self.m[j6], d6, a6)
        gy += (0.5 * wd * sp)[:, None] * _unit_or_zero(y - self.q[j3], d3, (d3 < tau) & (d3 > _D_EPS))
        if rk.size:
            sb = 0.5 * wd * scale[rk] / reg_cnt[rk]
            gb = sb[:, None] * _unit_or_zero(diff_b, db, (db < tau) & (db > _D_EPS))
            gy += _segsum(lb, gb, len(y))

        RkT_gy = np.einsum("pji,pj->pi", Rk, gy)
        RkT_gn = np.einsum("pji,pj->pi", Rk, gn)
        ce = st.center @ Re.T
        g_ego_rot = (
            np.cross(b, RkT_gy).sum(axis=0)
            + np.cross(ce[pb], gy).sum(axis=0)
            + np.cross(m0, RkT_gn).sum(axis=0)
        )
        gy_sum = gy.sum(axis=0)
        grad[0:3] += g_ego_rot
        grad[3:6] += gy_sum
        box = grad[6:].reshape(K, MotionState.BOX_DOF)
        box[:, 0:3] += _segsum(pb, np.cross(a, gy) + np.cross(nt, gn), K)
        box[:, 3:6] += _segsum(pb, gy, K)
        box[:, 6:9] += _segsum(pb, (gy - RkT_gy) @ Re, K)
        return loss, fg_k, grad, r6

    # regularisers -------------------------------------------------------------
    def _regularizers(self, st: MotionState, alpha: float, want_grad: bool):
        cfg = self.cfg
        K = st.k
        grad = np.zeros((K, MotionState.BOX_DOF)) if want_grad else None
        if K == 0:
            return (0.0, 0.0, 0.0, 0.0), grad
        prior = np.asarray(cfg.size_prior, dtype=float)

        ds = st.size - prior
        l_dim = float((ds * ds).sum() / K)

        l_head = 0.0
        c, s = np.cos(st.heading), np.sin(st.heading)
        tx, ty = st.trans[:, 0], st.trans[:, 1]
        nt2 = tx * tx + ty * ty
        moving = (np.linalg.norm(st.trans, axis=1) > cfg.t_still) & (nt2 > 0)
        cr = c * ty - s * tx
        dot = c * tx + s * ty
        safe = np.where(moving, nt2, 1.0)
        l_head = float(np.where(moving, cr * cr / safe, 0.0).sum() / K)

        phis = np.array([so3_log(r) for r in st.rot])
        l_angle = float((phis * phis).sum() / K)

        rows = st.box_rows()
        l_mass_k = np.ones(K)
        mass_grad = np.zeros((K, 7))
        for k, mem in enumerate(self.neighbours):
            if len(mem) == 0:
                continue
            if want_grad:
                w, gw = kernels.soft_membership_grad(self.p[mem], rows[k], alpha)
                mass_grad[k] = -gw.mean(axis=0)
            else:
                w = kernels.soft_membership(self.p[mem], rows[k], alpha)
            l_mass_k[k] = 1.0 - w.mean()
        l_mass = float(l_mass_k.sum() / K)

        if want_grad:
            grad[:, 9:12] += 2.0 * ds / K
            g_theta = 2.0 * cr * (-dot) / safe
            g_tx = (2.0 * cr * (-s) * safe - cr * cr * 2.0 * tx) / (safe * safe)
            g_ty = (2.0 * cr * c * safe - cr * cr * 2.0 * ty) / (safe * safe)
            w_h = cfg.weights.heading / K
            grad[:, 12] += w_h * np.where(moving, g_theta, 0.0)
            grad[:, 3] += w_h * np.where(moving, g_tx, 0.0)
            grad[:, 4] += w_h * np.where(moving, g_ty, 0.0)
            grad[:, 9:12] *= cfg.weights.dim
            grad[:, 0:3] += cfg.weights.angle * 2.0 * phis / K
            w_m = cfg.weights.mass / K
            grad[:, 6:9] += w_m * mass_grad[:, 0:3]
            grad[:, 9:12] += w_m * 0.5 * mass_grad[:, 3:6]
            grad[:, 12] += w_m * mass_grad[:, 6]
        return (l_dim, l_head, l_angle, l_mass), grad

    # total ----------------------------------------------------------------------
    def evaluate(self, st: MotionState, p_m, alpha: float, want_grad: bool = True, ego_only: bool = False):
        w = self.cfg.weights
        p_m = np.asarray(p_m, dtype=float).reshape(st.k)
        l_bg, g_bg, r_ego = self._background(st, want_grad)
        grad_fg = want_grad and not ego_only
        l_fg, _, g_fg, r_box = self._foreground(st, p_m, grad_fg)
        regs, g_reg = self._regularizers(st, alpha, grad_fg)
        l_dim, l_head, l_ang, l_mass = regs
        total = (
            w.bg * l_bg + w.fg * l_fg + w.dim * l_dim + w.heading * l_head + w.angle * l_ang + w.mass * l_mass
        )
        bd = LossBreakdown(float(l_bg), float(l_fg), l_dim, l_head, l_ang, l_mass, float(total))
        grad = None
        if want_grad:
            grad = np.zeros(st.dof)
            grad[0:6] = w.bg * g_bg
            if not ego_only:
                grad += w.fg * g_fg
                if st.k:
                    grad[6:] += g_reg.reshape(-1)
        return Evaluation(bd, grad, r_ego, r_box)

    def motion_probabilities(self, st: MotionState, ev: Evaluation, alpha: float) -> np.ndarray:
        eta = self.cfg.slope.eta
        rows = st.box_rows()
        out = np.zeros(st.k)
        start = 0
        for k, mem in enumerate(self.members):
            n = len(mem)
            if n == 0:
                continue
            w = kernels.soft_membership(self.p[mem], rows[k], alpha)
            gain = residual_gain(ev.r_ego[mem], ev.r_box[start : start + n], eta)
            out[k] = box_motion_probability(w, gain)
            start += n
        return out


# -- public loss functions ---------------------------------------------------------


def _objective_for(motion: SceneMotion, src, tgt, cfg):
    obj = SceneObjective(src, tgt, cfg)
    st = MotionState.from_motion(motion)
    obj.refresh_assignment(st, motion.boxes.members)
    return obj, st


def background_loss(motion: SceneMotion, src: PointCloud, tgt: PointCloud, cfg: OptimConfig | None = None) -> float:
    cfg = cfg or OptimConfig()
    obj, st = _objective_for(SceneMotion(motion.ego, [], [], AnchorSet()), src, tgt, cfg)
    return float(obj._background(st, False)[0])


def foreground_loss(motion: SceneMotion, src: PointCloud, tgt: PointCloud, cfg: OptimConfig | None = None) -> float:
    cfg = cfg or OptimConfig()
    obj, st = _objective_for(motion, src, tgt, cfg)
    return float(obj._foreground(st, np.asarray(motion.p_m, dtype=float), False)[0])


def box_regularizers(motion: SceneMotion, src: PointCloud, cfg: OptimConfig | None = None) -> tuple:
    """``(l_dim, l_heading, l_angle, l_mass)`` at the motion's slope ``alpha``."""
    cfg = cfg or OptimConfig()
    obj = SceneObjective.__new__(SceneObjective)
    obj.cfg = cfg
    obj.p = np.asarray(src.points, dtype=float)
    st = MotionState.from_motion(motion)
    obj.set_members(motion.boxes.members)
    near = kernels.points_in_boxes(obj.p, st.box_rows(), cfg.mass_margin) if st.k else []
    obj.neighbours = [np.flatnonzero(row) for row in near]
    regs, _ = obj._regularizers(st, motion.alpha, False)
    return regs


# -- optimiser ----------------------------------------------------------------------


class Adam:
    def __init__(self, lr: np.ndarray, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = np.asarray(lr, dtype=float)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros_like(self.lr)
        self.v = np.zeros_like(self.lr)
        self.t = 0

    def step(self, grad: np.ndarray, scale: float = 1.0) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        mhat = self.m / (1.0 - self.beta1**self.t)
        vhat = self.v / (1.0 - self.beta2**self.t)
        return -scale * self.lr * mhat / (np.sqrt(vhat) + self.eps)


def _learning_rates(cfg: OptimConfig, k: int) -> np.ndarray:
    ego = [cfg.lr_rotation] * 3 + [cfg.lr_translation] * 3
    box = [cfg.lr_rotation] * 3 + [cfg.lr_translation] * 3 + [cfg.lr_geometry] * 7
    return np.array(ego + box * k, dtype=float)


def _state_to_motion(st: MotionState, points: np.ndarray, p_m, alpha: float) -> SceneMotion:
    boxes = st.boxes()
    anchors = AnchorSet(boxes, assign_points(points, boxes))
    per_box = [RigidTransform(st.rot[k], st.trans[k]) for k in range(st.k)]
    return SceneMotion(RigidTransform(st.ego_r, st.ego_t), per_box, [float(v) for v in p_m], anchors, alpha)


def optimize_scene(
    src: PointCloud,
    tgt: PointCloud,
    anchors: AnchorSet,
    cfg: OptimConfig | None = None,
    init: SceneMotion | None = None,
):
    """Fit ego-motion, box geometry, per-box motions and motion probabilities.

    Phase one (``cfg.warmup`` iterations) moves only the ego transform on the
    background loss. Phase two updates everything on the full objective with
    a cosine-decayed step size; the slope and motion probabilities are
    refreshed every ``cfg.generation`` iterations. ``init`` warm-starts the
    ego and per-box parameters (and replaces ``anchors`` with its boxes).

    Returns the final :class:`SceneMotion` and the loss history, one entry per
    iteration plus one for the final parameters.
    """
    cfg = (cfg or OptimConfig()).validate()
    if init is None:
        k = len(anchors)
        init = SceneMotion(
            RigidTransform.identity(), [RigidTransform.identity() for _ in range(k)], [0.5] * k, anchors
        )
    st = MotionState.from_motion(init)
    obj = SceneObjective(src, tgt, cfg)
    obj.refresh_assignment(st, init.boxes.members)
    K = st.k

    slope = SlopeState(alpha=cfg.slope.alpha_base)
    first_gen_var: list = []
    p_m = np.asarray(init.p_m, dtype=float).reshape(K)
    lr = _learning_rates(cfg, K)
    opt_ego = Adam(lr[:6])
    opt_box = Adam(lr[6:])
    phase2 = max(cfg.iterations - cfg.warmup, 1)
    history: list = []
    prev_gen_total = None

    def refresh(ev):
        nonlocal slope, p_m
        if slope.v_ref is None and len(first_gen_var) >= cfg.generation:
            slope.v_ref = float(np.median(first_gen_var))
        slope = adapt_slope(slope, ev.r_ego, cfg.slope)
        if K:
            p_m = obj.motion_probabilities(st, ev, slope.alpha)

    for it in range(cfg.iterations):
        ego_only = it < cfg.warmup or K == 0
        gen_boundary = it >= cfg.warmup and (it - cfg.warmup) % cfg.generation == 0
        if K and gen_boundary and it > 0:
            obj.refresh_assignment(st)
        ev = obj.evaluate(st, p_m, slope.alpha, want_grad=True, ego_only=ego_only)
        if it == 0 and K:
            p_m = obj.motion_probabilities(st, ev, slope.alpha)
            ev = obj.evaluate(st, p_m, slope.alpha, want_grad=True, ego_only=ego_only)
        if K and cfg.warmup <= it < cfg.warmup + cfg.generation:
            first_gen_var.append(float(np.var(ev.r_ego)))
        if gen_boundary and K:
            refresh(ev)
            ev = obj.evaluate(st, p_m, slope.alpha, want_grad=True, ego_only=ego_only)
            total = ev.breakdown.total
            if prev_gen_total is not None and abs(prev_gen_total - total) <= cfg.tolerance * max(1.0, abs(total)):
                history.append(ev.breakdown)
                log.debug("converged at iteration %d", it)
                break
            prev_gen_total = total
        bd = ev.breakdown
        if not np.isfinite(bd.total) or not np.all(np.isfinite(ev.grad)):
            raise OptimizationError(f"non-finite loss at iteration {it}: {bd}")
        history.append(bd)

        if ego_only:
            step = np.zeros(st.dof)
            step[:6] = opt_ego.step(ev.grad[:6])
        else:
            progress = (it - cfg.warmup) / phase2
            f = cfg.lr_final_fraction
            scale = f + (1.0 - f) * 0.5 * (1.0 + math.cos(math.pi * progress))
            step = np.concatenate([opt_ego.step(ev.grad[:6], scale), opt_box.step(ev.grad[6:], scale)])
        st = st.retract(step)
        st.canonicalize()

    if K:
        obj.refresh_assignment(st)
    ev = obj.evaluate(st, p_m, slope.alpha, want_grad=False)
    if K:
        refresh(ev)
        ev = obj.evaluate(st, p_m, slope.alpha, want_grad=False)
    if not np.isfinite(ev.breakdown.total):
        raise OptimizationError(f"non-finite final loss: {ev.breakdown}")
    history.append(ev.breakdown)
    return _state_to_motion(st, obj.p, p_m, slope.alpha), history
