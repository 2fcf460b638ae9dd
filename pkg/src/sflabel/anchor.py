"""Anchor boxes: grid initialisation, pruning, soft membership, motion probability, slope."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from . import kernels
from .errors import ConfigError
from .geom import BoxParams


@dataclass
class GridSpec:
    stride: float = 4.0
    size: tuple = (4.0, 1.8, 1.6)
    headings: tuple = (0.0, math.pi / 2)
    min_points: int = 30

    def validate(self):
        if self.stride <= 0 or min(self.size) <= 0 or not self.headings or self.min_points < 1:
            raise ConfigError(f"invalid grid spec: {self}")
        return self


@dataclass
class AnchorSet:
    """Boxes plus, per box, the indices of the points lying inside it."""

    boxes: list = field(default_factory=list)
    members: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.boxes)

    def box_array(self) -> np.ndarray:
        """``(K, 7)`` rows ``[cx, cy, cz, hx, hy, hz, heading]`` (half sizes)."""
        if not self.boxes:
            return np.zeros((0, 7))
        return np.array([np.concatenate([b.center, b.half, [b.heading]]) for b in self.boxes])

    def copy(self) -> "AnchorSet":
        return AnchorSet([b.copy() for b in self.boxes], [m.copy() for m in self.members])


@dataclass
class SlopeConfig:
    alpha_base: float = 5.0
    alpha_min: float = 0.5
    alpha_max: float = 50.0
    eta: float = 20.0

    def validate(self):
        if not (0 < self.alpha_min <= self.alpha_base <= self.alpha_max) or self.eta <= 0:
            raise ConfigError(f"invalid slope config: {self}")
        return self


@dataclass
class SlopeState:
    alpha: float
    v_ref: float | None = None
    history: list = field(default_factory=list)


def assign_points(points: np.ndarray, boxes: list) -> list:
    """Per-box index arrays of the points inside each box (faces inclusive)."""
    if not boxes:
        return []
    arr = np.array([np.concatenate([b.center, b.half, [b.heading]]) for b in boxes])
    mask = kernels.points_in_boxes(points, arr)
    return [np.flatnonzero(row) for row in mask]


def init_anchor_grid(bounds, spec: GridSpec, points: np.ndarray | None = None) -> AnchorSet:
    """Tile anchors over the bird's-eye extent of ``bounds = (lo, hi)``.

    Anchor centres sit on a grid of pitch ``spec.stride`` centred on the
    region; each grid node carries one anchor per heading. Anchors rest on
    the bottom of the region, where objects meet the (removed) ground.
    """
    spec.validate()
    lo, hi = (np.asarray(b, dtype=float).reshape(3) for b in bounds)
    if np.any(hi < lo) or not np.all(np.isfinite([lo, hi])):
        raise ConfigError(f"degenerate bounds {lo} .. {hi}")
    mid = 0.5 * (lo + hi)
    counts = [max(1, math.ceil((hi[a] - lo[a]) / spec.stride - 1e-9)) for a in range(2)]
    xs = mid[0] + (np.arange(counts[0]) - (counts[0] - 1) / 2) * spec.stride
    ys = mid[1] + (np.arange(counts[1]) - (counts[1] - 1) / 2) * spec.stride
    z = lo[2] + 0.5 * spec.size[2]
    boxes = [BoxParams((x, y, z), spec.size, h) for x in xs for y in ys for h in spec.headings]
    if not boxes:
        raise ConfigError("anchor grid produced no boxes")
    members = assign_points(points, boxes) if points is not None else [np.zeros(0, int) for _ in boxes]
    return AnchorSet(boxes, members)


def prune_boxes(anchors: AnchorSet, min_points: int, points: np.ndarray | None = None) -> AnchorSet:
    """Drop boxes with fewer than ``min_points`` members; re-centre survivors on their centroid.

    When ``points`` is given, membership is recomputed at the new centres.
    """
    keep = [k for k, m in enumerate(anchors.members) if len(m) >= min_points]
    boxes, members = [], []
    for k in keep:
        b = anchors.boxes[k]
        m = anchors.members[k]
        if points is not None:
            b = BoxParams(points[m].mean(axis=0), b.size, b.heading)
        boxes.append(b)
        members.append(m)
    if points is not None and boxes:
        members = assign_points(points, boxes)
    return AnchorSet(boxes, members)


def soft_membership(points: np.ndarray, box: BoxParams, alpha: float) -> np.ndarray:
    """Differentiable point-in-box weight in [0, 1]; exactly 1 at the box centre."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    row = np.concatenate([box.center, box.half, [box.heading]])
    return kernels.soft_membership(pts, row, float(alpha))


def residual_gain(r_ego: np.ndarray, r_box: np.ndarray, eta: float) -> np.ndarray:
    return expit(eta * (np.asarray(r_ego, dtype=float) - np.asarray(r_box, dtype=float)))


def box_motion_probability(weights: np.ndarray, gain: np.ndarray) -> float:
    """Membership-weighted mean of per-point residual gain, clamped to [0, 1]."""
    w = np.asarray(weights, dtype=float)
    g = np.asarray(gain, dtype=float)
    total = w.sum()
    if total <= 0.0:
        return 0.0
    return float(np.clip((w * g).sum() / total, 0.0, 1.0))


def adapt_slope(state: SlopeState, residuals: np.ndarray, cfg: SlopeConfig | None = None) -> SlopeState:
    """Rescale the sigmoid slope linearly with residual variance.

    ``alpha = clamp(alpha_base * var / v_ref, alpha_min, alpha_max)``; before a
    reference variance exists the slope stays at ``alpha_base``.
    """
    cfg = cfg or SlopeConfig()
    v = float(np.var(np.asarray(residuals, dtype=float)))
    if state.v_ref is None:
        alpha = cfg.alpha_base
    elif state.v_ref <= 0.0:
        alpha = cfg.alpha_max if v > 0.0 else cfg.alpha_min
    else:
        alpha = cfg.alpha_base * v / state.v_ref
    alpha = min(max(alpha, cfg.alpha_min), cfg.alpha_max)
    return replace(state, alpha=alpha, history=state.history + [v])
