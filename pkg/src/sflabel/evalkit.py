"""Scene-flow metrics and a synthetic rigid-scene oracle.

The oracle builds source/target pairs from known motions with its own warp
code, so it can check :mod:`sflabel.labelgen` rather than reuse it.
"""

from __future__ import annotations

import csv
import inspect
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .anchor import AnchorSet
from .errors import ConfigError, InvalidArgument
from .geom import BoxParams, RigidTransform, rot_z
from .ingest import PointCloud

EPS_REL = 1e-9


@dataclass
class MetricsRecord:
    epe3d: float
    acc3ds: float
    acc3dr: float
    outliers: float

    FIELDS = ("epe3d", "acc3ds", "acc3dr", "outliers")

    def as_row(self):
        return [self.epe3d, self.acc3ds, self.acc3dr, self.outliers]


def compute_metrics(pred, gt) -> MetricsRecord:
    """EPE3D, strict/relaxed accuracy and outlier ratio.

    A point is accurate (strict) if its error is below 5 cm or 5 % of the true
    flow magnitude, relaxed with 10 cm / 10 %, and an outlier above 30 cm or
    10 %.
    """
    p = np.asarray(getattr(pred, "flow", pred), dtype=np.float64).reshape(-1, 3)
    g = np.asarray(getattr(gt, "flow", gt), dtype=np.float64).reshape(-1, 3)
    if p.shape != g.shape:
        raise InvalidArgument(f"prediction has {len(p)} vectors, ground truth {len(g)}")
    if len(p) == 0:
        raise InvalidArgument("empty flow")
    err = np.linalg.norm(p - g, axis=1)
    rel = err / np.maximum(np.linalg.norm(g, axis=1), EPS_REL)
    return MetricsRecord(
        float(err.mean()),
        float(np.mean((err < 0.05) | (rel < 0.05))),
        float(np.mean((err < 0.1) | (rel < 0.1))),
        float(np.mean((err > 0.3) | (rel > 0.1))),
    )


# -- synthetic scenes ----------------------------------------------------------


@dataclass
class Wall:
    """Vertical rectangle from ``start`` to ``end`` (x, y) spanning ``z_min .. z_max``."""

    start: tuple
    end: tuple
    z_min: float = -1.7
    z_max: float = 2.5

    @property
    def length(self) -> float:
        return float(np.hypot(self.end[0] - self.start[0], self.end[1] - self.start[1]))

    @property
    def area(self) -> float:
        return self.length * (self.z_max - self.z_min)


@dataclass
class SyntheticObject:
    box: BoxParams
    motion: RigidTransform = field(default_factory=RigidTransform.identity)
    n_points: int = 300

    @property
    def dynamic(self) -> bool:
        return bool(np.any(self.motion.translation != 0) or np.any(self.motion.rotation != np.eye(3)))


@dataclass
class SyntheticSceneSpec:
    ego: RigidTransform = field(default_factory=RigidTransform.identity)
    objects: list = field(default_factory=list)
    walls: list = field(default_factory=list)
    n_points: int = 8192
    ground_z: float | None = -1.7
    ground_points: int = 0
    ground_radius: float = 30.0
    noise: float = 0.0
    fill: float = 0.9
    seed: int = 0
    scene_id: str = "scene"


@dataclass
class SyntheticScene:
    src: PointCloud
    tgt: PointCloud
    gt_flow: np.ndarray
    truth: object  # SceneMotion
    segment: np.ndarray  # -2 ground, -1 static background, k object index
    tgt_clean: np.ndarray
    spec: SyntheticSceneSpec


def _bev_corners(box: BoxParams) -> np.ndarray:
    hx, hy = box.half[:2]
    local = np.array([[hx, hy], [-hx, hy], [-hx, -hy], [hx, -hy]])
    c, s = math.cos(box.heading), math.sin(box.heading)
    return local @ np.array([[c, s], [-s, c]]) + box.center[:2]


def boxes_overlap(a: BoxParams, b: BoxParams) -> bool:
    """Separating-axis test on the bird's-eye rectangles plus a z-interval test."""
    if abs(a.center[2] - b.center[2]) > a.half[2] + b.half[2]:
        return False
    ca, cb = _bev_corners(a), _bev_corners(b)
    for h in (a.heading, b.heading):
        for axis in (np.array([math.cos(h), math.sin(h)]), np.array([-math.sin(h), math.cos(h)])):
            pa, pb = ca @ axis, cb @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True


def validate_scene_spec(spec: SyntheticSceneSpec) -> None:
    if spec.n_points <= 0 or spec.ground_points < 0 or spec.noise < 0:
        raise InvalidArgument("scene counts must be positive and noise non-negative")
    obj_pts = sum(o.n_points for o in spec.objects)
    if any(o.n_points <= 0 for o in spec.objects) or obj_pts >= spec.n_points:
        raise InvalidArgument("object point counts must be positive and leave room for background")
    if not spec.walls and obj_pts != spec.n_points:
        raise InvalidArgument("a scene without walls must put every point on an object")
    for i, a in enumerate(spec.objects):
        for b in spec.objects[i + 1 :]:
            if boxes_overlap(a.box, b.box):
                raise InvalidArgument("object boxes overlap")


def _wall_samples(walls, n, rng):
    areas = np.array([w.area for w in walls])
    counts = rng.multinomial(n, areas / areas.sum())
    pts, nrm = [], []
    for w, c in zip(walls, counts):
        s = rng.random(c)
        z = w.z_min + rng.random(c) * (w.z_max - w.z_min)
        p0, p1 = np.asarray(w.start, float), np.asarray(w.end, float)
        xy = p0 + s[:, None] * (p1 - p0)
        pts.append(np.column_stack([xy, z]))
        d = (p1 - p0) / max(w.length, 1e-12)
        nrm.append(np.tile([-d[1], d[0], 0.0], (c, 1)))
    return np.vstack(pts), np.vstack(nrm)


def _object_samples(obj: SyntheticObject, fill: float, rng):
    box = obj.box
    local = (rng.random((obj.n_points, 3)) * 2.0 - 1.0) * box.half * fill
    # outward normal of the nearest face, for a plausible normal field
    rel = np.abs(local) / (box.half * fill)
    axis = np.argmax(rel, axis=1)
    nl = np.zeros_like(local)
    nl[np.arange(len(local)), axis] = np.sign(local[np.arange(len(local)), axis])
    r = rot_z(box.heading)
    return local @ r.T + box.center, nl @ r.T


def warp_segments(points, segment, ego, centers, motions) -> np.ndarray:
    """Rigid warp with known segmentation: ego for everything, then segment ``k``
    rotates about its ego-moved centre ``centers[k]`` and shifts by ``motions[k]``."""
    re, te = ego.rotation, ego.translation
    out = np.einsum("ij,nj->ni", re, points) + te
    for k, (c, m) in enumerate(zip(centers, motions)):
        sel = segment == k
        if not sel.any():
            continue
        pivot = np.einsum("ij,j->i", re, c) + te
        out[sel] = np.einsum("ij,nj->ni", m.rotation, out[sel] - pivot) + pivot + m.translation
    return out


def oracle_segment(points, boxes) -> np.ndarray:
    """Owning box per point (``-1`` for none); overlaps go to the nearest centre."""
    pts = np.asarray(points, dtype=float)
    best = np.full(len(pts), -1)
    best_d = np.full(len(pts), np.inf)
    for k, b in enumerate(boxes):
        rel = pts - b.center
        c, s = math.cos(b.heading), math.sin(b.heading)
        lx = rel[:, 0] * c + rel[:, 1] * s
        ly = rel[:, 1] * c - rel[:, 0] * s
        inside = (np.abs(lx) <= b.half[0]) & (np.abs(ly) <= b.half[1]) & (np.abs(rel[:, 2]) <= b.half[2])
        d = np.einsum("ij,ij->i", rel, rel)
        take = inside & (d < best_d)
        best[take] = k
        best_d[take] = d[take]
    return best


def oracle_target(points, boxes, ego, per_box, p_m, threshold) -> np.ndarray:
    """Independent label-target construction: static boxes follow ego only."""
    seg = oracle_segment(points, boxes)
    dynamic = np.array([p >= threshold for p in p_m], dtype=bool)
    seg = np.where((seg >= 0) & dynamic[np.maximum(seg, 0)], seg, -1) if len(boxes) else seg
    return warp_segments(points, seg, ego, [b.center for b in boxes], per_box)


def generate_synthetic_scene(spec: SyntheticSceneSpec) -> SyntheticScene:
    """Sample a rigid scene and warp it with the known motions of ``spec``.

    Background and ground follow the ego transform; each object's points take
    the ego transform then the object's motion, rotating about the
    ego-moved box centre. Gaussian noise is added to the target only.
    """
    from .optim import SceneMotion  # local: optim imports this module's neighbours

    validate_scene_spec(spec)
    rng = np.random.default_rng(spec.seed)
    n_obj = sum(o.n_points for o in spec.objects)
    parts, normals, seg = [], [], []
    if spec.walls:
        p, n = _wall_samples(spec.walls, spec.n_points - n_obj, rng)
        parts.append(p)
        normals.append(n)
        seg.append(np.full(len(p), -1))
    if spec.ground_points and spec.ground_z is not None:
        r = spec.ground_radius * np.sqrt(rng.random(spec.ground_points))
        phi = rng.random(spec.ground_points) * 2 * np.pi
        g = np.column_stack([r * np.cos(phi), r * np.sin(phi), np.full(spec.ground_points, spec.ground_z)])
        parts.append(g)
        normals.append(np.tile([0.0, 0.0, 1.0], (len(g), 1)))
        seg.append(np.full(len(g), -2))
    for k, obj in enumerate(spec.objects):
        p, n = _object_samples(obj, spec.fill, rng)
        parts.append(p)
        normals.append(n)
        seg.append(np.full(len(p), k))
    src = np.vstack(parts)
    nrm = np.vstack(normals)
    segment = np.concatenate(seg)
    # orient toward the sensor at the origin
    flip = np.einsum("ij,ij->i", nrm, -src) < 0
    nrm[flip] *= -1

    clean = warp_segments(src, segment, spec.ego, [o.box.center for o in spec.objects],
                          [o.motion for o in spec.objects])
    tgt = clean + (rng.normal(0.0, spec.noise, clean.shape) if spec.noise > 0 else 0.0)
    tgt_normals = np.einsum("ij,nj->ni", spec.ego.rotation, nrm)
    for k, obj in enumerate(spec.objects):
        sel = segment == k
        tgt_normals[sel] = np.einsum("ij,nj->ni", obj.motion.rotation, tgt_normals[sel])

    boxes = [o.box.copy() for o in spec.objects]
    members = [np.flatnonzero(segment == k) for k in range(len(boxes))]
    truth = SceneMotion(
        spec.ego.copy(),
        [o.motion.copy() for o in spec.objects],
        [1.0 if o.dynamic else 0.0 for o in spec.objects],
        AnchorSet(boxes, members),
    )
    return SyntheticScene(
        PointCloud(src, np.zeros(len(src)), nrm),
        PointCloud(tgt, np.zeros(len(tgt)), tgt_normals),
        clean - src,
        truth,
        segment,
        clean,
        spec,
    )


# -- random scene factory --------------------------------------------------------


def _street_walls(rng) -> list:
    """Two facades along x plus a few randomly oriented segments."""
    half_w = rng.uniform(7.0, 10.0)
    walls = [
        Wall((-30.0, half_w), (30.0, half_w)),
        Wall((-30.0, -half_w - rng.uniform(0, 3)), (30.0, -half_w - rng.uniform(0, 3))),
    ]
    for _ in range(rng.integers(3, 6)):
        ang = rng.uniform(0, np.pi)
        length = rng.uniform(6.0, 14.0)
        # place beyond the facades or at the far ends so the road stays free
        side = rng.choice([-1, 1])
        if rng.random() < 0.5:
            cx, cy = rng.uniform(-25, 25), side * (half_w + rng.uniform(4, 10))
        else:
            cx, cy = side * rng.uniform(18, 28), rng.uniform(-half_w + 2, half_w - 2)
            ang = np.pi / 2 + rng.uniform(-0.5, 0.5)
            length = min(length, 2 * half_w - 4)
        d = 0.5 * length * np.array([np.cos(ang), np.sin(ang)])
        walls.append(Wall(tuple(np.array([cx, cy]) - d), tuple(np.array([cx, cy]) + d)))
    # pillars give short walls in several orientations
    for _ in range(rng.integers(2, 5)):
        cx, cy = rng.uniform(-20, 20), rng.choice([-1, 1]) * (half_w - 0.6)
        h = 0.3
        pts = [(cx - h, cy - h), (cx + h, cy - h), (cx + h, cy + h), (cx - h, cy + h)]
        for i in range(4):
            walls.append(Wall(pts[i], pts[(i + 1) % 4], -1.7, 1.5))
    return walls, half_w


def _random_ego(rng, max_t=2.0, max_yaw_deg=5.0) -> RigidTransform:
    yaw = np.deg2rad(rng.uniform(-max_yaw_deg, max_yaw_deg))
    r = rng.uniform(0.0, max_t)
    phi = rng.uniform(-np.pi, np.pi)
    return RigidTransform(rot_z(yaw), [r * np.cos(phi), r * np.sin(phi), 0.0])


def random_scene_spec(
    seed: int,
    n_dynamic: int | tuple = 0,
    n_static_objects: int = 0,
    n_points: int = 8192,
    noise: float = 0.02,
    ground_points: int = 2000,
    max_t: float = 2.0,
    max_yaw_deg: float = 5.0,
    max_box_t: float = 1.5,
    max_spin_deg: float = 10.0,
    object_points: tuple = (250, 400),
    scene_id: str | None = None,
) -> SyntheticSceneSpec:
    """A street-like scene: facades, cross walls, pillars, ground and optional cars.

    Dynamic cars move along their heading by up to ``max_box_t`` and yaw by up
    to ``max_spin_deg``; static cars stay put relative to the background.
    """
    rng = np.random.default_rng(seed)
    walls, half_w = _street_walls(rng)
    if isinstance(n_dynamic, tuple):
        n_dynamic = int(rng.integers(n_dynamic[0], n_dynamic[1] + 1))
    objects: list = []
    attempts = 0
    while len(objects) < n_dynamic + n_static_objects:
        attempts += 1
        if attempts > 10000:
            raise InvalidArgument("could not place non-overlapping objects")
        size = np.array([rng.uniform(3.8, 4.6), rng.uniform(1.7, 2.0), rng.uniform(1.4, 1.7)])
        heading = rng.uniform(-np.pi, np.pi)
        center = np.array([rng.uniform(-20, 20), rng.uniform(-half_w + 2.8, half_w - 2.8), -1.7 + size[2] / 2])
        if np.hypot(*center[:2]) < 5.0:
            continue
        box = BoxParams(center, size, heading)
        grown = BoxParams(center, size + 2.0 * max_box_t + 1.0, heading)
        if any(boxes_overlap(grown, o.box) for o in objects):
            continue
        if len(objects) < n_dynamic:
            dist = rng.uniform(0.3, max_box_t)
            spin = np.deg2rad(rng.uniform(-max_spin_deg, max_spin_deg))
            motion = RigidTransform(rot_z(spin), [dist * np.cos(heading), dist * np.sin(heading), 0.0])
        else:
            motion = RigidTransform.identity()
        objects.append(SyntheticObject(box, motion, int(rng.integers(object_points[0], object_points[1] + 1))))
    return SyntheticSceneSpec(
        ego=_random_ego(rng, max_t, max_yaw_deg),
        objects=objects,
        walls=walls,
        n_points=n_points,
        ground_points=ground_points,
        noise=noise,
        seed=int(rng.integers(0, 2**31 - 1)),
        scene_id=scene_id or f"scene_{seed:04d}",
    )


def scene_specs_from_dict(data) -> list:
    """Build specs from ``{"scenes": [{...}, ...]}`` (or a bare list).

    Each entry holds keyword arguments of :func:`random_scene_spec`; ``seed``
    is required.
    """
    entries = data.get("scenes") if isinstance(data, dict) else data
    if isinstance(data, dict) and set(data) - {"scenes"}:
        raise ConfigError(f"<root>: unknown keys {sorted(set(data) - {'scenes'})}")
    if not isinstance(entries, list) or not entries:
        raise ConfigError("scenes: expected a non-empty list")
    params = inspect.signature(random_scene_spec).parameters
    specs = []
    for i, entry in enumerate(entries):
        where = f"scenes[{i}]"
        if not isinstance(entry, dict):
            raise ConfigError(f"{where}: expected an object")
        if "seed" not in entry:
            raise ConfigError(f"{where}.seed: required")
        kwargs = {}
        for key, value in entry.items():
            if key not in params:
                raise ConfigError(f"{where}.{key}: unknown field")
            default = params[key].default
            if key in ("n_dynamic", "object_points") and isinstance(value, list):
                if len(value) != 2 or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
                    raise ConfigError(f"{where}.{key}: expected an integer or a pair of integers")
                value = tuple(value)
            elif key == "scene_id":
                if not isinstance(value, str):
                    raise ConfigError(f"{where}.{key}: expected a string")
            elif isinstance(default, int) or key == "seed":
                if isinstance(value, bool) or not isinstance(value, int):
                    raise ConfigError(f"{where}.{key}: expected an integer")
            elif isinstance(default, float):
                if isinstance(value, bool) or not isinstance(value, (int, float)):
                    raise ConfigError(f"{where}.{key}: expected a number")
                value = float(value)
            kwargs[key] = value
        try:
            specs.append(random_scene_spec(**kwargs))
        except (InvalidArgument, ValueError) as exc:
            raise ConfigError(f"{where}: {exc}") from exc
    return specs


def load_scene_specs(path) -> list:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read scene spec {path}: {exc}") from exc
    return scene_specs_from_dict(data)


# -- batch evaluation ---------------------------------------------------------------


@dataclass
class SceneReport:
    scene_id: str
    metrics: MetricsRecord
    runtime_ms: float
    detail: dict = field(default_factory=dict)


def evaluate_scene(spec: SyntheticSceneSpec, cfg) -> SceneReport:
    from .pipeline import fit_pair, predict_flow

    t0 = time.perf_counter()
    scene = generate_synthetic_scene(spec)
    fit = fit_pair(scene.src, scene.tgt, cfg, seed=spec.seed)
    flow = predict_flow(fit, cfg.labelgen.threshold)
    gt = scene.gt_flow[fit.src_index]
    metrics = compute_metrics(flow, gt)
    runtime = (time.perf_counter() - t0) * 1e3

    seg = scene.segment[fit.src_index]
    err = np.linalg.norm(flow - gt, axis=1)
    dyn_ids = {k for k, o in enumerate(spec.objects) if o.dynamic}
    dyn_mask = np.isin(seg, list(dyn_ids))
    # fitted box owning most of each true object's points
    owner = fit.owner_of_points()
    box_p = []
    for k in sorted(dyn_ids):
        ids = owner[seg == k]
        ids = ids[ids >= 0]
        box_p.append(float(fit.motion.p_m[np.bincount(ids).argmax()]) if ids.size else 0.0)
    ego_err = fit.motion.ego.rotation @ spec.ego.rotation.T
    detail = {
        "epe_dynamic": float(np.median(err[dyn_mask])) if dyn_mask.any() else float("nan"),
        "epe_static": float(np.median(err[~dyn_mask])),
        "median_epe": float(np.median(err)),
        "dynamic_box_p_m": box_p,
        "yaw_error_deg": float(np.rad2deg(abs(math.atan2(ego_err[1, 0], ego_err[0, 0])))),
        "translation_error": float(np.linalg.norm(fit.motion.ego.translation - spec.ego.translation)),
        "initial_loss": fit.history[0].total,
        "final_loss": fit.history[-1].total,
        "errors_dynamic": err[dyn_mask],
        "errors_static": err[~dyn_mask],
    }
    return SceneReport(spec.scene_id, metrics, runtime, detail)


CSV_HEADER = ("scene_id", "epe3d", "acc3ds", "acc3dr", "outliers", "runtime_ms")


def _fmt(v):
    return repr(float(v))


def write_report_csv(reports, path) -> None:
    rows = [[r.scene_id] + [_fmt(v) for v in r.metrics.as_row()] + [_fmt(r.runtime_ms)] for r in reports]
    agg = aggregate(reports)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        w.writerows(rows)
        w.writerow(["mean"] + [_fmt(v) for v in agg["mean"].as_row()] + [_fmt(agg["runtime_ms"])])


def aggregate(reports) -> dict:
    m = np.array([r.metrics.as_row() for r in reports])
    return {
        "mean": MetricsRecord(*m.mean(axis=0)),
        "median": MetricsRecord(*np.median(m, axis=0)),
        "runtime_ms": float(np.mean([r.runtime_ms for r in reports])),
    }


def evaluate_pipeline(specs, cfg, csv_path=None, workers: int = 1):
    """Run oracle scene -> fit -> flow -> metrics for each spec; returns ``(aggregate, reports)``."""
    specs = list(specs)
    if workers > 1 and len(specs) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as ex:
            reports = list(ex.map(evaluate_scene, specs, [cfg] * len(specs)))
    else:
        reports = [evaluate_scene(s, cfg) for s in specs]
    if csv_path is not None:
        write_report_csv(reports, csv_path)
    return aggregate(reports), reports
