"""Point-cloud loading and preprocessing: readers, ground removal, normals, sampling."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import FormatError, InvalidArgument

log = logging.getLogger(__name__)

RECORD = np.dtype("<f4")


@dataclass
class PointCloud:
    """``(N, 3)`` points in metres with optional intensity and unit normals."""

    points: np.ndarray
    intensity: np.ndarray | None = None
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.intensity is not None:
            self.intensity = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)

    def __len__(self) -> int:
        return self.points.shape[0]

    def subset(self, idx) -> "PointCloud":
        return PointCloud(
            self.points[idx],
            None if self.intensity is None else self.intensity[idx],
            None if self.normals is None else self.normals[idx],
        )

    def with_normals(self, normals: np.ndarray) -> "PointCloud":
        return PointCloud(self.points, self.intensity, normals)


@dataclass
class NormalField:
    normals: np.ndarray
    degenerate: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.degenerate is None:
            self.degenerate = np.zeros(len(self.normals), dtype=bool)


@dataclass
class GroundConfig:
    enabled: bool = True
    height_prior: float = -1.2
    iterations: int = 200
    threshold: float = 0.15
    max_tilt_deg: float = 25.0
    seed: int = 0


# -- readers / writers -------------------------------------------------------


def read_point_binary(path) -> PointCloud:
    """Read a KITTI-style ``.bin``: little-endian float32 records ``x, y, z, intensity``."""
    size = os.path.getsize(path)
    if size == 0 or size % 16:
        raise FormatError(f"{path}: size {size} is not a positive multiple of 16 bytes")
    raw = np.fromfile(path, dtype=RECORD).reshape(-1, 4)
    ok = np.all(np.isfinite(raw[:, :3]), axis=1)
    dropped = int((~ok).sum())
    if dropped:
        log.warning("%s: dropped %d records with non-finite coordinates", path, dropped)
        raw = raw[ok]
    if raw.shape[0] == 0:
        raise FormatError(f"{path}: no finite points")
    return PointCloud(raw[:, :3].astype(np.float64), raw[:, 3].astype(np.float64))


def write_point_binary(path, cloud: PointCloud) -> None:
    rec = np.zeros((len(cloud), 4), dtype=RECORD)
    rec[:, :3] = cloud.points
    if cloud.intensity is not None:
        rec[:, 3] = cloud.intensity
    rec.tofile(path)


def read_ply(path) -> PointCloud:
    """Read an ASCII PLY with at least ``x, y, z`` vertex properties."""
    with open(path, "r", encoding="ascii", errors="replace") as fh:
        if fh.readline().strip() != "ply":
            raise FormatError(f"{path}: missing 'ply' magic")
        props: list[str] = []
        n_vertex = None
        in_vertex = False
        for line in fh:
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "format" and tok[1] != "ascii":
                raise FormatError(f"{path}: only ASCII PLY is supported, got {tok[1]}")
            elif tok[0] == "element":
                in_vertex = tok[1] == "vertex"
                if in_vertex:
                    n_vertex = int(tok[2])
            elif tok[0] == "property" and in_vertex:
                props.append(tok[-1])
            elif tok[0] == "end_header":
                break
        else:
            raise FormatError(f"{path}: header not terminated")
        if n_vertex is None or not {"x", "y", "z"} <= set(props):
            raise FormatError(f"{path}: vertex element with x, y, z required")
        rows = []
        for _ in range(n_vertex):
            line = fh.readline()
            if not line:
                raise FormatError(f"{path}: expected {n_vertex} vertices")
            rows.append(line.split()[: len(props)])
    data = np.array(rows, dtype=np.float64).reshape(-1, len(props))
    cols = [props.index(a) for a in "xyz"]
    pts = data[:, cols]
    ok = np.all(np.isfinite(pts), axis=1)
    if not ok.all():
        log.warning("%s: dropped %d non-finite vertices", path, int((~ok).sum()))
    if not ok.any():
        raise FormatError(f"{path}: no finite points")
    inten = data[ok, props.index("intensity")] if "intensity" in props else None
    return PointCloud(pts[ok], inten)


def load_cloud(path) -> PointCloud:
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".bin":
        return read_point_binary(path)
    if ext == ".ply":
        return read_ply(path)
    raise FormatError(f"{path}: unsupported extension {ext!r}")


# -- preprocessing -----------------------------------------------------------


def crop_front_view(cloud: PointCloud) -> tuple[PointCloud, np.ndarray]:
    idx = np.flatnonzero(cloud.points[:, 0] > 0.0)
    if idx.size == 0:
        raise InvalidArgument("front-view crop removed every point")
    return cloud.subset(idx), idx


def _fit_plane(p3: np.ndarray):
    n = np.cross(p3[1] - p3[0], p3[2] - p3[0])
    norm = np.linalg.norm(n)
    if norm < 1e-12:
        return None
    n = n / norm
    return n, -float(n @ p3[0])


def remove_ground(cloud: PointCloud, cfg: GroundConfig | None = None) -> tuple[PointCloud, np.ndarray]:
    """Drop ground points; returns the survivors and their indices into ``cloud``.

    Candidates are points below ``cfg.height_prior``. A RANSAC plane is fitted
    to them and candidates within ``cfg.threshold`` of it are removed. With
    fewer than three candidates every candidate is removed.
    """
    cfg = cfg or GroundConfig()
    n = len(cloud)
    if not cfg.enabled:
        return cloud, np.arange(n)
    pts = cloud.points
    cand = np.flatnonzero(pts[:, 2] < cfg.height_prior)
    if cand.size == 0:
        return cloud, np.arange(n)
    if cand.size < 3:
        ground = cand
    else:
        rng = np.random.default_rng(cfg.seed)
        cp = pts[cand]
        min_nz = np.cos(np.deg2rad(cfg.max_tilt_deg))
        best = None
        best_count = -1
        for _ in range(cfg.iterations):
            plane = _fit_plane(cp[rng.choice(cand.size, 3, replace=False)])
            if plane is None or abs(plane[0][2]) < min_nz:
                continue
            count = int((np.abs(cp @ plane[0] + plane[1]) <= cfg.threshold).sum())
            if count > best_count:
                best, best_count = plane, count
        if best is None:
            ground = cand
        else:
            inl = np.abs(cp @ best[0] + best[1]) <= cfg.threshold
            # least-squares refit on the consensus set
            if inl.sum() >= 3:
                q = cp[inl]
                centroid = q.mean(axis=0)
                _, _, vt = np.linalg.svd(q - centroid, full_matrices=False)
                normal = vt[-1]
                if abs(normal[2]) >= min_nz:
                    refit = np.abs((cp - centroid) @ normal) <= cfg.threshold
                    if refit.sum() >= inl.sum():
                        inl = refit
            ground = cand[inl]
    keep = np.ones(n, dtype=bool)
    keep[ground] = False
    idx = np.flatnonzero(keep)
    if idx.size == 0:
        raise InvalidArgument("ground removal left no points")
    return cloud.subset(idx), idx


def estimate_normals(cloud: PointCloud, k: int = 16, origin=(0.0, 0.0, 0.0)) -> NormalField:
    """PCA normals over ``k`` nearest neighbours, oriented toward ``origin``.

    Neighbourhoods whose covariance has rank below two get the unit vector
    pointing at the sensor and are flagged degenerate.
    """
    pts = cloud.points
    n = len(pts)
    if not (k >= 3 and n > k):
        raise InvalidArgument(f"need N > k >= 3, got N={n}, k={k}")
    origin = np.asarray(origin, dtype=float)
    _, nbr = cKDTree(pts).query(pts, k=k)
    nb = pts[nbr]
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0].copy()

    to_sensor = origin - pts
    dist = np.linalg.norm(to_sensor, axis=1)
    facing = np.where(dist[:, None] > 1e-12, to_sensor / np.maximum(dist, 1e-12)[:, None], [0.0, 0.0, 1.0])

    scale = np.maximum(evals[:, 2], 1e-300)
    degenerate = (evals[:, 1] <= 1e-10 * scale) | (evals[:, 2] <= 1e-20)
    normals[degenerate] = facing[degenerate]
    flip = np.einsum("ij,ij->i", normals, to_sensor) < 0
    normals[flip] *= -1.0
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return NormalField(normals, degenerate)


def sample_points(cloud: PointCloud, n: int, seed: int) -> tuple[PointCloud, np.ndarray]:
    """Uniform subsample without replacement to ``n`` points; order is preserved."""
    total = len(cloud)
    if total <= n:
        return cloud, np.arange(total)
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(total, size=n, replace=False))
    return cloud.subset(idx), idx
