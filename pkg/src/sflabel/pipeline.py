"""End-to-end labelling of one frame pair."""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .anchor import AnchorSet, init_anchor_grid, prune_boxes
from .augment import augment_scene, unaugmented
from .config import IngestConfig, PipelineConfig
from .ingest import PointCloud, crop_front_view, estimate_normals, remove_ground, sample_points
from .labelgen import LabelRecord, compute_flow_labels, label_metadata, point_owner, synthesize_target
from .optim import SceneMotion, optimize_scene


def pair_seed(global_seed: int, pair_id: str) -> int:
    """Stable per-pair seed, independent of scheduling order."""
    return (int(global_seed) * 1_000_003 + zlib.crc32(pair_id.encode())) % (2**31 - 1)


def preprocess(cloud: PointCloud, cfg: IngestConfig, seed: int) -> tuple[PointCloud, np.ndarray]:
    """Crop (optional), drop ground, subsample, estimate normals.

    Returns the processed cloud and the indices of its points in ``cloud``.
    """
    idx = np.arange(len(cloud))
    if cfg.front_view:
        cloud, keep = crop_front_view(cloud)
        idx = idx[keep]
    ground = cfg.ground
    cloud, keep = remove_ground(cloud, ground)
    idx = idx[keep]
    cloud, keep = sample_points(cloud, cfg.sample_n, seed)
    idx = idx[keep]
    k = min(cfg.normals_k, len(cloud) - 1)
    normals = estimate_normals(cloud, k).normals
    return PointCloud(cloud.points, cloud.intensity, normals), idx


@dataclass
class PairFit:
    src: PointCloud
    src_index: np.ndarray
    tgt: PointCloud
    anchors: AnchorSet
    motion: SceneMotion
    history: list

    def owner_of_points(self) -> np.ndarray:
        return point_owner(self.src.points, self.motion.boxes.boxes)


def build_anchors(points: np.ndarray, cfg: PipelineConfig) -> AnchorSet:
    bounds = (points.min(axis=0), points.max(axis=0))
    grid = init_anchor_grid(bounds, cfg.anchor, points)
    return prune_boxes(grid, cfg.anchor.min_points, points)


def fit_pair(src_raw: PointCloud, tgt_raw: PointCloud, cfg: PipelineConfig, seed: int) -> PairFit:
    rng = np.random.default_rng(seed)
    s_src, s_tgt = (int(v) for v in rng.integers(0, 2**31 - 1, size=2))
    src, src_idx = preprocess(src_raw, cfg.ingest, s_src)
    tgt, _ = preprocess(tgt_raw, cfg.ingest, s_tgt)
    anchors = build_anchors(src.points, cfg)
    motion, history = optimize_scene(src, tgt, anchors, cfg.optim)
    return PairFit(src, src_idx, tgt, anchors, motion, history)


def predict_flow(fit: PairFit, threshold: float) -> np.ndarray:
    """Flow of the fitted (un-augmented) motion for every processed source point."""
    target = synthesize_target(fit.src, fit.motion.boxes, unaugmented(fit.motion), threshold)
    return target.points - fit.src.points


def make_labels(fit: PairFit, cfg: PipelineConfig, seed: int) -> list:
    """One :class:`LabelRecord` per augmentation variant."""
    thr = cfg.labelgen.threshold
    records = []
    for aug in augment_scene(fit.motion, cfg.augment, thr, seed=seed):
        target = synthesize_target(fit.src, fit.motion.boxes, aug, thr)
        flow = compute_flow_labels(fit.src, target)
        meta = label_metadata(fit.motion.boxes, aug, thr, seed)
        meta["final_loss"] = fit.history[-1].total
        records.append(LabelRecord(fit.src, target, flow, meta))
    return records
