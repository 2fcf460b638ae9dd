"""Pseudo-label synthesis and the ``.sfl`` label file format.

``.sfl`` layout (little-endian)::

    b"3DSF" | u32 version (=1) | u32 N | N*3 float32 source | N*3 float32 flow
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import FormatError, InvalidArgument
from .ingest import PointCloud

MAGIC = b"3DSF"
VERSION = 1
_HEADER = struct.Struct("<4sII")


@dataclass
class FlowLabel:
    flow: np.ndarray

    def __post_init__(self):
        self.flow = np.asarray(self.flow).reshape(-1, 3)

    def __len__(self):
        return self.flow.shape[0]


@dataclass
class LabelRecord:
    source: PointCloud
    target: PointCloud
    flow: FlowLabel
    metadata: dict = field(default_factory=dict)

    def check(self, tol: float = 1e-6) -> None:
        err = np.abs(self.source.points + self.flow.flow - self.target.points)
        if len(self.source) != len(self.flow) or err.size and err.max() > tol:
            raise InvalidArgument("label record violates source + flow == target")


def point_owner(points: np.ndarray, boxes) -> np.ndarray:
    """Box index owning each point (nearest centre among containing boxes), ``-1`` for none."""
    if not boxes:
        return np.full(len(points), -1, dtype=np.int64)
    rows = np.array([np.concatenate([b.center, b.half, [b.heading]]) for b in boxes])
    mask = kernels.points_in_boxes(points, rows)
    return kernels.nearest_center_assignment(points, rows, mask)


def synthesize_target(src: PointCloud, anchors, aug, threshold: float) -> PointCloud:
    """Warp the source with augmented motions.

    Every point first takes the ego transform. A point whose owning box has
    probability ``>= threshold`` then takes that box's motion, rotating about
    the ego-moved box centre.
    """
    boxes = anchors.boxes
    if not (len(boxes) == len(aug.per_box) == len(aug.p_m)):
        raise InvalidArgument("augmented scene does not match the anchor set")
    pts = src.points
    re, te = aug.ego.rotation, aug.ego.translation
    out = pts @ re.T + te
    owner = point_owner(pts, boxes)
    for k, box in enumerate(boxes):
        if aug.p_m[k] < threshold:
            continue
        sel = owner == k
        if not sel.any():
            continue
        ce = re @ box.center + te
        tf = aug.per_box[k]
        out[sel] = (out[sel] - ce) @ tf.rotation.T + ce + tf.translation
    return PointCloud(out, src.intensity)


def compute_flow_labels(src: PointCloud, target: PointCloud) -> FlowLabel:
    if len(src) != len(target):
        raise InvalidArgument(f"source has {len(src)} points, target {len(target)}")
    return FlowLabel(target.points - src.points)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serialisable: {type(o)}")


def write_sfl(path, source: np.ndarray, flow: np.ndarray) -> None:
    src32 = np.ascontiguousarray(source, dtype="<f4").reshape(-1, 3)
    flow32 = np.ascontiguousarray(flow, dtype="<f4").reshape(-1, 3)
    if src32.shape != flow32.shape:
        raise InvalidArgument("source and flow shapes differ")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, src32.shape[0]))
        fh.write(src32.tobytes())
        fh.write(flow32.tobytes())


def read_sfl(path) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(source, flow)`` as ``(N, 3)`` float32 arrays."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, n = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if len(data) != _HEADER.size + 24 * n:
        raise FormatError(f"{path}: expected {_HEADER.size + 24 * n} bytes, found {len(data)}")
    body = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(2, n, 3)
    return body[0].copy(), body[1].copy()


def write_label_pair(record: LabelRecord, out_dir, pair_id: str) -> tuple[str, str]:
    """Write ``<pair_id>.sfl`` and ``<pair_id>.meta.json``; returns both paths."""
    record.check()
    os.makedirs(out_dir, exist_ok=True)
    sfl = os.path.join(out_dir, f"{pair_id}.sfl")
    meta = os.path.join(out_dir, f"{pair_id}.meta.json")
    write_sfl(sfl, record.source.points, record.flow.flow)
    with open(meta, "w") as fh:
        json.dump(record.metadata, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    return sfl, meta


def label_metadata(anchors, aug, threshold: float, seed: int | None = None) -> dict:
    return {
        "boxes": [b.to_dict() for b in anchors.boxes],
        "ego": aug.ego.to_dict(),
        "per_box": [tf.to_dict() for tf in aug.per_box],
        "p_m": [float(p) for p in aug.p_m],
        "threshold": float(threshold),
        "augmentation": aug.provenance,
        "seed": seed,
    }
