"""Pure-numpy reference for the compiled box kernels.

Box rows are ``[cx, cy, cz, hx, hy, hz, heading]`` with *half* sizes.
Per-axis membership factor::

    f = (sigma(a(d + h)) - sigma(a(d - h))) / (2 sigma(a h) - 1)
      = (tanh(a(d + h)/2) - tanh(a(d - h)/2)) / (2 tanh(a h / 2))
"""

from __future__ import annotations

import numpy as np

_CLIP = 300.0


def _sech2(x):
    return 1.0 / np.cosh(np.clip(x, -_CLIP, _CLIP)) ** 2


def _local(points, box):
    c, s = np.cos(box[6]), np.sin(box[6])
    q = points - box[:3]
    d = np.empty_like(q)
    d[:, 0] = c * q[:, 0] + s * q[:, 1]
    d[:, 1] = -s * q[:, 0] + c * q[:, 1]
    d[:, 2] = q[:, 2]
    return d


def soft_membership(points, box, alpha):
    points = np.ascontiguousarray(points, dtype=np.float64)
    box = np.asarray(box, dtype=np.float64)
    d = _local(points, box)
    h = box[3:6]
    a = 0.5 * alpha
    num = np.tanh(a * (d + h)) - np.tanh(a * (d - h))
    f = num / (2.0 * np.tanh(a * h))
    return np.clip(f[:, 0] * f[:, 1] * f[:, 2], 0.0, 1.0)


def soft_membership_grad(points, box, alpha):
    """Weights and their gradient w.r.t. ``[cx, cy, cz, hx, hy, hz, heading]``."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    box = np.asarray(box, dtype=np.float64)
    d = _local(points, box)
    h = box[3:6]
    a = 0.5 * alpha
    up, lo = a * (d + h), a * (d - h)
    A, B = np.tanh(up), np.tanh(lo)
    T = np.tanh(a * h)
    sa, sb = _sech2(up), _sech2(lo)
    st = _sech2(a * h)
    f = (A - B) / (2.0 * T)
    df_dd = a * (sa - sb) / (2.0 * T)
    df_dh = a * (sa + sb) / (2.0 * T) - (A - B) * a * st / (2.0 * T * T)

    w = f[:, 0] * f[:, 1] * f[:, 2]
    others = np.stack([f[:, 1] * f[:, 2], f[:, 0] * f[:, 2], f[:, 0] * f[:, 1]], axis=1)
    dw_dd = df_dd * others
    grad = np.empty((points.shape[0], 7))
    c, s = np.cos(box[6]), np.sin(box[6])
    # dd/dc = -Rz(-heading)
    grad[:, 0] = -(c * dw_dd[:, 0] - s * dw_dd[:, 1])
    grad[:, 1] = -(s * dw_dd[:, 0] + c * dw_dd[:, 1])
    grad[:, 2] = -dw_dd[:, 2]
    grad[:, 3:6] = df_dh * others
    grad[:, 6] = dw_dd[:, 0] * d[:, 1] - dw_dd[:, 1] * d[:, 0]
    return np.clip(w, 0.0, 1.0), grad


def points_in_boxes(points, boxes, margin=0.0):
    """``(K, N)`` uint8 mask: point inside box (inclusive faces) grown by ``margin``."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    boxes = np.atleast_2d(np.asarray(boxes, dtype=np.float64))
    out = np.zeros((boxes.shape[0], points.shape[0]), dtype=np.uint8)
    for k, box in enumerate(boxes):
        d = np.abs(_local(points, box))
        out[k] = np.all(d <= box[3:6] + margin, axis=1)
    return out


def nearest_center_assignment(points, boxes, mask):
    """Index of the containing box with the nearest centre per point, ``-1`` if none."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    boxes = np.atleast_2d(np.asarray(boxes, dtype=np.float64))
    n = points.shape[0]
    best = np.full(n, -1, dtype=np.int64)
    best_d = np.full(n, np.inf)
    for k in range(boxes.shape[0]):
        sel = mask[k].astype(bool)
        if not sel.any():
            continue
        diff = points[sel] - boxes[k, :3]
        d2 = np.einsum("ij,ij->i", diff, diff)
        idx = np.flatnonzero(sel)
        better = d2 < best_d[idx]
        best[idx[better]] = k
        best_d[idx[better]] = d2[better]
    return best
