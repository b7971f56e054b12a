"""Pure-numpy implementations of the hot kernels.

These are the fallback for the compiled ``_fastops`` extension.  Both
backends must agree to ~1e-12; the parity tests enforce that.

Kernels:
  - im2col3: unfold a [C,H,W] map into [H*W, C*9] patch rows for a 3x3
    stride-1 zero-padded convolution (column order ci*9 + ki*3 + kj, matching
    ``weight.reshape(C_out, C_in*9)``).
  - rotated_iou_pairs: elementwise IoU of paired oriented BEV boxes via
    Sutherland-Hodgman polygon clipping, vectorized over the pair axis.
"""

from __future__ import annotations

import numpy as np


def im2col3(x: np.ndarray) -> np.ndarray:
    c, h, w = x.shape
    padded = np.zeros((c, h + 2, w + 2), dtype=np.float64)
    padded[:, 1:-1, 1:-1] = x
    windows = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(1, 2))
    # windows: [C, H, W, 3, 3] -> [H*W, C*9]
    return np.ascontiguousarray(windows.transpose(1, 2, 0, 3, 4)).reshape(h * w, c * 9)


def box_corners(boxes: np.ndarray) -> np.ndarray:
    """Corner list [N,4,2] in CCW order for boxes [N,5] = (x, y, w, l, yaw).

    Length l runs along the heading, width w across it.
    """
    x, y, w, l, yaw = (boxes[:, i] for i in range(5))
    cs, sn = np.cos(yaw), np.sin(yaw)
    mult = np.array([[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]])
    along = 0.5 * l[:, None] * mult[:, 0]
    across = 0.5 * w[:, None] * mult[:, 1]
    cx = x[:, None] + along * cs[:, None] - across * sn[:, None]
    cy = y[:, None] + along * sn[:, None] + across * cs[:, None]
    return np.stack([cx, cy], axis=-1)


def _clip_halfplane(verts, counts, a, b):
    """Clip each CCW polygon (verts[i, :counts[i]]) by the left side of a->b."""
    n, m = verts.shape[0], verts.shape[1]
    e = b - a
    d = e[:, 0, None] * (verts[:, :, 1] - a[:, 1, None]) - e[:, 1, None] * (
        verts[:, :, 0] - a[:, 0, None]
    )
    idx = np.arange(m)[None, :]
    valid = idx < counts[:, None]
    prev = np.where(idx == 0, np.maximum(counts[:, None] - 1, 0), idx - 1)
    pv = np.take_along_axis(verts, prev[:, :, None], axis=1)
    pd = np.take_along_axis(d, prev, axis=1)

    inside = (d >= 0.0) & valid
    p_inside = pd >= 0.0
    crossing = (inside != (p_inside & valid)) & valid
    denom = np.where(crossing, pd - d, 1.0)
    t = np.where(crossing, pd / denom, 0.0)
    inter = pv + t[:, :, None] * (verts - pv)

    out = np.empty((n, 2 * m, 2), dtype=np.float64)
    emit = np.zeros((n, 2 * m), dtype=bool)
    out[:, 0::2] = inter
    emit[:, 0::2] = crossing
    out[:, 1::2] = verts
    emit[:, 1::2] = inside

    order = np.argsort(~emit, axis=1, kind="stable")
    out = np.take_along_axis(out, order[:, :, None], axis=1)
    new_counts = emit.sum(axis=1)
    keep = min(2 * m, m + 2)
    return out[:, :keep], new_counts


def _poly_areas(verts, counts):
    m = verts.shape[1]
    idx = np.arange(m)[None, :]
    valid = idx < counts[:, None]
    nxt = np.where(idx + 1 >= counts[:, None], 0, idx + 1)
    nv = np.take_along_axis(verts, np.maximum(nxt, 0)[:, :, None], axis=1)
    contrib = verts[:, :, 0] * nv[:, :, 1] - nv[:, :, 0] * verts[:, :, 1]
    area = 0.5 * np.where(valid, contrib, 0.0).sum(axis=1)
    return np.where(counts >= 3, area, 0.0)


def rotated_iou_pairs(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    boxes_a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 5)
    boxes_b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 5)
    if boxes_a.shape != boxes_b.shape:
        raise ValueError(f"paired IoU needs equal shapes, got {boxes_a.shape} vs {boxes_b.shape}")
    n = boxes_a.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.float64)

    ca = box_corners(boxes_a)
    cb = box_corners(boxes_b)
    area_a = np.abs(boxes_a[:, 2] * boxes_a[:, 3])
    area_b = np.abs(boxes_b[:, 2] * boxes_b[:, 3])

    verts = ca
    counts = np.full(n, 4, dtype=np.int64)
    for k in range(4):
        verts, counts = _clip_halfplane(verts, counts, cb[:, k], cb[:, (k + 1) % 4])
    inter = np.clip(_poly_areas(verts, counts), 0.0, None)
    union = area_a + area_b - inter
    return np.where((union > 0.0) & (area_a > 0.0) & (area_b > 0.0), inter / union, 0.0)
