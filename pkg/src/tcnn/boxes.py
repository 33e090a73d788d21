"""Axis-aligned box helpers.  A box is ``(x1, y1, x2, y2)``; arrays of boxes are ``(n, 4)``."""

from __future__ import annotations

import numpy as np


def area(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    return np.clip(boxes[..., 2] - boxes[..., 0], 0, None) * np.clip(boxes[..., 3] - boxes[..., 1], 0, None)


def iou(a, b) -> float:
    """Intersection over union of two boxes; 0 if either has zero area."""
    ax1, ay1, ax2, ay2 = (float(v) for v in a)
    bx1, by1, bx2, by2 = (float(v) for v in b)
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (bx2 - bx1) * (by2 - by1)
    if area_a <= 0 or area_b <= 0:
        return 0.0
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (area_a + area_b - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU, shape ``(len(a), len(b))``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    aa, ab = area(a), area(b)
    union = aa[:, None] + ab[None, :] - inter
    valid = (aa[:, None] > 0) & (ab[None, :] > 0)
    return np.where(valid, inter / np.where(union > 0, union, 1.0), 0.0)


def clip_boxes(boxes: np.ndarray, width: float, height: float) -> np.ndarray:
    boxes = np.array(boxes, dtype=np.float64)
    boxes[..., 0::2] = np.clip(boxes[..., 0::2], 0, width)
    boxes[..., 1::2] = np.clip(boxes[..., 1::2], 0, height)
    return boxes


def scale_boxes(boxes: np.ndarray, sx: float, sy: float) -> np.ndarray:
    boxes = np.array(boxes, dtype=np.float64)
    boxes[..., 0::2] *= sx
    boxes[..., 1::2] *= sy
    return boxes


def union_box(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return np.array([boxes[:, 0].min(), boxes[:, 1].min(), boxes[:, 2].max(), boxes[:, 3].max()])


def encode_deltas(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Regression targets taking ``src`` boxes to ``dst`` boxes: (dx, dy, dw, dh)."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    sw, sh = src[..., 2] - src[..., 0], src[..., 3] - src[..., 1]
    dw, dh = dst[..., 2] - dst[..., 0], dst[..., 3] - dst[..., 1]
    scx, scy = src[..., 0] + 0.5 * sw, src[..., 1] + 0.5 * sh
    dcx, dcy = dst[..., 0] + 0.5 * dw, dst[..., 1] + 0.5 * dh
    return np.stack([(dcx - scx) / sw, (dcy - scy) / sh, np.log(dw / sw), np.log(dh / sh)], axis=-1)


def apply_deltas(src: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Inverse of :func:`encode_deltas`: shift the centre by (dx*w, dy*h), scale size by exp(dw), exp(dh)."""
    src = np.asarray(src, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    if not np.all(np.isfinite(deltas)):
        raise ValueError("non-finite regression deltas")
    w, h = src[..., 2] - src[..., 0], src[..., 3] - src[..., 1]
    cx, cy = src[..., 0] + 0.5 * w, src[..., 1] + 0.5 * h
    ncx, ncy = cx + deltas[..., 0] * w, cy + deltas[..., 1] * h
    nw, nh = w * np.exp(deltas[..., 2]), h * np.exp(deltas[..., 3])
    return np.stack([ncx - 0.5 * nw, ncy - 0.5 * nh, ncx + 0.5 * nw, ncy + 0.5 * nh], axis=-1)
