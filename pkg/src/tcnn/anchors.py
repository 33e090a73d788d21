"""Anchor-box priors by k-means over training box sizes.

Distance between two ``(width, height)`` shapes is ``1 - IoU`` with the boxes
placed concentrically.  Seeding is k-means++ from an explicit seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MAX_ITER = 100


class InsufficientBoxes(ValueError):
    pass


@dataclass
class AnchorSet:
    anchors: np.ndarray  # (k, 2) normalised (width, height), sorted by area
    objective_history: list = field(default_factory=list)
    iterations: int = 0

    def __len__(self):
        return len(self.anchors)


def shape_iou(boxes: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """IoU of concentric boxes, ``(n, 2)`` x ``(k, 2)`` -> ``(n, k)``."""
    inter = np.minimum(boxes[:, None, 0], centroids[None, :, 0]) * np.minimum(boxes[:, None, 1], centroids[None, :, 1])
    union = (boxes[:, 0] * boxes[:, 1])[:, None] + (centroids[:, 0] * centroids[:, 1])[None, :] - inter
    return inter / union


def _cluster_cost(members: np.ndarray, centroid: np.ndarray) -> float:
    return float(np.sum(1.0 - shape_iou(members, centroid[None, :])))


def _plus_plus(boxes, k, rng):
    n = len(boxes)
    chosen = [int(rng.integers(n))]
    dist = 1.0 - shape_iou(boxes, boxes[chosen])[:, 0]
    for _ in range(1, k):
        w = dist ** 2
        total = w.sum()
        idx = int(rng.choice(n, p=w / total)) if total > 0 else int(rng.integers(n))
        chosen.append(idx)
        dist = np.minimum(dist, 1.0 - shape_iou(boxes, boxes[[idx]])[:, 0])
    return boxes[chosen].copy()


def kmeans_anchors(boxes, k: int = 12, seed: int = 0, max_iter: int = MAX_ITER) -> AnchorSet:
    """Cluster box shapes into ``k`` anchors.

    The update step tries the mean and the median of each cluster and keeps
    whichever lowers that cluster's cost, falling back to the current
    centroid, so the mean distance never increases between iterations.
    Empty clusters are re-seeded at the box farthest from its centroid.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 2)
    if len(boxes) == 0:
        raise InsufficientBoxes("insufficient boxes: no boxes to cluster")
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(boxes) < k:
        raise InsufficientBoxes(f"insufficient boxes: {len(boxes)} boxes for k={k}")
    if np.any(boxes <= 0):
        raise ValueError("box dimensions must be positive")
    rng = np.random.default_rng(seed)
    centroids = _plus_plus(boxes, k, rng)
    assign = None
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        dist = 1.0 - shape_iou(boxes, centroids)
        new_assign = dist.argmin(axis=1)
        counts = np.bincount(new_assign, minlength=k)
        for j in np.flatnonzero(counts == 0):
            far = int(np.argmax(dist[np.arange(len(boxes)), new_assign]))
            centroids[j] = boxes[far]
            dist = 1.0 - shape_iou(boxes, centroids)
            new_assign = dist.argmin(axis=1)
        for j in range(k):
            members = boxes[new_assign == j]
            if len(members) == 0:
                continue
            best, best_cost = centroids[j], _cluster_cost(members, centroids[j])
            for cand in (members.mean(axis=0), np.median(members, axis=0)):
                cost = _cluster_cost(members, cand)
                if cost < best_cost:
                    best, best_cost = cand, cost
            centroids[j] = best
        history.append(float(np.mean((1.0 - shape_iou(boxes, centroids))[np.arange(len(boxes)), new_assign])))
        if assign is not None and np.array_equal(assign, new_assign):
            break
        assign = new_assign
    order = np.lexsort((centroids[:, 0], centroids[:, 0] * centroids[:, 1]))
    return AnchorSet(centroids[order], history, it)


def anchor_objective(boxes, anchors) -> float:
    """Mean ``1 - IoU`` of each box to its nearest anchor."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 2)
    return float(np.mean(1.0 - shape_iou(boxes, np.asarray(anchors, dtype=np.float64)).max(axis=1)))
