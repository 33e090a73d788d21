"""Detection metrics.

Matching is greedy by confidence (stable on input order for ties): a
detection is a true positive when its best overlap among the still-unmatched
ground truths of its class is at least ``alpha``.  AP is the area under the
all-point interpolated precision/recall curve.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .boxes import iou
from .detection import sequence_iou

DEFAULT_FPR_MAX = 0.6


@dataclass
class PRCurve:
    precision: np.ndarray
    recall: np.ndarray
    thresholds: np.ndarray


@dataclass
class ROCCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray


@dataclass
class APResult:
    per_class: dict  # class id -> AP
    curves: dict  # class id -> PRCurve
    notes: list = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.per_class.values()))) if self.per_class else 0.0


@dataclass
class MatchResult:
    true_positive: np.ndarray  # per ranked detection
    confidences: np.ndarray
    gt_matched: list
    num_gt: int


def average_precision(tp: np.ndarray, num_gt: int) -> float:
    tp = np.asarray(tp, dtype=np.float64)
    if num_gt <= 0:
        raise ValueError("AP is undefined without ground truth")
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / num_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mrec = np.concatenate([[0.0], recall, [recall[-1]]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def _rank(confidences) -> list[int]:
    return sorted(range(len(confidences)), key=lambda i: -confidences[i])


def _greedy(items, gts_for, overlap, alpha) -> MatchResult:
    """``items``: list of (confidence, key, payload); ``gts_for[key]``: list of ground truths."""
    order = _rank([c for c, _, _ in items])
    matched = {k: [False] * len(v) for k, v in gts_for.items()}
    tp = np.zeros(len(items))
    for r, i in enumerate(order):
        _, key, payload = items[i]
        best, best_j = -1.0, -1
        for j, g in enumerate(gts_for.get(key, [])):
            if matched[key][j]:
                continue
            o = overlap(payload, g)
            if o > best:
                best, best_j = o, j
        if best_j >= 0 and best >= alpha:
            matched[key][best_j] = True
            tp[r] = 1.0
    conf = np.array([items[i][0] for i in order])
    return MatchResult(tp, conf, matched, sum(len(v) for v in gts_for.values()))


def _classes(annotations) -> set:
    return {a.label for a in annotations if a.label > 0 and a.annotated_frames()}


def _frame_items(dets, cls):
    items = []
    for d in dets:
        if d.class_id != cls:
            continue
        for f in d.frames():
            items.append((d.confidence, (d.video_id, f), d.boxes[f]))
    return items


def frame_gts(annotations, cls) -> dict:
    out = {}
    for a in annotations:
        if a.label != cls:
            continue
        for f in a.annotated_frames():
            out.setdefault((a.video_id, f), []).append(a.boxes[f])
    return out


def video_gts(annotations, cls) -> dict:
    out = {}
    for a in annotations:
        if a.label == cls and a.annotated_frames():
            out.setdefault(a.video_id, []).append(a.tube())
    return out


def _ap_result(dets, annotations, alpha, items_fn, gts_fn, overlap) -> APResult:
    classes = _classes(annotations)
    res = APResult({}, {})
    for c in sorted({d.class_id for d in dets} - classes):
        res.notes.append(f"class {c} has detections but no annotations; AP undefined, excluded")
    for c in sorted(classes):
        m = _greedy(items_fn(dets, c), gts_fn(annotations, c), overlap, alpha)
        res.per_class[c] = average_precision(m.true_positive, m.num_gt)
        ctp = np.cumsum(m.true_positive)
        n = np.arange(1, len(ctp) + 1)
        res.curves[c] = PRCurve(ctp / np.maximum(n, 1), ctp / m.num_gt, m.confidences)
    return res


def frame_map(detections, annotations, alpha: float = 0.5) -> APResult:
    """Per-class AP over individual frame boxes (each inherits its sequence's confidence)."""
    return _ap_result(detections, annotations, alpha, _frame_items, frame_gts, iou)


def _video_items(dets, cls):
    return [(d.confidence, d.video_id, d) for d in dets if d.class_id == cls]


def video_map(detections, annotations, alpha: float = 0.5) -> APResult:
    """Per-class AP over whole tubes matched by spatio-temporal IoU."""
    return _ap_result(detections, annotations, alpha, _video_items, video_gts,
                      lambda d, g: sequence_iou(d.boxes, g))


def roc_auc(detections, annotations, alpha: float = 0.2,
            fpr_max: float = DEFAULT_FPR_MAX) -> tuple[ROCCurve, float]:
    """ROC over confidence thresholds, all classes pooled.

    TPR is the matched fraction of ground-truth tubes, FPR the number of false
    positives per video.  The curve is cut at ``fpr_max`` (interpolating the
    crossing point, or extending the last TPR flat) and the trapezoid area is
    divided by ``fpr_max``.
    """
    gts = {}
    for c in _classes(annotations):
        for vid, tubes in video_gts(annotations, c).items():
            gts.setdefault((vid, c), []).extend(tubes)
    num_gt = sum(len(v) for v in gts.values())
    if num_gt == 0:
        raise ValueError("ROC needs at least one ground-truth tube")
    num_videos = len({a.video_id for a in annotations})
    items = [(d.confidence, (d.video_id, d.class_id), d) for d in detections]
    m = _greedy(items, gts, lambda d, g: sequence_iou(d.boxes, g), alpha)
    ctp = np.cumsum(m.true_positive)
    cfp = np.cumsum(1.0 - m.true_positive)
    # one point per distinct threshold: the last rank holding that confidence
    last = [i for i in range(len(m.confidences))
            if i + 1 == len(m.confidences) or m.confidences[i + 1] != m.confidences[i]]
    fpr = np.concatenate([[0.0], cfp[last] / num_videos])
    tpr = np.concatenate([[0.0], ctp[last] / num_gt])
    thr = np.concatenate([[np.inf], m.confidences[last]])
    curve = ROCCurve(fpr, tpr, thr)
    return curve, truncated_auc(fpr, tpr, fpr_max)


def truncated_auc(fpr, tpr, fpr_max: float) -> float:
    xs, ys = [float(fpr[0])], [float(tpr[0])]
    for x, y in zip(fpr[1:], tpr[1:]):
        x, y = float(x), float(y)
        if x > fpr_max:
            x0, y0 = xs[-1], ys[-1]
            ys.append(y0 + (y - y0) * (fpr_max - x0) / (x - x0))
            xs.append(fpr_max)
            break
        xs.append(x)
        ys.append(y)
    if xs[-1] < fpr_max:
        xs.append(fpr_max)
        ys.append(ys[-1])
    area = sum((xs[i + 1] - xs[i]) * (ys[i + 1] + ys[i]) / 2 for i in range(len(xs) - 1))
    return area / fpr_max


def video_classification_accuracy(predictions: dict, labels: dict) -> float:
    if set(predictions) != set(labels):
        raise ValueError("prediction and label video ids differ")
    if not labels:
        raise ValueError("no videos")
    return sum(predictions[v] == labels[v] for v in labels) / len(labels)
