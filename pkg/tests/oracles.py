"""Slow, independent reference scorers and random instance generators for the metric tests."""

import numpy as np

from tcnn.formats import Detection
from tcnn.synth import VideoAnnotation


def box_iou(a, b):
    w = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    h = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    sa = (a[2] - a[0]) * (a[3] - a[1])
    sb = (b[2] - b[0]) * (b[3] - b[1])
    if sa <= 0 or sb <= 0 or w * h == 0:
        return 0.0
    return w * h / (sa + sb - w * h)


def tube_iou(a: dict, b: dict):
    frames = set(a) | set(b)
    total = 0.0
    for f in frames:
        if f in a and f in b:
            total += box_iou(a[f], b[f])
    return total / len(frames) if frames else 0.0


def ranked(items):
    """Stable descending confidence order."""
    return [items[i] for i in sorted(range(len(items)), key=lambda i: (-items[i][0], i))]


def match_count(items, gts, overlap, alpha):
    """Greedy matching from scratch; returns the number of true positives."""
    used = set()
    tp = 0
    for _, key, payload in items:
        cands = [(overlap(payload, g), j) for j, g in enumerate(gts.get(key, [])) if (key, j) not in used]
        if not cands:
            continue
        best = max(o for o, _ in cands)
        j = min(j for o, j in cands if o == best)
        if best >= alpha:
            used.add((key, j))
            tp += 1
    return tp


def brute_ap(items, gts, overlap, alpha):
    order = ranked(items)
    num_gt = sum(len(v) for v in gts.values())
    precision, recall = [], []
    for k in range(1, len(order) + 1):
        tp = match_count(order[:k], gts, overlap, alpha)
        precision.append(tp / k)
        recall.append(tp / num_gt)
    ap, prev = 0.0, 0.0
    for k in range(len(order)):
        if recall[k] > prev:
            ap += (recall[k] - prev) * max(precision[k:])
            prev = recall[k]
    return ap


def classes_of(anns):
    return sorted({a.label for a in anns if any(b is not None for b in a.boxes)})


def brute_frame_map(dets, anns, alpha):
    out = {}
    for c in classes_of(anns):
        items = [(d.confidence, (d.video_id, f), d.boxes[f]) for d in dets if d.class_id == c for f in sorted(d.boxes)]
        gts = {}
        for a in anns:
            if a.label == c:
                for f, b in enumerate(a.boxes):
                    if b is not None:
                        gts.setdefault((a.video_id, f), []).append(b)
        out[c] = brute_ap(items, gts, box_iou, alpha)
    return out


def ann_tube(a):
    return {f: b for f, b in enumerate(a.boxes) if b is not None}


def brute_video_map(dets, anns, alpha):
    out = {}
    for c in classes_of(anns):
        items = [(d.confidence, d.video_id, d.boxes) for d in dets if d.class_id == c]
        gts = {}
        for a in anns:
            if a.label == c and any(b is not None for b in a.boxes):
                gts.setdefault(a.video_id, []).append(ann_tube(a))
        out[c] = brute_ap(items, gts, tube_iou, alpha)
    return out


def clipped_area(xs, ys, xmax):
    area = 0.0
    for i in range(len(xs) - 1):
        x0, x1, y0, y1 = xs[i], xs[i + 1], ys[i], ys[i + 1]
        if x0 >= xmax:
            break
        if x1 > xmax:
            y1 = y0 + (y1 - y0) * (xmax - x0) / (x1 - x0)
            x1 = xmax
        area += (x1 - x0) * (y0 + y1) / 2
    if xs[-1] < xmax:
        area += (xmax - xs[-1]) * ys[-1]
    return area / xmax


def brute_roc(dets, anns, alpha, fpr_max):
    gts = {}
    for a in anns:
        if a.label > 0 and any(b is not None for b in a.boxes):
            gts.setdefault((a.video_id, a.label), []).append(ann_tube(a))
    num_gt = sum(len(v) for v in gts.values())
    num_videos = len({a.video_id for a in anns})
    items = ranked([(d.confidence, (d.video_id, d.class_id), d.boxes) for d in dets])
    xs, ys = [0.0], [0.0]
    for t in sorted({d.confidence for d in dets}, reverse=True):
        kept = [it for it in items if it[0] >= t]
        tp = match_count(kept, gts, tube_iou, alpha)
        xs.append((len(kept) - tp) / num_videos)
        ys.append(tp / num_gt)
    return xs, ys, clipped_area(xs, ys, fpr_max)


def random_instance(rng, max_dets=50, num_classes=3, frames=10):
    """Small random videos with one or two tubes each and jittered detections."""
    anns, dets = [], []
    for v in range(int(rng.integers(1, 4))):
        vid = f"v{v}"
        for _ in range(int(rng.integers(1, 3))):
            label = int(rng.integers(1, num_classes + 1))
            start = int(rng.integers(0, frames // 2))
            stop = int(rng.integers(start + 1, frames + 1))
            x, y = rng.uniform(0, 20, 2)
            boxes = [None] * frames
            for f in range(start, stop):
                boxes[f] = np.array([x + f * 0.5, y, x + f * 0.5 + rng.uniform(5, 10), y + rng.uniform(5, 10)])
            anns.append(VideoAnnotation(vid, label, boxes))
    n = int(rng.integers(0, max_dets + 1))
    for _ in range(n):
        a = anns[int(rng.integers(len(anns)))]
        frames_a = [f for f, b in enumerate(a.boxes) if b is not None]
        quality = int(rng.integers(3))  # 0 good, 1 jittered, 2 poor
        if quality == 2:
            lo = int(rng.integers(0, frames))
            hi = int(rng.integers(lo + 1, frames + 1))
        else:
            lo = max(0, frames_a[0] - int(rng.integers(0, 2)) * quality)
            hi = min(frames, frames_a[-1] + 1 + int(rng.integers(0, 2)) * quality)
        boxes = {}
        for f in range(lo, hi):
            ref = a.boxes[f] if a.boxes[f] is not None else a.boxes[frames_a[0]]
            boxes[f] = ref + rng.normal(0, (0.3, 1.5, 5.0)[quality], 4)
            boxes[f][2:] = np.maximum(boxes[f][2:], boxes[f][:2] + 0.5)
        label = a.label if rng.uniform() < 0.8 else int(rng.integers(1, num_classes + 1))
        conf = rng.uniform() * 0.6 + 0.4 * (quality == 0)
        conf = float(np.round(conf, 1)) if rng.uniform() < 0.3 else float(conf)
        dets.append(Detection(a.video_id if rng.uniform() < 0.9 else "v0", label, conf, boxes))
    return dets, anns
