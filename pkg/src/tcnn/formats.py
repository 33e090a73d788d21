"""Plain-text file formats: annotations, detections, anchor sets, key=value configs.

Annotation lines::

    video_id frame_idx class_id x1 y1 x2 y2
    video_id frame_idx -1                      # frame without an action

Detection records: a header line ``video_id class_id confidence n_frames``
followed by ``n_frames`` lines ``frame_idx x1 y1 x2 y2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .synth import VideoAnnotation
from .tensor_io import atomic_write


def _fmt(v: float) -> str:
    return f"{float(v):.4f}"


# ---------------------------------------------------------------------------
# annotations
# ---------------------------------------------------------------------------

def format_annotations(annotations) -> str:
    lines = []
    for ann in annotations:
        for f, box in enumerate(ann.boxes):
            if box is None:
                lines.append(f"{ann.video_id} {f} -1")
            else:
                lines.append(" ".join([ann.video_id, str(f), str(ann.label)] + [_fmt(v) for v in box]))
    return "\n".join(lines) + "\n"


def parse_annotations(text: str) -> list[VideoAnnotation]:
    by_video: dict[str, dict] = {}
    order = []
    for n, line in enumerate(text.splitlines(), 1):
        tok = line.split()
        if not tok:
            continue
        if len(tok) not in (3, 7):
            raise ValueError(f"annotation line {n}: expected 3 or 7 fields, got {len(tok)}")
        vid, frame, cls = tok[0], int(tok[1]), int(tok[2])
        if vid not in by_video:
            by_video[vid] = {"label": None, "frames": {}}
            order.append(vid)
        rec = by_video[vid]
        if cls < 0:
            rec["frames"][frame] = None
            continue
        if rec["label"] not in (None, cls):
            raise ValueError(f"annotation line {n}: video {vid} has several classes")
        rec["label"] = cls
        rec["frames"][frame] = np.array([float(v) for v in tok[3:]])
    out = []
    for vid in order:
        rec = by_video[vid]
        frames = rec["frames"]
        n_frames = max(frames) + 1
        if sorted(frames) != list(range(n_frames)):
            raise ValueError(f"video {vid}: frame indices are not contiguous")
        label = rec["label"] if rec["label"] is not None else 0
        out.append(VideoAnnotation(vid, label, [frames[i] for i in range(n_frames)]))
    return out


def write_annotations(path, annotations) -> None:
    atomic_write(path, format_annotations(annotations))


def read_annotations(path) -> list[VideoAnnotation]:
    return parse_annotations(Path(path).read_text())


# ---------------------------------------------------------------------------
# detections
# ---------------------------------------------------------------------------

@dataclass
class Detection:
    video_id: str
    class_id: int
    confidence: float
    boxes: dict = field(default_factory=dict)  # frame index -> (4,) box, original coordinates
    sequence: object = None  # LinkedSequence, when produced by the pipeline

    def frames(self) -> list[int]:
        return sorted(self.boxes)


def sort_detections(dets):
    """Deterministic order: by video id, then confidence descending."""
    return sorted(dets, key=lambda d: (d.video_id, -d.confidence))


def format_detections(dets) -> str:
    lines = []
    for d in sort_detections(dets):
        frames = d.frames()
        lines.append(f"{d.video_id} {d.class_id} {float(d.confidence):.6f} {len(frames)}")
        for f in frames:
            lines.append(" ".join([str(f)] + [_fmt(v) for v in d.boxes[f]]))
    return "\n".join(lines) + ("\n" if lines else "")


def parse_detections(text: str) -> list[Detection]:
    lines = [ln.split() for ln in text.splitlines() if ln.strip()]
    out, i = [], 0
    while i < len(lines):
        head = lines[i]
        if len(head) != 4:
            raise ValueError(f"detection header at record line {i + 1} must have 4 fields")
        vid, cls, conf, n = head[0], int(head[1]), float(head[2]), int(head[3])
        boxes = {}
        for tok in lines[i + 1:i + 1 + n]:
            if len(tok) != 5:
                raise ValueError("detection frame line must be 'frame x1 y1 x2 y2'")
            boxes[int(tok[0])] = np.array([float(v) for v in tok[1:]])
        if len(boxes) != n:
            raise ValueError(f"detection for {vid} is truncated")
        out.append(Detection(vid, cls, conf, boxes))
        i += 1 + n
    return out


def write_detections(path, dets) -> None:
    atomic_write(path, format_detections(dets))


def read_detections(path) -> list[Detection]:
    return parse_detections(Path(path).read_text())


# ---------------------------------------------------------------------------
# anchors
# ---------------------------------------------------------------------------

def format_anchors(anchors) -> str:
    return "".join(f"{w:.6f} {h:.6f}\n" for w, h in np.asarray(anchors).reshape(-1, 2))


def write_anchors(path, anchors) -> None:
    atomic_write(path, format_anchors(anchors))


def read_anchors(path) -> np.ndarray:
    rows = [ln.split() for ln in Path(path).read_text().splitlines() if ln.strip()]
    return np.array([[float(a), float(b)] for a, b in rows])


# ---------------------------------------------------------------------------
# key=value configs
# ---------------------------------------------------------------------------

def parse_config(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {n}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def read_config(path) -> dict[str, str]:
    return parse_config(Path(path).read_text())


def format_config(values: dict) -> str:
    return "".join(f"{k}={v}\n" for k, v in values.items())
