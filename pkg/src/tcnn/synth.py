"""Synthetic action videos with exact box annotations.

An "action" is a textured rectangle moving with a class-specific motion
pattern over a noisy static background.  Untrimmed videos interleave
8-frame action segments with background segments, some of which contain a
distractor: the same kind of rectangle, jittering in place instead of
performing the action.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from .network import CLIP_LEN

PATTERNS = ("horizontal", "vertical", "diagonal", "oscillation")
# per-class colour tint of the rectangle texture
TINTS = np.array([
    [1.0, 0.35, 0.35],
    [0.35, 1.0, 0.35],
    [0.35, 0.35, 1.0],
    [1.0, 1.0, 0.35],
])
MIN_BOX = 8


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for the named purpose, derived from one seed."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


@dataclass
class SynthSpec:
    num_classes: int = 3
    num_videos: int = 20
    frame_size: tuple = (60, 80)
    clip_length: int = CLIP_LEN
    frames_per_video: int = 24
    noise: float = 0.25
    box_range: tuple = (14, 22)
    speed: float = 2.0
    untrimmed: bool = False
    distractor_rate: float = 0.0
    seed: int = 0
    id_prefix: str = "v"

    def __post_init__(self):
        if not 1 <= self.num_classes <= len(PATTERNS):
            raise ValueError(f"num_classes must be in 1..{len(PATTERNS)}")
        h, w = self.frame_size
        lo, hi = self.box_range
        if lo < MIN_BOX or hi < lo:
            raise ValueError(f"box range {self.box_range} invalid (minimum box is {MIN_BOX})")
        if min(h, w) < hi + 2 * self.speed * 4:
            raise ValueError(f"frame size {self.frame_size} too small for boxes up to {hi}px")


@dataclass
class VideoAnnotation:
    video_id: str
    label: int  # 1..N
    boxes: list = field(default_factory=list)  # per frame: (4,) array or None
    distractor_frames: list = field(default_factory=list)  # not serialised
    distractor_boxes: dict = field(default_factory=dict)  # frame -> box, not serialised

    @property
    def num_frames(self) -> int:
        return len(self.boxes)

    def annotated_frames(self) -> list[int]:
        return [i for i, b in enumerate(self.boxes) if b is not None]

    def tube(self) -> dict:
        return {i: np.asarray(b, dtype=np.float64) for i, b in enumerate(self.boxes) if b is not None}


def _trajectory(pattern: str, n: int, size, frame, speed, rng):
    """Integer top-left corners for ``n`` frames that keep the box inside the frame."""
    bw, bh = size
    fh, fw = frame
    t = np.arange(n, dtype=np.float64)
    room_x, room_y = fw - bw, fh - bh
    sx, sy = rng.choice([-1.0, 1.0], size=2)
    if pattern == "horizontal":
        vx, vy = sx * min(speed, room_x / max(n - 1, 1)), 0.0
    elif pattern == "vertical":
        vx, vy = 0.0, sy * min(speed, room_y / max(n - 1, 1))
    elif pattern == "diagonal":
        s = min(speed / math.sqrt(2) * 1.2, room_x / max(n - 1, 1), room_y / max(n - 1, 1))
        vx, vy = sx * s, sy * s
    else:
        vx = vy = 0.0
    if pattern == "oscillation":
        amp = min(10.0, room_x / 2 - 1)
        x0 = rng.uniform(amp, room_x - amp)
        y0 = rng.uniform(0, room_y)
        xs = x0 + amp * np.sin(2 * math.pi * t / 12.0 + rng.uniform(0, 2 * math.pi))
        ys = np.full(n, y0)
    else:
        span_x, span_y = vx * (n - 1), vy * (n - 1)
        x0 = rng.uniform(max(0, -span_x), min(room_x, room_x - span_x))
        y0 = rng.uniform(max(0, -span_y), min(room_y, room_y - span_y))
        xs, ys = x0 + vx * t, y0 + vy * t
    xs = np.clip(np.round(xs), 0, room_x).astype(int)
    ys = np.clip(np.round(ys), 0, room_y).astype(int)
    return xs, ys


def _texture(bw, bh, label, rng):
    yy, xx = np.mgrid[0:bh, 0:bw]
    period = 4
    checker = ((yy // (period // 2) + xx // (period // 2)) % 2).astype(np.float64)
    base = 0.8 + 0.8 * checker + 0.1 * rng.standard_normal((bh, bw))
    return TINTS[label - 1][:, None, None] * base[None]


def _render(video, xs, ys, tex, frames):
    _, bh, bw = tex.shape
    for f, x, y in zip(frames, xs, ys):
        video[:, f, y:y + bh, x:x + bw] = tex


def generate_video(spec: SynthSpec, index: int, label: int | None = None):
    """Render video ``index`` of ``spec``.  Returns ``(video, annotation)``."""
    rng = substream(spec.seed, f"video-{index}")
    if label is None:
        label = int(index % spec.num_classes) + 1
    fh, fw = spec.frame_size
    n = spec.frames_per_video
    video = np.empty((3, n, fh, fw), dtype=np.float64)
    background = 0.3 * rng.standard_normal((3, 1, fh // 4 + 1, fw // 4 + 1))
    background = np.repeat(np.repeat(background, 4, axis=2), 4, axis=3)[:, :, :fh, :fw]
    video[:] = background + spec.noise * rng.standard_normal(video.shape)
    bw = int(rng.integers(spec.box_range[0], spec.box_range[1] + 1))
    bh = int(rng.integers(spec.box_range[0], spec.box_range[1] + 1))
    tex = _texture(bw, bh, label, rng)
    boxes = [None] * n
    distractor_frames = []
    distractor_boxes = {}
    pattern = PATTERNS[label - 1]

    if not spec.untrimmed:
        action_frames = list(range(n))
    else:
        segs = max(1, n // spec.clip_length)
        length = int(rng.integers(1, max(2, segs // 2) + 1))
        start = int(rng.integers(0, segs - length + 1))
        action_frames = list(range(start * spec.clip_length, min(n, (start + length) * spec.clip_length)))
        for s in range(segs):
            if start <= s < start + length or rng.random() >= spec.distractor_rate:
                continue
            frames = list(range(s * spec.clip_length, min(n, (s + 1) * spec.clip_length)))
            x0 = int(rng.integers(0, fw - bw + 1))
            y0 = int(rng.integers(0, fh - bh + 1))
            jx = np.clip(x0 + rng.integers(-1, 2, size=len(frames)), 0, fw - bw)
            jy = np.clip(y0 + rng.integers(-1, 2, size=len(frames)), 0, fh - bh)
            _render(video, jx, jy, tex, frames)
            distractor_frames.extend(frames)
            for f, x, y in zip(frames, jx, jy):
                distractor_boxes[f] = np.array([x, y, x + bw, y + bh], dtype=np.float64)

    xs, ys = _trajectory(pattern, len(action_frames), (bw, bh), (fh, fw), spec.speed, rng)
    _render(video, xs, ys, tex, action_frames)
    for f, x, y in zip(action_frames, xs, ys):
        boxes[f] = np.array([x, y, x + bw, y + bh], dtype=np.float64)
    vid = f"{spec.id_prefix}{index:04d}"
    return video.astype(np.float32), VideoAnnotation(vid, label, boxes, distractor_frames, distractor_boxes)


def generate(spec: SynthSpec):
    """All videos of ``spec`` as ``[(video, annotation), ...]``."""
    return [generate_video(spec, i) for i in range(spec.num_videos)]


def clip_divide(video: np.ndarray, mode: str = "test_nonoverlapping"):
    """Split ``(C, T, H, W)`` into 8-frame clips.  Returns ``[(start_frame, clip), ...]``.

    Training mode slides with stride 1 (``T - 7`` clips); test mode tiles
    without overlap and zero-pads the last clip.  Videos shorter than a clip
    become one zero-padded clip in both modes.
    """
    if video.ndim != 4 or video.shape[1] < 1:
        raise ValueError("empty video")
    t = video.shape[1]
    L = CLIP_LEN
    if mode in ("train", "train_overlapping") and t >= L:
        return [(s, video[:, s:s + L]) for s in range(t - L + 1)]
    if mode not in ("train", "train_overlapping", "test", "test_nonoverlapping"):
        raise ValueError(f"unknown clip mode {mode!r}")
    clips = []
    for s in range(0, t, L):
        clip = video[:, s:s + L]
        if clip.shape[1] < L:
            pad = np.zeros(clip.shape[:1] + (L - clip.shape[1],) + clip.shape[2:], dtype=video.dtype)
            clip = np.concatenate([clip, pad], axis=1)
        clips.append((s, clip))
    return clips


def clip_boxes_of(ann: VideoAnnotation, start: int) -> list:
    """Ground-truth boxes for the 8 frames of the clip starting at ``start`` (None where absent)."""
    return [ann.boxes[f] if f < ann.num_frames else None for f in range(start, start + CLIP_LEN)]
