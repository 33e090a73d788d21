"""Inference: clips -> tube proposals -> linked sequences -> classified, suppressed detections."""

from __future__ import annotations

import numpy as np

from .detection import DEFAULT_NMS, nms_sequences, pool_sequence, softmax
from .formats import Detection, sort_detections
from .linking import DEFAULT_K, top_k_sequences, sequence_boxes
from .synth import clip_divide
from .tpn import DEFAULT_THRESHOLD, propose_tubes


def video_features(model, video: np.ndarray, mode: str = "test_nonoverlapping"):
    """Per-clip TPN taps and recognition conv5 cubes for one video."""
    clips = clip_divide(np.asarray(video, dtype=np.float64), mode)
    shared = model.backbones_equal()
    starts, tpn_taps, conv5 = [], [], []
    for start, clip in clips:
        taps, _ = model.tpn_backbone.forward(clip, keep_cache=False)
        starts.append(start)
        tpn_taps.append(taps)
        conv5.append(taps["conv5"] if shared else model.recog_backbone.forward(clip, keep_cache=False)[0]["conv5"])
    return starts, tpn_taps, conv5


def link_video(model, starts, tpn_taps, threshold=DEFAULT_THRESHOLD, k=DEFAULT_K, limit=DEFAULT_K):
    per_clip = [propose_tubes(taps, model.anchors, model.tpn, model.preset, j, s, threshold, limit)
                for j, (s, taps) in enumerate(zip(starts, tpn_taps))]
    return per_clip, top_k_sequences(per_clip, k)


def sequence_probs(model, seqs, per_clip, conv5) -> np.ndarray:
    """``(len(seqs), N+1)`` class distributions."""
    cube = np.concatenate(conv5, axis=1)
    feats = []
    for seq in seqs:
        tubes = [per_clip[j][p].frame_boxes for j, p in enumerate(seq.tube_indices)]
        feats.append(pool_sequence(cube, tubes, model.preset)[0])
    logits, _ = model.recog.forward(np.stack(feats), train=False)
    return softmax(logits)


def detect_video(model, video: np.ndarray, video_id: str, threshold=DEFAULT_THRESHOLD,
                 k=DEFAULT_K, nms=DEFAULT_NMS) -> list[Detection]:
    num_frames = video.shape[1]
    starts, taps, conv5 = video_features(model, video)
    per_clip, seqs = link_video(model, starts, taps, threshold, k)
    probs = sequence_probs(model, seqs, per_clip, conv5)
    dets = []
    for seq, p in zip(seqs, probs):
        cls = int(np.argmax(p))
        if cls == 0:
            continue
        dets.append(Detection(video_id, cls, float(p[cls]), sequence_boxes(seq, per_clip, num_frames), seq))
    return sort_detections(nms_sequences(dets, nms))


def detect_videos(model, videos, video_ids, **kw) -> list[Detection]:
    out = []
    for v, vid in zip(videos, video_ids):
        out.extend(detect_video(model, v, vid, **kw))
    return sort_detections(out)


def classify_video(model, video: np.ndarray) -> int:
    """Whole-video class: the full-frame tube over every clip, ToI-pooled to one vector."""
    _, _, conv5 = video_features(model, video)
    fh, fw = model.preset.frame_size
    full = np.array([[0.0, 0.0, fw, fh]] * 8)
    cube = np.concatenate(conv5, axis=1)
    feat = pool_sequence(cube, [full] * len(conv5), model.preset)[0]
    logits, _ = model.recog.forward(feat[None], train=False)
    return int(np.argmax(logits[0, 1:]) + 1)
