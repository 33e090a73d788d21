"""Recognition of linked sequences and sequence-level NMS."""

from __future__ import annotations

import numpy as np

from . import tensor_core as tc
from .boxes import iou, scale_boxes, union_box
from .formats import Detection
from .network import NetworkPreset
from .tensor_core import FCLayer
from .toi_pool import toi_pool_backward, toi_pool_forward

DEFAULT_NMS = 0.3

__all__ = ["Detection", "RecognitionHead", "classify_sequence", "sequence_iou", "nms_sequences"]


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class RecognitionHead:
    """fc6 -> relu -> fc7 -> relu -> dropout -> (N+1)-way classifier."""

    def __init__(self, preset: NetworkPreset, num_classes: int, rng: np.random.Generator | None = None,
                 dropout: float | None = None, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.preset = preset
        self.num_classes = num_classes
        self.dropout = preset.recog_dropout if dropout is None else dropout
        spec = preset.recog_spec
        self.in_dim = preset.widths["conv5"] * spec.D * spec.H * spec.W
        self.fc6 = FCLayer.init(rng, self.in_dim, preset.recog_fc, dtype=dtype)
        self.fc7 = FCLayer.init(rng, preset.recog_fc, preset.recog_fc, dtype=dtype)
        self.cls = FCLayer.init(rng, preset.recog_fc, num_classes + 1, scale=0.01, dtype=dtype)

    def layers(self) -> dict:
        return {"fc6": self.fc6, "fc7": self.fc7, "cls": self.cls}

    def params(self) -> dict:
        return {f"{n}.{p}": a for n, layer in self.layers().items() for p, a in layer.params().items()}

    def forward(self, feats: np.ndarray, train: bool = False, rng: np.random.Generator | None = None):
        """``feats`` ``(n, in_dim)`` -> logits ``(n, N+1)``."""
        h6_pre = self.fc6.forward(feats)
        h6 = tc.relu_forward(h6_pre)
        h7_pre = self.fc7.forward(h6)
        h7 = tc.relu_forward(h7_pre)
        mask = None
        if train and self.dropout > 0:
            if rng is None:
                raise ValueError("training-mode dropout needs an rng")
            keep = 1.0 - self.dropout
            mask = (rng.random(h7.shape) < keep) / keep
            h7d = h7 * mask
        else:
            h7d = h7
        logits = self.cls.forward(h7d)
        return logits, (feats, h6_pre, h6, h7_pre, h7d, mask)

    def backward(self, cache, grad_logits):
        feats, h6_pre, h6, h7_pre, h7d, mask = cache
        grads = {}
        g, grads["cls.weights"], grads["cls.bias"] = self.cls.backward(h7d, grad_logits)
        if mask is not None:
            g = g * mask
        g = tc.relu_backward(h7_pre, g)
        g, grads["fc7.weights"], grads["fc7.bias"] = self.fc7.backward(h6, g)
        g = tc.relu_backward(h6_pre, g)
        g, grads["fc6.weights"], grads["fc6.bias"] = self.fc6.backward(feats, g)
        return g, grads


def grid_tube(clip_tubes, preset: NetworkPreset, grid_hw) -> np.ndarray:
    """One conv5-grid box per clip: the union of that clip's frame boxes, scaled down."""
    fh, fw = preset.frame_size
    h5, w5 = grid_hw
    return np.array([scale_boxes(union_box(t), w5 / fw, h5 / fh) for t in clip_tubes])


def pool_sequence(video_conv5: np.ndarray, clip_tubes, preset: NetworkPreset):
    """ToI-pool a linked tube over the depth-concatenated conv5 cubes of a video."""
    tube = grid_tube(clip_tubes, preset, video_conv5.shape[2:])
    pooled, arg = toi_pool_forward(video_conv5, tube, preset.recog_spec)
    return pooled.reshape(-1), arg


def pool_sequence_backward(grad_vec: np.ndarray, arg) -> np.ndarray:
    return toi_pool_backward(grad_vec.reshape(arg.output.shape), arg)


def classify_sequence(clip_tubes, conv5_cubes, head: RecognitionHead, train: bool = False,
                      rng: np.random.Generator | None = None) -> np.ndarray:
    """Class distribution over N+1 (index 0 = background) for one linked tube.

    ``clip_tubes`` holds one ``(8, 4)`` frame-box array per clip and
    ``conv5_cubes`` the matching per-clip conv5 cubes.
    """
    if len(clip_tubes) != len(conv5_cubes):
        raise ValueError(f"sequence spans {len(clip_tubes)} clips but {len(conv5_cubes)} feature cubes were given")
    cube = np.concatenate(list(conv5_cubes), axis=1)
    vec, _ = pool_sequence(cube, clip_tubes, head.preset)
    logits, _ = head.forward(vec[None], train=train, rng=rng)
    return softmax(logits)[0]


def _boxes_of(x) -> dict:
    return x.boxes if hasattr(x, "boxes") else x


def sequence_iou(a, b) -> float:
    """Mean per-frame IoU over the union of frames; frames covered by only one side count 0."""
    ba, bb = _boxes_of(a), _boxes_of(b)
    frames = set(ba) | set(bb)
    if not frames:
        return 0.0
    total = sum(iou(ba[f], bb[f]) for f in frames if f in ba and f in bb)
    return total / len(frames)


def nms_sequences(dets, iou_threshold: float = DEFAULT_NMS) -> list:
    """Greedy per-(video, class) suppression of sequences with IoU above the threshold."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i].confidence)
    kept: list = []
    for i in order:
        d = dets[i]
        if all(k.video_id != d.video_id or k.class_id != d.class_id
               or sequence_iou(k, d) <= iou_threshold for k in kept):
            kept.append(d)
    return kept
