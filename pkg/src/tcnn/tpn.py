"""Tube Proposal Network.

Anchors are laid on the conv5 grid; a 1x1x1 conv + sigmoid scores each one
for actionness.  A positive box is mapped onto the skip-source cube as a
straight tube, both are ToI-pooled and L2-normalised per frame, concatenated,
reduced by a 1x1 conv, and three fully connected layers regress per-frame
(dx, dy, dw, dh) deltas.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor_core as tc
from .boxes import apply_deltas, iou_matrix, scale_boxes, clip_boxes
from .network import CLIP_LEN, NetworkPreset
from .tensor_core import Conv1x1Layer, FCLayer
from .toi_pool import toi_pool_backward, toi_pool_forward

POSITIVE, NEGATIVE, IGNORE = 1, 0, -1
POSITIVE_IOU = 0.7
DEFAULT_THRESHOLD = 0.5


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class BoxProposal:
    box: np.ndarray  # conv5 grid coordinates
    actionness: float
    anchor_index: int
    index: int = 0  # flat position in the (row, col, anchor) grid
    label: int = NEGATIVE


@dataclass
class TubeProposal:
    clip_index: int
    frame_boxes: np.ndarray  # (8, 4), original frame coordinates
    actionness: float
    start_frame: int = 0
    source: BoxProposal | None = field(default=None, repr=False)


def anchor_boxes(anchors: np.ndarray, grid_hw) -> np.ndarray:
    """Anchor boxes on a ``(h5, w5)`` grid, ordered (row, col, anchor), clipped to the grid."""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 2)
    h5, w5 = grid_hw
    rr, cc = np.meshgrid(np.arange(h5) + 0.5, np.arange(w5) + 0.5, indexing="ij")
    cx = cc[:, :, None]
    cy = rr[:, :, None]
    aw = anchors[None, None, :, 0] * w5
    ah = anchors[None, None, :, 1] * h5
    boxes = np.stack(np.broadcast_arrays(cx - aw / 2, cy - ah / 2, cx + aw / 2, cy + ah / 2), axis=-1)
    return clip_boxes(boxes.reshape(-1, 4), w5, h5)


def label_proposals(boxes: np.ndarray, gt_boxes: np.ndarray, pos_iou: float = POSITIVE_IOU) -> np.ndarray:
    """Binary labels: positive if IoU > ``pos_iou`` with any ground truth, or if
    the box is the (first) highest-IoU box for some ground truth."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    labels = np.full(len(boxes), NEGATIVE, dtype=np.int64)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if len(gt_boxes) == 0 or len(boxes) == 0:
        return labels
    ious = iou_matrix(boxes, gt_boxes)
    labels[ious.max(axis=1) > pos_iou] = POSITIVE
    labels[ious.argmax(axis=0)] = POSITIVE
    return labels


def map_to_skip_layer(box, skip_dims, grid_hw) -> np.ndarray:
    """Scale a conv5-grid box onto every frame of the skip cube: ``(d, 4)``."""
    _, d, h, w = skip_dims
    h5, w5 = grid_hw
    scaled = scale_boxes(np.asarray(box, dtype=np.float64), w / w5, h / h5)
    return np.tile(scaled, (d, 1))


class TPNHead:
    """Parameters and forward/backward of the TPN-specific layers."""

    def __init__(self, preset: NetworkPreset, num_anchors: int, skip_source: str | None = "conv2",
                 rng: np.random.Generator | None = None, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.preset = preset
        self.num_anchors = num_anchors
        self.skip_source = skip_source
        c5 = preset.widths["conv5"]
        self.box_spec = preset.box_spec
        self.skip_spec = preset.skip_spec
        self.box_dim = c5 * preset.box_spec.H * preset.box_spec.W
        if skip_source is not None:
            cs = preset.tap_shape(skip_source)[0]
            self.skip_dim = cs * preset.skip_spec.H * preset.skip_spec.W
        else:
            self.skip_dim = 0
        self.descriptor_dim = self.skip_dim + self.box_dim
        self.score = Conv1x1Layer.init(rng, c5, num_anchors, scale=0.01, dtype=dtype)
        # descriptors are concatenations of unit-norm parts, so He init uses the squared norm
        parts = 2 if skip_source is not None else 1
        self.reduce = Conv1x1Layer.init(rng, self.descriptor_dim, preset.reduce_dim,
                                        scale=np.sqrt(2.0 / parts), dtype=dtype)
        self.fc_a = FCLayer.init(rng, preset.reduce_dim, preset.tpn_fc, dtype=dtype)
        self.fc_b = FCLayer.init(rng, preset.tpn_fc, preset.tpn_fc, dtype=dtype)
        self.fc_out = FCLayer.init(rng, preset.tpn_fc, 4, scale=1e-3, dtype=dtype)

    def layers(self) -> dict:
        return {"score": self.score, "reduce": self.reduce, "fc_a": self.fc_a,
                "fc_b": self.fc_b, "fc_out": self.fc_out}

    def params(self) -> dict:
        return {f"{n}.{p}": a for n, layer in self.layers().items() for p, a in layer.params().items()}

    # -- actionness ---------------------------------------------------------

    def score_logits(self, conv5: np.ndarray) -> np.ndarray:
        """Logits in (row, col, anchor) order."""
        if conv5.shape[1] != 1:
            raise tc.ShapeError(f"conv5 cube must have depth 1, got {conv5.shape}")
        out = self.score.forward(conv5)  # (A, 1, h5, w5)
        return out[:, 0].transpose(1, 2, 0).reshape(-1)

    def score_backward(self, conv5, grad_logits):
        _, _, h5, w5 = conv5.shape
        g = grad_logits.reshape(h5, w5, self.num_anchors).transpose(2, 0, 1)[:, None]
        gx, gw, gb = self.score.backward(conv5, g)
        return gx, {"score.weights": gw, "score.bias": gb}

    # -- skip pooling descriptors --------------------------------------------

    def descriptors(self, conv5: np.ndarray, skip: np.ndarray | None, box):
        """Per-frame descriptors ``(8, descriptor_dim)`` for one conv5-grid box."""
        _, _, h5, w5 = conv5.shape
        pooled5, arg5 = toi_pool_forward(conv5, np.asarray(box, dtype=np.float64)[None], self.box_spec)
        v5 = pooled5.reshape(-1)
        n5, norm5 = tc.l2norm_forward(v5[None])
        parts = [np.repeat(n5, CLIP_LEN, axis=0)]
        cache = {"arg5": arg5, "n5": n5, "norm5": norm5}
        if self.skip_source is not None:
            tube = map_to_skip_layer(box, skip.shape, (h5, w5))
            pooled, arg = toi_pool_forward(skip, tube, self.skip_spec)  # (Cs, 8, H, W)
            vs = pooled.transpose(1, 0, 2, 3).reshape(CLIP_LEN, -1)
            ns, norms = tc.l2norm_forward(vs)
            parts.insert(0, ns)
            cache.update(args=arg, ns=ns, norms=norms, pooled_shape=pooled.shape)
        return np.concatenate(parts, axis=1), cache

    def descriptors_backward(self, cache, grad_desc):
        """Returns ``(grad_conv5, grad_skip)``; ``grad_skip`` is None without a skip source."""
        g_skip = None
        if self.skip_source is not None:
            gs = tc.l2norm_backward(cache["ns"], cache["norms"], grad_desc[:, :self.skip_dim])
            shp = cache["pooled_shape"]
            gs = gs.reshape(shp[1], shp[0], shp[2], shp[3]).transpose(1, 0, 2, 3)
            g_skip = toi_pool_backward(np.ascontiguousarray(gs), cache["args"])
        g5 = grad_desc[:, self.skip_dim:].sum(axis=0, keepdims=True)
        g5 = tc.l2norm_backward(cache["n5"], cache["norm5"], g5)
        arg5 = cache["arg5"]
        g_conv5 = toi_pool_backward(g5.reshape(arg5.output.shape), arg5)
        return g_conv5, g_skip

    # -- regression -----------------------------------------------------------

    def regress(self, desc: np.ndarray):
        """``desc`` ``(n, descriptor_dim)`` rows -> deltas ``(n, 4)``."""
        n = desc.shape[0]
        cube = desc.T.reshape(self.descriptor_dim, n, 1, 1)
        r_pre = self.reduce.forward(cube)
        r = tc.relu_forward(r_pre).reshape(-1, n).T
        a_pre = self.fc_a.forward(r)
        a = tc.relu_forward(a_pre)
        b_pre = self.fc_b.forward(a)
        b = tc.relu_forward(b_pre)
        out = self.fc_out.forward(b)
        return out, (cube, r_pre, r, a_pre, a, b_pre, b)

    def regress_backward(self, cache, grad_out):
        cube, r_pre, r, a_pre, a, b_pre, b = cache
        grads = {}
        gb, grads["fc_out.weights"], grads["fc_out.bias"] = self.fc_out.backward(b, grad_out)
        gb = tc.relu_backward(b_pre, gb)
        ga, grads["fc_b.weights"], grads["fc_b.bias"] = self.fc_b.backward(a, gb)
        ga = tc.relu_backward(a_pre, ga)
        gr, grads["fc_a.weights"], grads["fc_a.bias"] = self.fc_a.backward(r, ga)
        n = gr.shape[0]
        gr = tc.relu_backward(r_pre, gr.T.reshape(r_pre.shape))
        gcube, grads["reduce.weights"], grads["reduce.bias"] = self.reduce.backward(cube, gr)
        return gcube.reshape(self.descriptor_dim, n).T, grads


def assemble_skip_features(head: TPNHead, taps: dict, proposal: BoxProposal) -> np.ndarray:
    """Per-frame descriptors ``(8, descriptor_dim)`` for a positive proposal."""
    if proposal.label != POSITIVE:
        raise ValueError("skip features are assembled for positive proposals only")
    skip = taps.get(head.skip_source) if head.skip_source else None
    return head.descriptors(taps["conv5"], skip, proposal.box)[0]


# ---------------------------------------------------------------------------
# inference helpers
# ---------------------------------------------------------------------------

def score_anchors(conv5: np.ndarray, anchors: np.ndarray, head: TPNHead,
                  threshold: float = DEFAULT_THRESHOLD) -> list[BoxProposal]:
    """Score every anchor at every conv5 location; keep those with actionness >= threshold."""
    anchors = np.asarray(anchors).reshape(-1, 2)
    if len(anchors) == 0:
        raise ValueError("empty anchor set")
    boxes = anchor_boxes(anchors, conv5.shape[2:])
    scores = sigmoid(head.score_logits(conv5))
    A = len(anchors)
    keep = np.flatnonzero(scores >= threshold) if threshold > 0 else np.arange(len(scores))
    return [BoxProposal(boxes[i], float(scores[i]), int(i % A), int(i)) for i in keep]


def top_proposals(conv5, anchors, head, threshold=DEFAULT_THRESHOLD, limit=40) -> list[BoxProposal]:
    """The ``limit`` best proposals above threshold; the single best one if none pass."""
    props = score_anchors(conv5, anchors, head, threshold=0.0)
    order = sorted(range(len(props)), key=lambda i: (-props[i].actionness, i))
    kept = [props[i] for i in order if props[i].actionness >= threshold][:limit]
    return kept if kept else [props[order[0]]]


def frame_scale(preset: NetworkPreset, grid_hw) -> tuple[float, float]:
    """(sx, sy) taking conv5-grid coordinates to frame pixels."""
    fh, fw = preset.frame_size
    h5, w5 = grid_hw
    return fw / w5, fh / h5


def regress_boxes(deltas: np.ndarray, proposal: BoxProposal, preset: NetworkPreset, grid_hw,
                  clip_index: int = 0, start_frame: int = 0) -> TubeProposal:
    """Apply per-frame deltas to the proposal box (in frame pixels) and clip to the frame."""
    deltas = np.asarray(deltas, dtype=np.float64).reshape(CLIP_LEN, 4)
    if not np.all(np.isfinite(deltas)):
        raise ValueError("non-finite regression deltas")
    sx, sy = frame_scale(preset, grid_hw)
    src = scale_boxes(proposal.box, sx, sy)
    boxes = apply_deltas(np.tile(src, (CLIP_LEN, 1)), deltas)
    fh, fw = preset.frame_size
    return TubeProposal(clip_index, clip_boxes(boxes, fw, fh), proposal.actionness, start_frame, proposal)


def propose_tubes(taps: dict, anchors, head: TPNHead, preset: NetworkPreset, clip_index: int = 0,
                  start_frame: int = 0, threshold=DEFAULT_THRESHOLD, limit=40) -> list[TubeProposal]:
    """Full TPN inference on one clip's feature taps."""
    conv5 = taps["conv5"]
    skip = taps.get(head.skip_source) if head.skip_source else None
    props = top_proposals(conv5, anchors, head, threshold, limit)
    desc = np.concatenate([head.descriptors(conv5, skip, p.box)[0] for p in props], axis=0)
    deltas, _ = head.regress(desc)
    deltas = deltas.reshape(len(props), CLIP_LEN, 4)
    return [regress_boxes(deltas[i], p, preset, conv5.shape[2:], clip_index, start_frame)
            for i, p in enumerate(props)]
