"""Alternating four-stage training, sampling, losses and hard-negative mining."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, fields

import numpy as np

from .boxes import encode_deltas, scale_boxes, union_box
from .detection import pool_sequence, pool_sequence_backward
from .linking import DEFAULT_K, sequence_boxes
from .detection import sequence_iou
from .network import CLIP_LEN
from .pipeline import link_video
from .synth import clip_boxes_of, clip_divide, substream
from .tensor_io import atomic_write
from .tpn import NEGATIVE, POSITIVE, anchor_boxes, label_proposals, sigmoid

log = logging.getLogger(__name__)

STAGES = ("init_tpn", "init_recog", "update_tpn", "finalize_recog")
# parts of the model each stage is allowed to update
STAGE_OWNS = {
    "init_tpn": ("tpn_backbone", "tpn"),
    "init_recog": ("recog_backbone", "recog"),
    "update_tpn": ("tpn",),
    "finalize_recog": ("recog",),
}
# backbone copy (src, dst) performed when a stage starts
HANDOFF = {"init_recog": ("tpn_backbone", "recog_backbone"),
           "update_tpn": ("recog_backbone", "tpn_backbone")}

FULL_DROP, FULL_TOTAL = 30000, 50000
# Desk-scale training starts from random weights: new layers take a larger step,
# and the shared backbone moves slowly in recognition so the TPN keeps its features.
DESK_LR_SCALES = {"tpn_lr_scale": 10.0, "recog_lr_scale": 10.0, "recog_backbone_lr_scale": 0.3}
RECOG_POSITIVE_IOU = 0.5


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr_initial: float = 1e-3
    lr_after: float = 1e-4
    lr_drop_batches: int = 300
    total_batches: int = 500
    clips_per_batch: int = 4
    momentum: float = 0.9
    anchor_batch: int = 64  # sampled anchors per clip for the actionness loss
    recog_batch: int = 16  # sampled sequences per video for the recognition loss
    tpn_lr_scale: float = 1.0  # multiplies the schedule in the TPN stages
    recog_lr_scale: float = 1.0  # multiplies the schedule for the recognition head layers
    recog_backbone_lr_scale: float = 1.0  # multiplies it for the backbone in init_recog
    seed: int = 0

    def __post_init__(self):
        if not self.lr_after < self.lr_initial:
            raise ValueError("lr_after must be smaller than lr_initial")
        if self.total_batches < 0 or self.lr_drop_batches < 0:
            raise ValueError("batch counts must be non-negative")
        if self.total_batches > 0 and not self.lr_drop_batches < self.total_batches:
            raise ValueError("lr_drop_batches must be smaller than total_batches")
        if self.clips_per_batch < 1:
            raise ValueError("clips_per_batch must be >= 1")
        if min(self.tpn_lr_scale, self.recog_lr_scale, self.recog_backbone_lr_scale) <= 0:
            raise ValueError("learning-rate scales must be positive")

    @classmethod
    def scaled(cls, factor: float = 0.01, **kw) -> "TrainConfig":
        """The 30k/50k-batch schedule multiplied by ``factor``."""
        return cls(lr_drop_batches=int(round(FULL_DROP * factor)),
                   total_batches=int(round(FULL_TOTAL * factor)), **kw)

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        kw = {}
        for k, v in values.items():
            if k not in kinds:
                continue
            kw[k] = float(v) if kinds[k] == "float" else int(v)
        return cls(**kw)

    def lr(self, batch: int) -> float:
        return self.lr_initial if batch < self.lr_drop_batches else self.lr_after


class SGD:
    """SGD with momentum over a dict of parameter arrays, updated in place."""

    def __init__(self, params: dict, momentum: float = 0.9):
        self.params = params
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict, lr: float, lr_mult: dict | None = None) -> None:
        """``lr_mult`` optionally scales the step of individual parameters."""
        lr_mult = lr_mult or {}
        for k in sorted(grads):
            v = self.velocity[k]
            v *= self.momentum
            v -= lr * lr_mult.get(k, 1.0) * grads[k]
            self.params[k] += v


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def bce_with_logits(z: np.ndarray, y: np.ndarray):
    """Mean binary log loss on logits; returns ``(loss, dloss/dz)``."""
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if z.size == 0:
        return 0.0, np.zeros_like(z)
    loss = np.mean(np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z))))
    return float(loss), (sigmoid(z) - y) / z.size


def smooth_l1(pred: np.ndarray, target: np.ndarray, mask: np.ndarray | None = None):
    """Smooth-L1 summed over the last axis, averaged over unmasked rows."""
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    if mask is None:
        mask = np.ones(diff.shape[:-1], dtype=bool)
    diff = np.where(mask[..., None], diff, 0.0)
    n = int(mask.sum())
    if n == 0:
        return 0.0, np.zeros_like(diff)
    a = np.abs(diff)
    loss = np.where(a < 1.0, 0.5 * diff ** 2, a - 0.5).sum() / n
    grad = np.where(a < 1.0, diff, np.sign(diff)) / n
    return float(loss), grad


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy; returns ``(loss, dloss/dlogits)``."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def check_finite(loss: float) -> float:
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss}")
    return loss


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

@dataclass
class Sample:
    indices: np.ndarray
    no_positives: bool = False


def balanced_sample(labels, batch_size: int, rng: np.random.Generator) -> Sample:
    """Up to ``batch_size // 2`` positives and as many negatives, drawn uniformly.

    If one side is empty the batch is filled from the other; an all-negative
    batch sets ``no_positives``.
    """
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("empty proposal set")
    pos = np.flatnonzero(labels == POSITIVE)
    neg = np.flatnonzero(labels == NEGATIVE)
    k = min(len(pos), len(neg), batch_size // 2)
    if k > 0:
        n_pos = n_neg = k
    elif len(pos) == 0:
        n_pos, n_neg = 0, min(len(neg), batch_size)
    else:
        n_pos, n_neg = min(len(pos), batch_size), 0
    picked = np.concatenate([rng.choice(pos, n_pos, replace=False),
                             rng.choice(neg, n_neg, replace=False)]).astype(np.int64)
    return Sample(picked, no_positives=len(pos) == 0)


@dataclass
class BatchPlan:
    positives: int = 32
    random_negatives: int = 16
    hard_negatives: int = 16

    def compose(self, n_pos: int, n_neg: int, n_hard: int) -> tuple[int, int, int]:
        """Counts actually drawn; missing positives or hard negatives become random negatives."""
        p = min(self.positives, n_pos)
        h = min(self.hard_negatives, n_hard)
        r = self.random_negatives + (self.positives - p) + (self.hard_negatives - h)
        return p, min(r, n_neg), h


@dataclass
class HardNegativePool:
    entries: list  # (clip key, anchor index), best first
    scores: np.ndarray


def select_hard_negatives(scores_per_clip, pool_size: int) -> HardNegativePool:
    """Top ``pool_size`` boxes by actionness over all clips; ties keep (clip, anchor) order."""
    if len(scores_per_clip) == 0:
        raise ValueError("no negative clips")
    flat = [(float(s), c, a) for c, sc in enumerate(scores_per_clip) for a, s in enumerate(sc)]
    flat.sort(key=lambda t: (-t[0], t[1], t[2]))
    top = flat[:max(0, pool_size)]
    return HardNegativePool([(c, a) for _, c, a in top], np.array([s for s, _, _ in top]))


def mine_hard_negatives(model, negative_clips, pool_size: int) -> HardNegativePool:
    """Score every anchor of every negative clip with the current TPN; keep the top ``pool_size``."""
    if len(negative_clips) == 0:
        raise ValueError("no negative clips")
    scores = []
    for clip in negative_clips:
        taps, _ = model.tpn_backbone.forward(np.asarray(clip, dtype=np.float64), keep_cache=False)
        scores.append(sigmoid(model.tpn.score_logits(taps["conv5"])))
    return select_hard_negatives(scores, pool_size)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    videos: list  # (3, T, H, W) float32 arrays
    annotations: list

    def __post_init__(self):
        if len(self.videos) == 0:
            raise ValueError("empty dataset")
        if len(self.videos) != len(self.annotations):
            raise ValueError("videos and annotations differ in length")

    @classmethod
    def from_pairs(cls, pairs) -> "Dataset":
        return cls([v for v, _ in pairs], [a for _, a in pairs])

    def train_clips(self) -> list[tuple[int, int]]:
        """(video index, start frame) of every stride-1 training clip."""
        out = []
        for i, v in enumerate(self.videos):
            out.extend((i, s) for s, _ in clip_divide(v[:, :, :1, :1], "train_overlapping"))
        return out

    def clip(self, key) -> np.ndarray:
        i, s = key
        v = self.videos[i]
        if v.shape[1] >= s + CLIP_LEN:
            return v[:, s:s + CLIP_LEN].astype(np.float64)
        return clip_divide(v[:, s:].astype(np.float64), "test_nonoverlapping")[0][1]

    def clip_gt(self, key) -> list:
        i, s = key
        return clip_boxes_of(self.annotations[i], s)

    def is_positive(self, key) -> bool:
        return any(b is not None for b in self.clip_gt(key))


# ---------------------------------------------------------------------------
# TPN loss on one clip
# ---------------------------------------------------------------------------

@dataclass
class ClipLoss:
    actionness: float
    regression: float
    grads: dict
    no_positives: bool = False


def anchor_labels(model, gt_frames, grid_hw) -> tuple[np.ndarray, np.ndarray]:
    """Conv5-grid anchor boxes and their labels against the clip's union ground-truth box."""
    boxes = anchor_boxes(model.anchors, grid_hw)
    present = [b for b in gt_frames if b is not None]
    if not present:
        return boxes, np.full(len(boxes), NEGATIVE, dtype=np.int64)
    fh, fw = model.preset.frame_size
    h5, w5 = grid_hw
    gt = scale_boxes(union_box(present), w5 / fw, h5 / fh)
    return boxes, label_proposals(boxes, gt[None])


def regression_targets(model, box, gt_frames, grid_hw):
    """Per-frame deltas from a conv5-grid box (in pixels) to each ground-truth frame box."""
    fh, fw = model.preset.frame_size
    h5, w5 = grid_hw
    src = scale_boxes(box, fw / w5, fh / h5)
    targets = np.zeros((CLIP_LEN, 4))
    mask = np.zeros(CLIP_LEN, dtype=bool)
    for t, g in enumerate(gt_frames):
        if g is not None:
            targets[t] = encode_deltas(src, g)
            mask[t] = True
    return targets, mask


def tpn_loss(model, taps, gt_frames, score_idx, score_labels, reg_idx):
    """Actionness loss on ``score_idx`` anchors plus regression loss on ``reg_idx`` anchors.

    Returns ``(actionness, regression, tap_grads, head_grads)``.
    """
    head = model.tpn
    conv5 = taps["conv5"]
    grid = conv5.shape[2:]
    boxes = anchor_boxes(model.anchors, grid)
    logits = head.score_logits(conv5)
    l_act, g_sel = bce_with_logits(logits[score_idx], score_labels)
    g_logits = np.zeros_like(logits)
    np.add.at(g_logits, score_idx, g_sel)
    g_conv5, head_grads = head.score_backward(conv5, g_logits)
    skip = taps.get(head.skip_source) if head.skip_source else None
    g_skip = np.zeros_like(skip) if skip is not None else None
    l_reg = 0.0
    if len(reg_idx):
        descs, caches, targets, masks = [], [], [], []
        for i in reg_idx:
            d, c = head.descriptors(conv5, skip, boxes[i])
            descs.append(d)
            caches.append(c)
            t, m = regression_targets(model, boxes[i], gt_frames, grid)
            targets.append(t)
            masks.append(m)
        deltas, rc = head.regress(np.concatenate(descs))
        l_reg, g_deltas = smooth_l1(deltas, np.concatenate(targets), np.concatenate(masks))
        g_desc, reg_grads = head.regress_backward(rc, g_deltas)
        head_grads.update(reg_grads)
        for j, c in enumerate(caches):
            gc5, gs = head.descriptors_backward(c, g_desc[j * CLIP_LEN:(j + 1) * CLIP_LEN])
            g_conv5 = g_conv5 + gc5
            if gs is not None:
                g_skip += gs
    for k, v in head.params().items():
        head_grads.setdefault(k, np.zeros_like(v))
    tap_grads = {"conv5": g_conv5}
    if skip is not None:
        tap_grads[head.skip_source] = g_skip
    return l_act, l_reg, tap_grads, head_grads


def tpn_clip_step(model, clip, gt_frames, rng, cfg: TrainConfig, train_backbone: bool) -> ClipLoss:
    taps, cache = model.tpn_backbone.forward(clip, keep_cache=train_backbone)
    boxes, labels = anchor_labels(model, gt_frames, taps["conv5"].shape[2:])
    sample = balanced_sample(labels, cfg.anchor_batch, rng)
    idx = sample.indices
    reg_idx = idx[labels[idx] == POSITIVE]
    l_act, l_reg, tap_grads, head_grads = tpn_loss(model, taps, gt_frames, idx, labels[idx], reg_idx)
    grads = {f"tpn.{k}": v for k, v in head_grads.items()}
    if train_backbone:
        bgrads, _ = model.tpn_backbone.backward(cache, tap_grads)
        grads.update({f"tpn_backbone.{k}": v for k, v in bgrads.items()})
    return ClipLoss(l_act, l_reg, grads, sample.no_positives)


# ---------------------------------------------------------------------------
# recognition loss on one video
# ---------------------------------------------------------------------------

@dataclass
class Candidates:
    tubes: list  # per candidate: list of per-clip (n, 4) box arrays
    labels: np.ndarray
    pooled: np.ndarray | None = None  # cached features when the backbone is frozen


def gt_clip_tubes(ann, starts):
    tubes = []
    for s in starts:
        present = [b for b in clip_boxes_of(ann, s) if b is not None]
        if not present:
            return None
        tubes.append(np.array(present))
    return tubes


def recognition_candidates(model, video, ann, k: int = DEFAULT_K) -> Candidates:
    """TPN top-``k`` linked sequences plus the ground-truth tube, labelled by tube IoU."""
    clips = clip_divide(np.asarray(video, dtype=np.float64), "test_nonoverlapping")
    starts = [s for s, _ in clips]
    taps = [model.tpn_backbone.forward(c, keep_cache=False)[0] for _, c in clips]
    per_clip, seqs = link_video(model, starts, taps, k=k)
    gt = ann.tube()
    tubes, labels = [], []
    for seq in seqs:
        tubes.append([per_clip[j][p].frame_boxes for j, p in enumerate(seq.tube_indices)])
        ok = gt and sequence_iou(sequence_boxes(seq, per_clip, video.shape[1]), gt) >= RECOG_POSITIVE_IOU
        labels.append(ann.label if ok else 0)
    gtt = gt_clip_tubes(ann, starts) if ann.label > 0 else None
    if gtt is not None:
        tubes.append(gtt)
        labels.append(ann.label)
    return Candidates(tubes, np.array(labels, dtype=np.int64))


def recog_video_step(model, video, cands: Candidates, rng, cfg: TrainConfig, train_backbone: bool):
    sample = balanced_sample(np.where(cands.labels > 0, POSITIVE, NEGATIVE), cfg.recog_batch, rng)
    idx = sample.indices
    labels = cands.labels[idx]
    grads = {}
    if cands.pooled is not None and not train_backbone:
        feats = cands.pooled[idx]
    else:
        clips = clip_divide(np.asarray(video, dtype=np.float64), "test_nonoverlapping")
        outs = [model.recog_backbone.forward(c, keep_cache=train_backbone) for _, c in clips]
        cube = np.concatenate([t["conv5"] for t, _ in outs], axis=1)
        pooled = [pool_sequence(cube, cands.tubes[i], model.preset) for i in idx]
        feats = np.stack([p[0] for p in pooled])
    logits, cache = model.recog.forward(feats, train=True, rng=rng)
    loss, g = cross_entropy(logits, labels)
    g_feats, head_grads = model.recog.backward(cache, g)
    grads.update({f"recog.{k}": v for k, v in head_grads.items()})
    if train_backbone:
        g_cube = np.zeros_like(cube)
        for gf, (_, arg) in zip(g_feats, pooled):
            g_cube += pool_sequence_backward(gf, arg)
        for j, (_, c) in enumerate(outs):
            bg, _ = model.recog_backbone.backward(c, {"conv5": g_cube[:, j:j + 1]})
            for k, v in bg.items():
                key = f"recog_backbone.{k}"
                grads[key] = grads[key] + v if key in grads else v
    return loss, grads


def cache_features(model, data: Dataset, cands: list) -> None:
    """Pre-pool every candidate once; valid while the recognition backbone is frozen."""
    for video, c in zip(data.videos, cands):
        clips = clip_divide(np.asarray(video, dtype=np.float64), "test_nonoverlapping")
        cube = np.concatenate([model.recog_backbone.forward(x, keep_cache=False)[0]["conv5"]
                               for _, x in clips], axis=1)
        c.pooled = np.stack([pool_sequence(cube, t, model.preset)[0] for t in c.tubes])


# ---------------------------------------------------------------------------
# alternating schedule
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    losses: list = field(default_factory=list)  # dict rows
    warnings: int = 0


def _owned(model, stage) -> dict:
    params = model.params()
    owned = STAGE_OWNS[stage]
    return {k: v for k, v in params.items() if k.split(".", 1)[0] in owned}


def _mean_grads(acc: dict, n: int) -> dict:
    return {k: v / n for k, v in acc.items()}


def _accumulate(acc: dict, grads: dict) -> None:
    for k, v in grads.items():
        if k in acc:
            acc[k] += v
        else:
            acc[k] = np.array(v, dtype=np.float64)


def run_tpn_stage(model, data: Dataset, cfg: TrainConfig, stage: str, clips=None,
                  result: TrainResult | None = None) -> TrainResult:
    result = result if result is not None else TrainResult()
    train_backbone = "tpn_backbone" in STAGE_OWNS[stage]
    params = _owned(model, stage)
    opt = SGD(params, cfg.momentum)
    rng = substream(cfg.seed, f"train-{stage}")
    clips = clips if clips is not None else data.train_clips()
    for b in range(cfg.total_batches):
        acc, l_act, l_reg = {}, 0.0, 0.0
        for key in (clips[i] for i in rng.integers(len(clips), size=cfg.clips_per_batch)):
            cl = tpn_clip_step(model, data.clip(key), data.clip_gt(key), rng, cfg, train_backbone)
            result.warnings += cl.no_positives
            l_act += cl.actionness
            l_reg += cl.regression
            _accumulate(acc, cl.grads)
        n = cfg.clips_per_batch
        loss = check_finite((l_act + l_reg) / n)
        grads = _mean_grads({k: v for k, v in acc.items() if k in params}, n)
        lr = cfg.lr(b) * cfg.tpn_lr_scale
        opt.step(grads, lr)
        result.losses.append({"stage": stage, "batch": b, "lr": lr, "loss": loss,
                              "actionness": l_act / n, "regression": l_reg / n, "classification": 0.0})
        if b % 50 == 0:
            log.info("%s batch %d loss %.4f (act %.4f reg %.4f)", stage, b, loss, l_act / n, l_reg / n)
    return result


def run_recog_stage(model, data: Dataset, cfg: TrainConfig, stage: str,
                    result: TrainResult | None = None) -> TrainResult:
    result = result if result is not None else TrainResult()
    train_backbone = "recog_backbone" in STAGE_OWNS[stage]
    params = _owned(model, stage)
    opt = SGD(params, cfg.momentum)
    mult = {k: cfg.recog_lr_scale if k.startswith("recog.") else cfg.recog_backbone_lr_scale for k in params}
    rng = substream(cfg.seed, f"train-{stage}")
    cands = []
    if cfg.total_batches > 0:
        cands = [recognition_candidates(model, v, a) for v, a in zip(data.videos, data.annotations)]
        if not train_backbone:
            cache_features(model, data, cands)
    for b in range(cfg.total_batches):
        # one video per slot; each contributes its own balanced sequence sample
        acc, loss = {}, 0.0
        for i in rng.integers(len(data.videos), size=cfg.clips_per_batch):
            lv, grads = recog_video_step(model, data.videos[i], cands[i], rng, cfg, train_backbone)
            loss += lv
            _accumulate(acc, {k: v for k, v in grads.items() if k in params})
        n = cfg.clips_per_batch
        loss = check_finite(loss / n)
        lr = cfg.lr(b) * cfg.recog_lr_scale  # logged rate is the head's
        opt.step(_mean_grads(acc, n), cfg.lr(b), mult)
        result.losses.append({"stage": stage, "batch": b, "lr": lr, "loss": loss,
                              "actionness": 0.0, "regression": 0.0, "classification": loss})
        if b % 50 == 0:
            log.info("%s batch %d loss %.4f", stage, b, loss)
    return result


def handoff(model, stage: str) -> None:
    if stage in HANDOFF:
        src, dst = HANDOFF[stage]
        model.copy_backbone(src, dst)
        if not model.backbones_equal():
            raise TrainingError(f"backbone copy {src} -> {dst} did not take")


def alternate_train(model, data: Dataset, cfg: TrainConfig, stages=STAGES) -> TrainResult:
    """Run the four stages in order, copying the shared backbone at each hand-off."""
    result = TrainResult()
    for stage in stages:
        handoff(model, stage)
        before = {k: v.copy() for k, v in model.params().items()}
        if stage in ("init_tpn", "update_tpn"):
            run_tpn_stage(model, data, cfg, stage, result=result)
        else:
            run_recog_stage(model, data, cfg, stage, result=result)
        owned = STAGE_OWNS[stage]
        for k, v in model.params().items():
            if k.split(".", 1)[0] not in owned and not np.array_equal(v, before[k]):
                raise TrainingError(f"stage {stage} modified {k}, which it does not own")
    return result


def loss_csv(rows) -> str:
    buf = io.StringIO()
    cols = ["stage", "batch", "lr", "loss", "actionness", "regression", "classification"]
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{r[k]:.8g}" if isinstance(r[k], float) else r[k]) for k in cols})
    return buf.getvalue()


def write_loss_csv(path, rows) -> None:
    atomic_write(path, loss_csv(rows))


def loss_drop(rows, stage: str, column: str = "loss", window: float = 0.1) -> tuple[float, float]:
    """Mean of ``column`` over the first and last ``window`` fraction of a stage's batches."""
    vals = np.array([r[column] for r in rows if r["stage"] == stage])
    if len(vals) == 0:
        raise ValueError(f"no rows for stage {stage}")
    n = max(1, int(len(vals) * window))
    return float(vals[:n].mean()), float(vals[-n:].mean())


# ---------------------------------------------------------------------------
# negative-sample mining on untrimmed data
# ---------------------------------------------------------------------------

@dataclass
class MiningResult:
    pool: HardNegativePool | None
    negative_keys: list
    losses: list


def _conv5_cubes(model, data, keys):
    out = {}
    for key in keys:
        taps, _ = model.tpn_backbone.forward(data.clip(key), keep_cache=False)
        out[key] = taps["conv5"]
    return out


def finetune_with_mining(model, data: Dataset, cfg: TrainConfig, mining: bool = True,
                         pool_size: int = 256, plan: BatchPlan | None = None,
                         train_backbone: bool = True) -> MiningResult:
    """Fine-tune actionness after a positive-clip-only TPN initialisation.

    Each batch holds ``plan.positives`` positive anchors, ``plan.random_negatives``
    uniformly drawn negative anchors from any training clip, and
    ``plan.hard_negatives`` anchors from the pool mined with the initial model.
    Without mining the hard-negative slots are filled with random negatives.
    The score layer is always trained; ``train_backbone`` adds the TPN backbone,
    which is what lets the model tell a distractor from the action by its motion.
    """
    plan = plan or BatchPlan()
    keys = data.train_clips()
    neg_keys = [k for k in keys if not data.is_positive(k)]
    if not neg_keys:
        raise ValueError("no negative clips")
    conv5 = _conv5_cubes(model, data, keys)
    grid = next(iter(conv5.values())).shape[2:]
    pos_pool, neg_pool = [], []
    for key in keys:
        _, labels = anchor_labels(model, data.clip_gt(key), grid)
        pos_pool.extend((key, int(a)) for a in np.flatnonzero(labels == POSITIVE))
        neg_pool.extend((key, int(a)) for a in np.flatnonzero(labels == NEGATIVE))
    pool = None
    hard = []
    if mining:
        scores = [sigmoid(model.tpn.score_logits(conv5[k])) for k in neg_keys]
        pool = select_hard_negatives(scores, pool_size)
        hard = [(neg_keys[c], a) for c, a in pool.entries]
    head = model.tpn
    params = {f"tpn.score.{k}": v for k, v in head.score.params().items()}
    if train_backbone:
        params.update({f"tpn_backbone.{k}": v for k, v in model.tpn_backbone.params().items()})
    opt = SGD(params, cfg.momentum)
    rng = substream(cfg.seed, "mining" if mining else "no-mining")
    n_anchors = len(anchor_boxes(model.anchors, grid))
    losses = []
    for b in range(cfg.total_batches):
        p, r, h = plan.compose(len(pos_pool), len(neg_pool), len(hard))
        chosen = ([(pos_pool[i], 1.0) for i in rng.choice(len(pos_pool), p, replace=False)]
                  + [(neg_pool[i], 0.0) for i in rng.choice(len(neg_pool), r, replace=False)]
                  + [(hard[i], 0.0) for i in rng.choice(len(hard), h, replace=False)])
        by_clip: dict = {}
        for (key, a), y in chosen:
            by_clip.setdefault(key, []).append((a, y))
        acc, loss, total = {}, 0.0, len(chosen)
        for key in sorted(by_clip):
            items = by_clip[key]
            if train_backbone:
                taps, cache = model.tpn_backbone.forward(data.clip(key), keep_cache=True)
                c5 = taps["conv5"]
            else:
                c5 = conv5[key]
            idx = np.array([a for a, _ in items])
            lc, g = bce_with_logits(head.score_logits(c5)[idx], np.array([y for _, y in items]))
            w = len(items) / total  # the batch loss is the mean over every chosen anchor
            loss += lc * w
            gl = np.zeros(n_anchors)
            np.add.at(gl, idx, g * w)
            g5, hg = head.score_backward(c5, gl)
            _accumulate(acc, {f"tpn.{k}": v for k, v in hg.items()})
            if train_backbone:
                bg, _ = model.tpn_backbone.backward(cache, {"conv5": g5})
                _accumulate(acc, {f"tpn_backbone.{k}": v for k, v in bg.items()})
        check_finite(loss)
        lr = cfg.lr(b) * cfg.tpn_lr_scale
        opt.step(acc, lr)
        losses.append({"stage": "mining" if mining else "no_mining", "batch": b, "lr": lr,
                       "loss": loss, "actionness": loss, "regression": 0.0, "classification": 0.0})
    return MiningResult(pool, neg_keys, losses)


def false_positive_rate(model, data: Dataset, threshold: float = 0.5) -> float:
    """Fraction of anchor boxes on distractor test clips with actionness >= ``threshold``."""
    hits = total = 0
    for video, ann in zip(data.videos, data.annotations):
        bad = set(ann.distractor_frames)
        for s, clip in clip_divide(np.asarray(video, dtype=np.float64), "test_nonoverlapping"):
            frames = set(range(s, s + CLIP_LEN))
            if not frames & bad or any(b is not None for b in clip_boxes_of(ann, s)):
                continue
            taps, _ = model.tpn_backbone.forward(clip, keep_cache=False)
            sc = sigmoid(model.tpn.score_logits(taps["conv5"]))
            hits += int((sc >= threshold).sum())
            total += sc.size
    if total == 0:
        raise ValueError("no distractor clips in the data")
    return hits / total
