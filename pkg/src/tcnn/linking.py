"""Linking per-clip tube proposals into video-long sequences.

A sequence picks one proposal per clip and scores

    S = mean(actionness) + mean(overlap between consecutive picks)

where the overlap of two picks is the IoU of the last frame box of the
earlier tube and the first frame box of the later one.  The score is a sum of
node and edge terms along a chain, so a k-best Viterbi pass returns the exact
top-K sequences without enumerating them.
"""

from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass

import numpy as np

from .boxes import iou_matrix

DEFAULT_K = 40


@dataclass(frozen=True)
class LinkedSequence:
    tube_indices: tuple
    score: float


def sequence_score(actionness, overlaps) -> float:
    actionness = list(actionness)
    overlaps = list(overlaps)
    m = len(actionness)
    if m < 1:
        raise ValueError("a sequence needs at least one clip")
    if len(overlaps) != m - 1:
        raise ValueError(f"{m} clips need {m - 1} overlaps, got {len(overlaps)}")
    s = sum(actionness) / m
    if m > 1:
        s += sum(overlaps) / (m - 1)
    return float(s)


def transition_overlaps(per_clip) -> list[np.ndarray]:
    """``out[j][p, q]`` = IoU(last box of proposal p in clip j, first box of q in clip j+1)."""
    out = []
    for a, b in zip(per_clip[:-1], per_clip[1:]):
        last = np.array([t.frame_boxes[-1] for t in a])
        first = np.array([t.frame_boxes[0] for t in b])
        out.append(iou_matrix(last, first))
    return out


def _check(per_clip):
    if len(per_clip) == 0:
        raise ValueError("no clips to link")
    for j, props in enumerate(per_clip):
        if len(props) == 0:
            raise ValueError(f"clip {j} has no proposals")


def score_of(indices, actionness, overlaps) -> float:
    acts = [actionness[j][p] for j, p in enumerate(indices)]
    ovs = [overlaps[j][indices[j], indices[j + 1]] for j in range(len(indices) - 1)]
    return sequence_score(acts, ovs)


def top_k_from_scores(actionness, overlaps, k: int = DEFAULT_K) -> list[LinkedSequence]:
    """k-best chain DP on raw per-clip actionness lists and overlap matrices."""
    m = len(actionness)
    if k < 1:
        return []
    a_w = 1.0 / m
    o_w = 1.0 / (m - 1) if m > 1 else 0.0
    # beams[p]: up to k (partial score, indices) ending at proposal p of the current clip
    beams = [[(a_w * float(a), (p,))] for p, a in enumerate(actionness[0])]
    for j in range(1, m):
        ov = overlaps[j - 1]
        new = []
        for q, a in enumerate(actionness[j]):
            node = a_w * float(a)
            cands = [(s + o_w * float(ov[idx[-1], q]) + node, idx + (q,))
                     for beam in beams for s, idx in beam]
            new.append(heapq.nsmallest(k, cands, key=lambda c: (-c[0], c[1])))
        beams = new
    finals = [idx for beam in beams for _, idx in beam]
    # exact rescoring so ties and ordering follow the closed-form score
    scored = [LinkedSequence(idx, score_of(idx, actionness, overlaps)) for idx in finals]
    scored.sort(key=lambda s: (-s.score, s.tube_indices))
    return scored[:k]


def top_k_sequences(per_clip_proposals, k: int = DEFAULT_K) -> list[LinkedSequence]:
    """Exact top-``k`` sequences by score, ties broken by lexicographic indices."""
    _check(per_clip_proposals)
    actionness = [[t.actionness for t in props] for props in per_clip_proposals]
    return top_k_from_scores(actionness, transition_overlaps(per_clip_proposals), k)


def enumerate_sequences(per_clip_proposals) -> list[LinkedSequence]:
    """Every sequence, best first.  Exponential; for checking and tiny inputs."""
    _check(per_clip_proposals)
    actionness = [[t.actionness for t in props] for props in per_clip_proposals]
    overlaps = transition_overlaps(per_clip_proposals)
    seqs = [LinkedSequence(idx, score_of(idx, actionness, overlaps))
            for idx in itertools.product(*[range(len(p)) for p in per_clip_proposals])]
    seqs.sort(key=lambda s: (-s.score, s.tube_indices))
    return seqs


def sequence_boxes(seq: LinkedSequence, per_clip_proposals, num_frames: int | None = None) -> dict:
    """Frame index -> box for a linked sequence, dropping frames past ``num_frames``."""
    out = {}
    for j, p in enumerate(seq.tube_indices):
        tube = per_clip_proposals[j][p]
        for t, box in enumerate(tube.frame_boxes):
            f = tube.start_frame + t
            if num_frames is None or f < num_frames:
                out[f] = np.asarray(box, dtype=np.float64)
    return out
