import itertools

import numpy as np
import pytest

from tcnn.boxes import iou
from tcnn.linking import (
    enumerate_sequences,
    score_of,
    sequence_boxes,
    sequence_score,
    top_k_from_scores,
    top_k_sequences,
    transition_overlaps,
)
from tcnn.tpn import TubeProposal


def random_clips(rng, m, max_props=6, size=40.0):
    clips = []
    for j in range(m):
        props = []
        for _ in range(int(rng.integers(1, max_props + 1))):
            xy = rng.uniform(0, size, size=(8, 2))
            wh = rng.uniform(4, size / 2, size=(8, 2))
            props.append(TubeProposal(j, np.concatenate([xy, xy + wh], axis=1), float(rng.uniform()), 8 * j))
        clips.append(props)
    return clips


def hand_score(clips, idx):
    acts = [clips[j][p].actionness for j, p in enumerate(idx)]
    ovs = [iou(clips[j][idx[j]].frame_boxes[-1], clips[j + 1][idx[j + 1]].frame_boxes[0]) for j in range(len(idx) - 1)]
    s = sum(acts) / len(acts)
    return s + (sum(ovs) / len(ovs) if ovs else 0.0)


class TestScore:
    def test_single_clip_is_actionness(self):
        assert sequence_score([0.7], []) == 0.7

    def test_two_terms(self):
        assert sequence_score([0.2, 0.4, 0.6], [0.5, 1.0]) == pytest.approx(0.4 + 0.75)

    def test_overlap_count_checked(self):
        with pytest.raises(ValueError):
            sequence_score([0.2, 0.4], [])

    def test_matches_hand_computation(self):
        clips = random_clips(np.random.default_rng(0), 4)
        acts = [[t.actionness for t in c] for c in clips]
        ovs = transition_overlaps(clips)
        for idx in itertools.product(*[range(len(c)) for c in clips]):
            assert score_of(idx, acts, ovs) == pytest.approx(hand_score(clips, idx), rel=1e-12)


class TestTopK:
    @pytest.mark.parametrize("seed", range(40))
    def test_equals_enumeration(self, seed):
        rng = np.random.default_rng(seed)
        clips = random_clips(rng, int(rng.integers(1, 6)))
        k = int(rng.integers(1, 11))
        got = top_k_sequences(clips, k)
        ref = enumerate_sequences(clips)[:k]
        assert [s.tube_indices for s in got] == [s.tube_indices for s in ref]
        assert [s.score for s in got] == [s.score for s in ref]

    def test_fig4_instance_has_eight_sequences(self):
        clips = random_clips(np.random.default_rng(1), 3, max_props=2)
        clips = [c[:1] * 2 if len(c) == 1 else c for c in clips]
        assert all(len(c) == 2 for c in clips)
        assert len(enumerate_sequences(clips)) == 8
        assert len(top_k_sequences(clips, 100)) == 8

    def test_ties_broken_lexicographically(self):
        acts = [[0.5, 0.5], [0.5, 0.5]]
        ovs = [np.zeros((2, 2))]
        assert [s.tube_indices for s in top_k_from_scores(acts, ovs, 4)] == [(0, 0), (0, 1), (1, 0), (1, 1)]

    def test_empty_clip_rejected(self):
        with pytest.raises(ValueError):
            top_k_sequences([[TubeProposal(0, np.zeros((8, 4)), 0.5)], []])

    def test_k_zero(self):
        assert top_k_from_scores([[0.5]], [], 0) == []


class TestSequenceBoxes:
    def test_frames_and_truncation(self):
        clips = random_clips(np.random.default_rng(2), 2, max_props=1)
        seq = top_k_sequences(clips, 1)[0]
        boxes = sequence_boxes(seq, clips, num_frames=13)
        assert sorted(boxes) == list(range(13))
        np.testing.assert_array_equal(boxes[9], clips[1][0].frame_boxes[1])
