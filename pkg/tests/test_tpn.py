import numpy as np
import pytest

from tcnn.boxes import apply_deltas, encode_deltas, iou, iou_matrix
from tcnn.network import PRESETS
from tcnn.tpn import (
    NEGATIVE,
    POSITIVE,
    TPNHead,
    anchor_boxes,
    assemble_skip_features,
    BoxProposal,
    label_proposals,
    map_to_skip_layer,
    regress_boxes,
    score_anchors,
)

DESK = PRESETS["desk"]


def random_boxes(rng, n, size=20.0):
    xy = rng.uniform(0, size, size=(n, 2))
    wh = rng.uniform(1, size / 2, size=(n, 2))
    return np.concatenate([xy, xy + wh], axis=1)


def loop_labels(boxes, gts, thr=0.7):
    labels = [NEGATIVE] * len(boxes)
    for i, b in enumerate(boxes):
        for g in gts:
            if iou(b, g) > thr:
                labels[i] = POSITIVE
    for g in gts:
        best, bi = -1.0, -1
        for i, b in enumerate(boxes):
            o = iou(b, g)
            if o > best:
                best, bi = o, i
        labels[bi] = POSITIVE
    return np.array(labels)


def desk_head(skip="conv2", seed=0):
    return TPNHead(DESK, 12, skip, np.random.default_rng(seed))


class TestBoxes:
    def test_iou_matrix_matches_scalar(self):
        rng = np.random.default_rng(0)
        a, b = random_boxes(rng, 6), random_boxes(rng, 5)
        ref = np.array([[iou(x, y) for y in b] for x in a])
        np.testing.assert_allclose(iou_matrix(a, b), ref, rtol=1e-12)

    def test_delta_round_trip(self):
        rng = np.random.default_rng(1)
        src, dst = random_boxes(rng, 10), random_boxes(rng, 10)
        np.testing.assert_allclose(apply_deltas(src, encode_deltas(src, dst)), dst, atol=1e-9)

    def test_log_width_doubles(self):
        out = apply_deltas(np.array([0.0, 0.0, 4.0, 2.0]), np.array([0.0, 0.0, np.log(2.0), 0.0]))
        np.testing.assert_allclose(out, [-2.0, 0.0, 6.0, 2.0])

    def test_non_finite_deltas(self):
        with pytest.raises(ValueError):
            apply_deltas(np.array([0.0, 0.0, 1.0, 1.0]), np.array([np.nan, 0, 0, 0]))


class TestLabels:
    @pytest.mark.parametrize("seed", range(20))
    def test_matches_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        boxes = random_boxes(rng, int(rng.integers(1, 40)))
        gts = random_boxes(rng, int(rng.integers(1, 4)))
        labels = label_proposals(boxes, gts)
        np.testing.assert_array_equal(labels, loop_labels(boxes, gts))
        ious = iou_matrix(boxes, gts)
        for g in range(len(gts)):
            assert np.any(labels[ious[:, g] == ious[:, g].max()] == POSITIVE)

    def test_identical_box_positive(self):
        b = np.array([[1.0, 1.0, 5.0, 5.0], [10, 10, 12, 12]])
        np.testing.assert_array_equal(label_proposals(b, b[:1]), [POSITIVE, NEGATIVE])

    def test_empty_ground_truth(self):
        np.testing.assert_array_equal(label_proposals(np.ones((3, 4)) * [0, 0, 1, 1], np.zeros((0, 4))), NEGATIVE)


class TestAnchors:
    def test_full_size_grid_count(self):
        anchors = np.random.default_rng(0).uniform(0.1, 0.5, size=(12, 2))
        assert len(anchor_boxes(anchors, (19, 25))) == 19 * 25 * 12

    def test_zero_head_gives_half(self):
        head = desk_head()
        head.score.weights[...] = 0
        head.score.bias[...] = 0
        props = score_anchors(np.random.default_rng(0).standard_normal((32, 1, 4, 5)), np.full((12, 2), 0.3), head)
        assert len(props) == 4 * 5 * 12
        assert all(p.actionness == 0.5 for p in props)

    def test_threshold_monotone(self):
        head = desk_head()
        conv5 = np.random.default_rng(1).standard_normal((32, 1, 4, 5)) * 50
        anchors = np.full((12, 2), 0.3)
        counts = [len(score_anchors(conv5, anchors, head, t)) for t in (0.1, 0.3, 0.5, 0.7, 0.9)]
        assert counts == sorted(counts, reverse=True)
        assert len(score_anchors(conv5, anchors, head, 1.0)) == 0

    def test_empty_anchor_set(self):
        with pytest.raises(ValueError):
            score_anchors(np.zeros((32, 1, 4, 5)), np.zeros((0, 2)), desk_head())


class TestSkipMapping:
    def test_full_frame_maps_to_full_frame(self):
        tube = map_to_skip_layer([0, 0, 25, 19], (128, 8, 150, 200), (19, 25))
        assert tube.shape == (8, 4)
        np.testing.assert_allclose(tube, np.tile([0, 0, 200, 150], (8, 1)))

    def test_ratio_scaling(self):
        tube = map_to_skip_layer([2, 3, 7, 11], (16, 8, 30, 40), (4, 5))
        np.testing.assert_allclose(tube[0], [2 * 40 / 5, 3 * 30 / 4, 7 * 40 / 5, 11 * 30 / 4])

    def test_descriptor_dims_full_size(self):
        p = PRESETS["paper"]
        c2 = p.tap_shape("conv2")[0]
        assert c2 * 8 * 8 + 512 * 4 * 4 == 16384
        assert p.reduce_dim == 8192


class TestDescriptors:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.conv5 = rng.standard_normal((32, 1, 4, 5))
        self.conv2 = rng.standard_normal((16, 8, 30, 40))
        self.prop = BoxProposal(np.array([1.0, 1.0, 3.0, 3.0]), 0.9, 0, label=POSITIVE)

    def test_shape(self):
        head = desk_head()
        d = assemble_skip_features(head, {"conv5": self.conv5, "conv2": self.conv2}, self.prop)
        assert d.shape == (8, 16 * 64 + 32 * 16)

    def test_scale_invariance(self):
        head = desk_head()
        a = assemble_skip_features(head, {"conv5": self.conv5, "conv2": self.conv2}, self.prop)
        b = assemble_skip_features(head, {"conv5": 3 * self.conv5, "conv2": 0.2 * self.conv2}, self.prop)
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)

    def test_zero_skip_cube(self):
        head = desk_head()
        d = assemble_skip_features(head, {"conv5": self.conv5, "conv2": np.zeros_like(self.conv2)}, self.prop)
        np.testing.assert_array_equal(d[:, :head.skip_dim], 0.0)

    def test_conv5_part_duplicated(self):
        head = desk_head()
        d = assemble_skip_features(head, {"conv5": self.conv5, "conv2": self.conv2}, self.prop)
        np.testing.assert_array_equal(d[:, head.skip_dim:], np.tile(d[:1, head.skip_dim:], (8, 1)))

    def test_requires_positive(self):
        prop = BoxProposal(np.array([1.0, 1.0, 3.0, 3.0]), 0.1, 0, label=NEGATIVE)
        with pytest.raises(ValueError):
            assemble_skip_features(desk_head(), {"conv5": self.conv5, "conv2": self.conv2}, prop)

    def test_conv5_only(self):
        head = desk_head(skip=None)
        d = assemble_skip_features(head, {"conv5": self.conv5}, self.prop)
        assert d.shape == (8, 32 * 16)


class TestRegression:
    def test_zero_deltas_copy_scaled_box(self):
        prop = BoxProposal(np.array([1.0, 1.0, 2.0, 3.0]), 0.8, 0)
        tube = regress_boxes(np.zeros((8, 4)), prop, DESK, (4, 5))
        np.testing.assert_allclose(tube.frame_boxes, np.tile([16, 15, 32, 45], (8, 1)))
        assert tube.actionness == 0.8

    def test_random_deltas_match_arithmetic(self):
        rng = np.random.default_rng(4)
        prop = BoxProposal(np.array([1.0, 1.0, 3.0, 2.5]), 0.5, 0)
        deltas = rng.uniform(-0.2, 0.2, size=(8, 4))
        tube = regress_boxes(deltas, prop, DESK, (4, 5))
        x1, y1, x2, y2 = 16.0, 15.0, 48.0, 37.5
        w, h = x2 - x1, y2 - y1
        for t in range(8):
            cx = x1 + w / 2 + deltas[t, 0] * w
            cy = y1 + h / 2 + deltas[t, 1] * h
            nw, nh = w * np.exp(deltas[t, 2]), h * np.exp(deltas[t, 3])
            expect = np.clip([cx - nw / 2, cy - nh / 2, cx + nw / 2, cy + nh / 2], 0, [80, 60, 80, 60])
            np.testing.assert_allclose(tube.frame_boxes[t], expect, rtol=1e-12)

    def test_boxes_clamped_to_frame(self):
        prop = BoxProposal(np.array([0.0, 0.0, 5.0, 4.0]), 0.5, 0)
        tube = regress_boxes(np.full((8, 4), 0.5), prop, DESK, (4, 5))
        assert tube.frame_boxes.min() >= 0 and tube.frame_boxes[:, 2].max() <= 80 and tube.frame_boxes[:, 3].max() <= 60

    def test_non_finite(self):
        with pytest.raises(ValueError):
            regress_boxes(np.full((8, 4), np.inf), BoxProposal(np.array([0, 0, 1, 1.0]), 0.5, 0), DESK, (4, 5))
