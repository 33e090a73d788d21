import math

import numpy as np
import pytest

from tcnn.gradcheck import random_tube
from tcnn.tensor_core import ShapeError
from tcnn.toi_pool import ToIOutputSpec, bin_edges, snap_box, toi_pool_backward, toi_pool_forward


def brute_toi(x, tube, spec):
    """Explicit two-stage pooling over Python lists; ties go to the lowest linear index."""
    c, d, h, w = x.shape
    out = np.zeros((c,) + spec.shape)
    idx = np.zeros(out.shape, dtype=np.int64)
    for ch in range(c):
        stage1 = []
        for f in range(d):
            x1, y1, x2, y2 = tube[f]
            x1, x2 = min(max(x1, 0), w), min(max(x2, 0), w)
            y1, y2 = min(max(y1, 0), h), min(max(y2, 0), h)
            c0, c1 = math.floor(x1), math.ceil(x2)
            r0, r1 = math.floor(y1), math.ceil(y2)
            if c1 <= c0:
                c0 = min(c0, w - 1)
                c1 = c0 + 1
            if r1 <= r0:
                r0 = min(r0, h - 1)
                r1 = r0 + 1
            grid = {}
            for i in range(spec.H):
                ra = r0 + math.floor(i * (r1 - r0) / spec.H)
                rb = r0 + math.ceil((i + 1) * (r1 - r0) / spec.H)
                for j in range(spec.W):
                    ca = c0 + math.floor(j * (c1 - c0) / spec.W)
                    cb = c0 + math.ceil((j + 1) * (c1 - c0) / spec.W)
                    cells = [(x[ch, f, r, cc], np.ravel_multi_index((ch, f, r, cc), x.shape))
                             for r in range(ra, rb) for cc in range(ca, cb)]
                    grid[i, j] = max(cells, key=lambda t: (t[0], -t[1]))
            stage1.append(grid)
        for k in range(spec.D):
            fa = math.floor(k * d / spec.D)
            fb = math.ceil((k + 1) * d / spec.D)
            for i in range(spec.H):
                for j in range(spec.W):
                    v, li = max((stage1[f][i, j] for f in range(fa, fb)), key=lambda t: (t[0], -t[1]))
                    out[ch, k, i, j], idx[ch, k, i, j] = v, li
    return out, idx


class TestForward:
    @pytest.mark.parametrize("seed", range(15))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        c, d, h, w = 2, int(rng.integers(1, 7)), int(rng.integers(1, 8)), int(rng.integers(1, 8))
        ints = seed % 2 == 0
        x = rng.integers(0, 4, size=(c, d, h, w)).astype(float) if ints else rng.standard_normal((c, d, h, w))
        spec = ToIOutputSpec(int(rng.integers(1, 5)), int(rng.integers(1, 5)), int(rng.integers(1, 5)))
        tube = random_tube(rng, d, h + 2, w + 2) - 1  # may poke outside the map
        tube[:, 2:] = np.maximum(tube[:, 2:], tube[:, :2])
        out, arg = toi_pool_forward(x, tube, spec)
        ref, ref_idx = brute_toi(x, tube, spec)
        np.testing.assert_array_equal(out, ref)
        np.testing.assert_array_equal(arg.output, ref_idx)

    def test_identity_for_full_tube(self):
        x = np.random.default_rng(0).standard_normal((3, 4, 5, 6))
        tube = np.tile([0, 0, 6, 5], (4, 1))
        out, _ = toi_pool_forward(x, tube, ToIOutputSpec(4, 5, 6))
        np.testing.assert_array_equal(out, x)

    def test_constant_cube(self):
        x = np.full((2, 3, 4, 4), 2.5)
        out, _ = toi_pool_forward(x, np.tile([1, 1, 3, 3], (3, 1)), ToIOutputSpec(2, 2, 2))
        np.testing.assert_array_equal(out, 2.5)

    def test_degenerate_box_is_one_cell(self):
        x = np.arange(16, dtype=float).reshape(1, 1, 4, 4)
        out, arg = toi_pool_forward(x, [[2, 1, 2, 1]], ToIOutputSpec(1, 2, 2))
        np.testing.assert_array_equal(out, np.full((1, 1, 2, 2), x[0, 0, 1, 2]))

    def test_depth_mismatch(self):
        with pytest.raises(ShapeError):
            toi_pool_forward(np.zeros((1, 3, 4, 4)), np.zeros((2, 4)), ToIOutputSpec(1, 1, 1))

    def test_inverted_box(self):
        with pytest.raises(ValueError):
            snap_box([3, 0, 1, 2], 4, 4)

    def test_bins_cover_extent(self):
        for e in range(1, 9):
            for m in range(1, 9):
                lo, hi = bin_edges(0, e, m)
                assert lo[0] == 0 and hi[-1] == e
                assert np.all(hi > lo)

    def test_full_size_output_shapes(self):
        conv2 = np.zeros((128, 8, 150, 200), dtype=np.float32)
        out, _ = toi_pool_forward(conv2, np.tile([0, 0, 200, 150], (8, 1)), ToIOutputSpec(8, 8, 8))
        assert out.shape == (128, 8, 8, 8)


class TestBackward:
    def test_shared_argmax_accumulates(self):
        # a 1x1 box pooled to 2x2 makes all four outputs share one input cell
        x = np.zeros((1, 1, 3, 3))
        x[0, 0, 1, 1] = 5.0
        out, arg = toi_pool_forward(x, [[1, 1, 2, 2]], ToIOutputSpec(1, 2, 2))
        g = np.array([1.0, 2.0, 3.0, 4.0]).reshape(out.shape)
        gx = toi_pool_backward(g, arg)
        assert gx[0, 0, 1, 1] == 10.0
        assert np.count_nonzero(gx) == 1

    @pytest.mark.parametrize("seed", range(10))
    def test_mass_conservation(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((2, 4, 6, 5))
        tube = random_tube(rng, 4, 6, 5)
        out, arg = toi_pool_forward(x, tube, ToIOutputSpec(2, 3, 3))
        g = rng.standard_normal(out.shape)
        gx = toi_pool_backward(g, arg)
        assert gx.sum() == pytest.approx(g.sum(), abs=1e-12)
        # every output routes to the input it copied
        np.testing.assert_array_equal(x.reshape(-1)[arg.output], out)

    def test_input_shape_check(self):
        x = np.zeros((1, 2, 3, 3))
        out, arg = toi_pool_forward(x, np.tile([0, 0, 3, 3], (2, 1)), ToIOutputSpec(1, 1, 1))
        with pytest.raises(ShapeError):
            toi_pool_backward(np.zeros(out.shape), arg, (1, 2, 3, 4))
