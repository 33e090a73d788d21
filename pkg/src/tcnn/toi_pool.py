"""Tube-of-Interest pooling.

A tube is one box per frame of the feature cube.  Pooling runs in two
stages: each frame's box is max-pooled into an ``H x W`` grid, then the ``d``
pooled maps are grouped into ``D`` temporal bins and max-pooled again.  Bin
``k`` of ``M`` over an extent ``e`` covers ``[floor(k e / M), ceil((k+1) e / M))``,
so bins may overlap (and repeat cells when ``M > e``) but are never empty.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor_core import ShapeError, check_cube, route_gradient


@dataclass(frozen=True)
class ToIOutputSpec:
    D: int
    H: int
    W: int

    def __post_init__(self):
        if min(self.D, self.H, self.W) < 1:
            raise ValueError(f"ToI output dims must be >= 1, got {self}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.D, self.H, self.W)


@dataclass
class ToIArgmax:
    """Linear indices into the pooled input.

    ``spatial`` has shape ``(C, d, H, W)`` (stage 1 winners) and ``output``
    shape ``(C, D, H, W)`` (final winners, the ``f(j)`` of the backward rule).
    """

    spatial: np.ndarray
    output: np.ndarray
    input_shape: tuple


def bin_edges(start: int, extent: int, bins: int) -> tuple[np.ndarray, np.ndarray]:
    k = np.arange(bins)
    lo = start + (k * extent) // bins
    hi = start - ((-(k + 1) * extent) // bins)
    return lo, hi


def snap_box(box, width: int, height: int) -> tuple[int, int, int, int]:
    """Clamp a real-valued box to the map and snap outward to integer cell edges.

    Returns half-open cell ranges ``(c0, r0, c1, r1)``; a box that is empty
    after clamping becomes the single cell at its clamped corner.
    """
    x1, y1, x2, y2 = (float(v) for v in box)
    if x1 > x2 or y1 > y2:
        raise ValueError(f"invalid box {box}: need x1 <= x2 and y1 <= y2")
    x1, x2 = min(max(x1, 0.0), width), min(max(x2, 0.0), width)
    y1, y2 = min(max(y1, 0.0), height), min(max(y2, 0.0), height)
    c0, c1 = math.floor(x1), math.ceil(x2)
    r0, r1 = math.floor(y1), math.ceil(y2)
    if c1 <= c0:
        c0 = min(c0, width - 1)
        c1 = c0 + 1
    if r1 <= r0:
        r0 = min(r0, height - 1)
        r1 = r0 + 1
    return c0, r0, c1, r1


def toi_pool_forward(x: np.ndarray, tube, spec: ToIOutputSpec) -> tuple[np.ndarray, ToIArgmax]:
    """Pool the tube ``tube`` (``d x 4`` boxes, feature units) of cube ``x`` to ``C x D x H x W``."""
    check_cube(x)
    c, d, h, w = x.shape
    tube = np.asarray(tube, dtype=np.float64).reshape(-1, 4)
    if len(tube) != d:
        raise ShapeError(f"tube has {len(tube)} boxes but the cube depth is {d}")
    H, W, D = spec.H, spec.W, spec.D

    rows_lo, rows_hi, cols_lo, cols_hi = [], [], [], []
    for box in tube:
        c0, r0, c1, r1 = snap_box(box, w, h)
        lo, hi = bin_edges(r0, r1 - r0, H)
        rows_lo.append(lo), rows_hi.append(hi)
        lo, hi = bin_edges(c0, c1 - c0, W)
        cols_lo.append(lo), cols_hi.append(hi)
    rows_lo, rows_hi = np.array(rows_lo), np.array(rows_hi)
    cols_lo, cols_hi = np.array(cols_lo), np.array(cols_hi)
    rh = int((rows_hi - rows_lo).max())
    rw = int((cols_hi - cols_lo).max())
    # candidate cells per bin; padding repeats the last valid cell so that
    # candidate order stays non-decreasing in linear index
    rows = np.minimum(rows_lo[:, :, None] + np.arange(rh), rows_hi[:, :, None] - 1)  # (d, H, rh)
    cols = np.minimum(cols_lo[:, :, None] + np.arange(rw), cols_hi[:, :, None] - 1)  # (d, W, rw)
    fi = np.arange(d)[:, None, None, None, None]
    ri = rows[:, :, None, :, None]
    ci = cols[:, None, :, None, :]
    cand = x[:, fi, ri, ci].reshape(c, d, H, W, rh * rw)
    lin = np.broadcast_to((fi * h + ri) * w + ci, (d, H, W, rh, rw)).reshape(d, H, W, rh * rw)
    local = cand.argmax(axis=-1)
    spatial_val = np.take_along_axis(cand, local[..., None], axis=-1)[..., 0]
    spatial_idx = np.take_along_axis(np.broadcast_to(lin, (c,) + lin.shape), local[..., None], axis=-1)[..., 0]
    spatial_idx = spatial_idx + (np.arange(c) * (d * h * w))[:, None, None, None]

    t_lo, t_hi = bin_edges(0, d, D)
    rt = int((t_hi - t_lo).max())
    frames = np.minimum(t_lo[:, None] + np.arange(rt), t_hi[:, None] - 1)  # (D, rt)
    tcand = spatial_val[:, frames]  # (C, D, rt, H, W)
    tloc = tcand.argmax(axis=2)
    out = np.take_along_axis(tcand, tloc[:, :, None], axis=2)[:, :, 0]
    tidx = spatial_idx[:, frames]
    out_idx = np.take_along_axis(tidx, tloc[:, :, None], axis=2)[:, :, 0]
    return out, ToIArgmax(spatial_idx, out_idx, x.shape)


def toi_pool_backward(grad_out: np.ndarray, argmax: ToIArgmax, input_shape=None) -> np.ndarray:
    """dL/dx_i = sum over outputs j whose argmax is i of dL/dy_j."""
    shape = tuple(input_shape) if input_shape is not None else tuple(argmax.input_shape)
    if shape != tuple(argmax.input_shape):
        raise ShapeError(f"input dims {shape} do not match the forward call {argmax.input_shape}")
    return route_gradient(grad_out, argmax.output, shape)
