"""Dense 3D conv/pool/fc primitives with exact backward passes.

Every activation volume is a ``(C, D, H, W)`` ndarray (channels, frames,
rows, cols), C-contiguous, so a linear index ``i`` into a cube means
``np.unravel_index(i, cube.shape)``.  Forward functions return whatever the
matching backward needs (argmax records, normalisers); nothing is cached on
the layer objects, so clips can run through the same layers concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Raised when operands have incompatible shapes."""


def check_cube(x: np.ndarray, name: str = "input") -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name} must be a C x D x H x W cube, got shape {x.shape}")
    if min(x.shape) < 1:
        raise ShapeError(f"{name} has an empty axis: {x.shape}")


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(a) for a in v)
    if len(v) != 3:
        raise ValueError(f"expected 3 values, got {v}")
    return v


# ---------------------------------------------------------------------------
# 3D convolution (stride 1)
# ---------------------------------------------------------------------------

def _conv_geometry(x, weight, padding):
    check_cube(x)
    if weight.ndim != 5:
        raise ShapeError(f"kernel must be 5-d (out, in, kd, kh, kw), got {weight.shape}")
    cin = x.shape[0]
    if weight.shape[1] != cin:
        raise ShapeError(f"channel mismatch: input has {cin}, kernel expects {weight.shape[1]}")
    pad = _triple(padding)
    kd, kh, kw = weight.shape[2:]
    padded = [n + 2 * p for n, p in zip(x.shape[1:], pad)]
    out = tuple(n - k + 1 for n, k in zip(padded, (kd, kh, kw)))
    if min(out) < 1:
        raise ShapeError(f"kernel {weight.shape[2:]} larger than padded input {tuple(padded)}")
    return pad, out


# bytes of float64 im2col scratch per chunk
_COLS_BUDGET = 1 << 27


def _depth_chunks(cin, taps, od, oh, ow):
    per_slice = cin * taps * oh * ow * 8
    step = max(1, min(od, _COLS_BUDGET // max(per_slice, 1)))
    for z0 in range(0, od, step):
        yield z0, min(od, z0 + step)


def _im2col(xp, z0, z1, ksize, out_hw):
    """Columns ``(cin * kd * kh * kw, nz * oh * ow)`` for output frames ``z0:z1``."""
    kd, kh, kw = ksize
    oh, ow = out_hw
    cin = xp.shape[0]
    win = np.lib.stride_tricks.sliding_window_view(xp[:, z0:z1 + kd - 1], (kd, kh, kw), axis=(1, 2, 3))
    # (cin, nz, oh, ow, kd, kh, kw) -> kernel axes first
    return win.transpose(0, 4, 5, 6, 1, 2, 3).reshape(cin * kd * kh * kw, (z1 - z0) * oh * ow)


def conv3d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray,
                   padding=1) -> np.ndarray:
    """Cross-correlate ``x`` with ``weight`` (stride 1, zero padding).

    Each output is one float64 dot product over (in_channel, kd, kh, kw),
    cast back to ``x.dtype`` once at the end.
    """
    pad, (od, oh, ow) = _conv_geometry(x, weight, padding)
    cout, cin, kd, kh, kw = weight.shape
    if bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} != ({cout},)")
    xp = np.pad(x.astype(np.float64, copy=False), ((0, 0),) + tuple((p, p) for p in pad))
    w2 = weight.astype(np.float64, copy=False).reshape(cout, -1)
    out = np.empty((cout, od, oh, ow), dtype=x.dtype)
    for z0, z1 in _depth_chunks(cin, kd * kh * kw, od, oh, ow):
        cols = _im2col(xp, z0, z1, (kd, kh, kw), (oh, ow))
        acc = w2 @ cols
        acc += bias.astype(np.float64)[:, None]
        out[:, z0:z1] = acc.reshape(cout, z1 - z0, oh, ow)
    return out


def conv3d_backward(x: np.ndarray, weight: np.ndarray, grad_out: np.ndarray,
                    padding=1, need_input_grad: bool = True):
    """Return ``(grad_input, grad_weight, grad_bias)`` for :func:`conv3d_forward`.

    ``grad_input`` is ``None`` when ``need_input_grad`` is false.
    """
    pad, out = _conv_geometry(x, weight, padding)
    cout, cin, kd, kh, kw = weight.shape
    if grad_out.shape != (cout,) + out:
        raise ShapeError(f"grad_out shape {grad_out.shape} != {(cout,) + out}")
    od, oh, ow = out
    xp = np.pad(x.astype(np.float64, copy=False), ((0, 0),) + tuple((p, p) for p in pad))
    g = grad_out.astype(np.float64, copy=False)
    w2 = weight.astype(np.float64, copy=False).reshape(cout, -1)
    gw = np.zeros(w2.shape)
    gxp = np.zeros_like(xp) if need_input_grad else None
    for z0, z1 in _depth_chunks(cin, kd * kh * kw, od, oh, ow):
        g2 = g[:, z0:z1].reshape(cout, -1)
        cols = _im2col(xp, z0, z1, (kd, kh, kw), (oh, ow))
        gw += g2 @ cols.T
        if need_input_grad:
            gcols = (w2.T @ g2).reshape(cin, kd, kh, kw, z1 - z0, oh, ow)
            for a in range(kd):
                for b in range(kh):
                    for c in range(kw):
                        gxp[:, z0 + a:z1 + a, b:b + oh, c:c + ow] += gcols[:, a, b, c]
    gb = g.reshape(cout, -1).sum(axis=1).astype(weight.dtype)
    gw = gw.reshape(weight.shape).astype(weight.dtype)
    if not need_input_grad:
        return None, gw, gb
    d, h, w = x.shape[1:]
    gx = gxp[:, pad[0]:pad[0] + d, pad[1]:pad[1] + h, pad[2]:pad[2] + w]
    return gx.astype(x.dtype), gw, gb


# ---------------------------------------------------------------------------
# 3D max pooling (stride == kernel)
# ---------------------------------------------------------------------------

def maxpool3d_forward(x: np.ndarray, kernel) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping max pool.  Returns ``(output, argmax)``.

    ``argmax`` holds, per output element, the linear index into ``x`` of the
    winning input.  Ties go to the lowest linear index.
    """
    check_cube(x)
    kd, kh, kw = _triple(kernel)
    c, d, h, w = x.shape
    if d % kd or h % kh or w % kw:
        raise ShapeError(f"input {x.shape[1:]} not divisible by pool kernel {(kd, kh, kw)}")
    od, oh, ow = d // kd, h // kh, w // kw
    win = (x.reshape(c, od, kd, oh, kh, ow, kw)
            .transpose(0, 1, 3, 5, 2, 4, 6)
            .reshape(c, od, oh, ow, kd * kh * kw))
    local = win.argmax(axis=-1)
    out = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    # local offset (a, b, e) inside the window -> linear index into x
    a, rem = np.divmod(local, kh * kw)
    b, e = np.divmod(rem, kw)
    ci = np.arange(c)[:, None, None, None]
    zi = np.arange(od)[None, :, None, None] * kd + a
    yi = np.arange(oh)[None, None, :, None] * kh + b
    xi = np.arange(ow)[None, None, None, :] * kw + e
    argmax = ((ci * d + zi) * h + yi) * w + xi
    return out, argmax


def route_gradient(grad_out: np.ndarray, argmax: np.ndarray, input_shape) -> np.ndarray:
    """Scatter-add ``grad_out[j]`` onto ``argmax[j]``; the shared max-pool adjoint."""
    if argmax is None:
        raise ValueError("missing argmax record; run the forward pass first")
    if grad_out.shape != argmax.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != argmax shape {argmax.shape}")
    size = int(np.prod(input_shape))
    flat = np.bincount(argmax.ravel(), weights=grad_out.ravel().astype(np.float64), minlength=size)
    if flat.size != size:
        raise ShapeError("argmax record points outside the input")
    return flat.reshape(input_shape).astype(grad_out.dtype, copy=False)


def maxpool3d_backward(grad_out: np.ndarray, argmax: np.ndarray, input_shape) -> np.ndarray:
    return route_gradient(grad_out, argmax, tuple(input_shape))


def pad_to_multiple(x: np.ndarray, kernel) -> np.ndarray:
    """Zero-pad the trailing end of D, H, W up to multiples of ``kernel``.

    On post-ReLU activations this makes a divisible max pool equal to a
    ceil-mode pool over partial windows.
    """
    k = _triple(kernel)
    extra = [(-n) % kk for n, kk in zip(x.shape[1:], k)]
    if not any(extra):
        return x
    return np.pad(x, ((0, 0),) + tuple((0, e) for e in extra))


def crop_to(grad: np.ndarray, shape) -> np.ndarray:
    c, d, h, w = shape
    return grad[:c, :d, :h, :w]


# ---------------------------------------------------------------------------
# fully connected, relu, l2norm, 1x1x1 conv
# ---------------------------------------------------------------------------

def fc_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """``y = x @ weight.T + bias`` over the last axis of ``x``."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"fc expects input dim {weight.shape[1]}, got {x.shape[-1]}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} != ({weight.shape[0]},)")
    return x @ weight.T + bias


def fc_backward(x: np.ndarray, weight: np.ndarray, grad_out: np.ndarray):
    if grad_out.shape != x.shape[:-1] + (weight.shape[0],):
        raise ShapeError(f"grad_out shape {grad_out.shape} mismatches fc output")
    x2 = x.reshape(-1, x.shape[-1])
    g2 = grad_out.reshape(-1, weight.shape[0])
    return grad_out @ weight, g2.T @ x2, g2.sum(axis=0)


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    if x.shape != grad_out.shape:
        raise ShapeError(f"relu grad shape {grad_out.shape} != input shape {x.shape}")
    return grad_out * (x > 0)


def l2norm_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Normalise each row (last axis) to unit Euclidean norm.

    Returns ``(y, norms)``.  All-zero rows map to zero (and get zero gradient).
    """
    norms = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    safe = np.where(norms > 0, norms, 1.0)
    return np.where(norms > 0, x / safe, 0.0), norms


def l2norm_backward(y: np.ndarray, norms: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    if y.shape != grad_out.shape:
        raise ShapeError(f"l2norm grad shape {grad_out.shape} != {y.shape}")
    safe = np.where(norms > 0, norms, 1.0)
    proj = np.sum(y * grad_out, axis=-1, keepdims=True)
    return np.where(norms > 0, (grad_out - y * proj) / safe, 0.0)


def conv1x1_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Channel-mixing 1x1x1 convolution; ``weight`` is ``(out, in)``."""
    check_cube(x)
    if weight.ndim != 2 or weight.shape[1] != x.shape[0]:
        raise ShapeError(f"1x1 conv weight {weight.shape} does not match {x.shape[0]} channels")
    c, d, h, w = x.shape
    y = weight @ x.reshape(c, -1) + bias[:, None]
    return y.reshape(weight.shape[0], d, h, w)


def conv1x1_backward(x: np.ndarray, weight: np.ndarray, grad_out: np.ndarray):
    c, d, h, w = x.shape
    if grad_out.shape != (weight.shape[0], d, h, w):
        raise ShapeError(f"grad_out shape {grad_out.shape} mismatches 1x1 conv output")
    x2 = x.reshape(c, -1)
    g2 = grad_out.reshape(weight.shape[0], -1)
    gx = (weight.T @ g2).reshape(x.shape)
    return gx, g2 @ x2.T, g2.sum(axis=1)


# ---------------------------------------------------------------------------
# layer containers
# ---------------------------------------------------------------------------

@dataclass
class Conv3DLayer:
    kernel: np.ndarray
    bias: np.ndarray
    padding: tuple = (1, 1, 1)

    @classmethod
    def init(cls, rng: np.random.Generator, in_channels: int, out_channels: int,
             size=(3, 3, 3), padding=(1, 1, 1), dtype=np.float64) -> "Conv3DLayer":
        size = _triple(size)
        fan_in = in_channels * int(np.prod(size))
        kernel = rng.standard_normal((out_channels, in_channels) + size) * np.sqrt(2.0 / fan_in)
        return cls(kernel.astype(dtype), np.zeros(out_channels, dtype), _triple(padding))

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    def forward(self, x):
        return conv3d_forward(x, self.kernel, self.bias, self.padding)

    def backward(self, x, grad_out, need_input_grad=True):
        return conv3d_backward(x, self.kernel, grad_out, self.padding, need_input_grad)

    def params(self) -> dict:
        return {"kernel": self.kernel, "bias": self.bias}


@dataclass
class MaxPool3DLayer:
    kernel: tuple

    def __post_init__(self):
        self.kernel = _triple(self.kernel)

    def forward(self, x):
        return maxpool3d_forward(x, self.kernel)

    def backward(self, grad_out, argmax, input_shape):
        return maxpool3d_backward(grad_out, argmax, input_shape)

    def params(self) -> dict:
        return {}


@dataclass
class FCLayer:
    weights: np.ndarray
    bias: np.ndarray

    @classmethod
    def init(cls, rng: np.random.Generator, in_dim: int, out_dim: int,
             scale: float | None = None, dtype=np.float64) -> "FCLayer":
        if scale is None:
            scale = np.sqrt(2.0 / in_dim)
        w = rng.standard_normal((out_dim, in_dim)) * scale
        return cls(w.astype(dtype), np.zeros(out_dim, dtype))

    def forward(self, x):
        return fc_forward(x, self.weights, self.bias)

    def backward(self, x, grad_out):
        return fc_backward(x, self.weights, grad_out)

    def params(self) -> dict:
        return {"weights": self.weights, "bias": self.bias}


@dataclass
class Conv1x1Layer:
    weights: np.ndarray
    bias: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.bias is None:
            self.bias = np.zeros(self.weights.shape[0], self.weights.dtype)

    @classmethod
    def init(cls, rng: np.random.Generator, in_channels: int, out_channels: int,
             scale: float | None = None, dtype=np.float64) -> "Conv1x1Layer":
        if scale is None:
            scale = np.sqrt(2.0 / in_channels)
        w = rng.standard_normal((out_channels, in_channels)) * scale
        return cls(w.astype(dtype), np.zeros(out_channels, dtype))

    def forward(self, x):
        return conv1x1_forward(x, self.weights, self.bias)

    def backward(self, x, grad_out):
        return conv1x1_backward(x, self.weights, grad_out)

    def params(self) -> dict:
        return {"weights": self.weights, "bias": self.bias}
