"""The 3D ConvNet backbone and the network size presets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc
from .tensor_core import Conv3DLayer, MaxPool3DLayer
from .toi_pool import ToIOutputSpec

CLIP_LEN = 8

# (layer name, kind, width key or pool kernel); every conv is followed by ReLU
LAYOUT = [
    ("conv1", "conv", "conv1"),
    ("max-pool1", "pool", (1, 2, 2)),
    ("conv2", "conv", "conv2"),
    ("max-pool2", "pool", (2, 2, 2)),
    ("conv3a", "conv", "conv3"),
    ("conv3b", "conv", "conv3"),
    ("max-pool3", "pool", (2, 2, 2)),
    ("conv4a", "conv", "conv4"),
    ("conv4b", "conv", "conv4"),
    ("max-pool4", "pool", (2, 2, 2)),
    ("conv5a", "conv", "conv5"),
    ("conv5b", "conv", "conv5"),
]

# feature cubes exposed to the heads
TAPS = {"conv1": "conv1", "conv2": "conv2", "conv3b": "conv3", "conv4b": "conv4", "conv5b": "conv5"}
SKIP_SOURCES = ("conv1", "conv2", "conv3", "conv4")


@dataclass(frozen=True)
class NetworkPreset:
    name: str
    frame_size: tuple  # (H, W)
    widths: dict
    in_channels: int = 3
    skip_spec: ToIOutputSpec = ToIOutputSpec(8, 8, 8)
    box_spec: ToIOutputSpec = ToIOutputSpec(1, 4, 4)
    reduce_dim: int = 8192
    tpn_fc: int = 4096
    recog_spec: ToIOutputSpec = ToIOutputSpec(1, 4, 4)
    recog_fc: int = 4096
    recog_dropout: float = 0.5

    def cube_shapes(self) -> dict:
        """Output shape of every backbone layer for one clip, by layer name."""
        c, (d, h, w) = self.in_channels, (CLIP_LEN,) + tuple(self.frame_size)
        shapes = {}
        for name, kind, arg in LAYOUT:
            if kind == "conv":
                c = self.widths[arg]
            else:
                kd, kh, kw = arg
                d, h, w = -(-d // kd), -(-h // kh), -(-w // kw)
            shapes[name] = (c, d, h, w)
        return shapes

    def tap_shape(self, tap: str) -> tuple:
        inv = {v: k for k, v in TAPS.items()}
        return self.cube_shapes()[inv[tap]]


PRESETS = {
    "paper": NetworkPreset(
        "paper_300x400", (300, 400),
        {"conv1": 64, "conv2": 128, "conv3": 256, "conv4": 512, "conv5": 512},
    ),
    "desk": NetworkPreset(
        "desk_60x80", (60, 80),
        {"conv1": 8, "conv2": 16, "conv3": 32, "conv4": 32, "conv5": 32},
        # dropout at 0.5 on a 128-unit layer stalls recognition training
        reduce_dim=256, tpn_fc=128, recog_fc=128, recog_dropout=0.0,
    ),
}
PRESETS["paper_300x400"] = PRESETS["paper"]
PRESETS["desk_60x80"] = PRESETS["desk"]


def get_preset(name: str) -> NetworkPreset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown network preset {name!r}; choose from {sorted(PRESETS)}") from None


class Backbone:
    """conv1..conv5b with ReLUs and four max pools (trailing edges zero-padded
    to the pool kernel, which equals ceil-mode pooling after ReLU)."""

    def __init__(self, preset: NetworkPreset, rng: np.random.Generator | None = None,
                 dtype=np.float64):
        self.preset = preset
        self.layers = {}
        cin = preset.in_channels
        rng = rng if rng is not None else np.random.default_rng(0)
        for name, kind, arg in LAYOUT:
            if kind == "conv":
                cout = preset.widths[arg]
                self.layers[name] = Conv3DLayer.init(rng, cin, cout, dtype=dtype)
                cin = cout
            else:
                self.layers[name] = MaxPool3DLayer(arg)

    def params(self) -> dict:
        out = {}
        for name, layer in self.layers.items():
            for pname, arr in layer.params().items():
                out[f"{name}.{pname}"] = arr
        return out

    def forward(self, clip: np.ndarray, keep_cache: bool = True, trace: dict | None = None):
        """Run one clip ``(C, 8, H, W)``.  Returns ``(taps, cache)``.

        ``trace``, when given, receives every layer's output shape.
        """
        tc.check_cube(clip, "clip")
        x = clip
        taps, cache = {}, []
        for name, kind, _ in LAYOUT:
            layer = self.layers[name]
            if kind == "conv":
                pre = layer.forward(x)
                y = tc.relu_forward(pre)
                if keep_cache:
                    cache.append((name, x, pre))
            else:
                xpad = tc.pad_to_multiple(x, layer.kernel)
                y, argmax = layer.forward(xpad)
                if keep_cache:
                    cache.append((name, x.shape, (xpad.shape, argmax)))
            if trace is not None:
                trace[name] = y.shape
            if name in TAPS:
                taps[TAPS[name]] = y
            x = y
        return taps, cache

    def backward(self, cache, tap_grads: dict, need_input_grad: bool = False):
        """Back-propagate gradients injected at the taps.  Returns ``(param_grads, grad_clip)``."""
        grads = {}
        g = None
        first = cache[0][0]
        for name, a, b in reversed(cache):
            tap = TAPS.get(name)
            if tap in tap_grads and tap_grads[tap] is not None:
                g = tap_grads[tap] if g is None else g + tap_grads[tap]
            if g is None:
                continue
            layer = self.layers[name]
            if isinstance(layer, Conv3DLayer):
                x, pre = a, b
                g = tc.relu_backward(pre, g)
                gx, gw, gb = layer.backward(x, g, need_input_grad or name != first)
                grads[f"{name}.kernel"], grads[f"{name}.bias"] = gw, gb
                g = gx
            else:
                in_shape, (pad_shape, argmax) = a, b
                g = tc.crop_to(layer.backward(g, argmax, pad_shape), in_shape)
        for k, arr in self.params().items():
            grads.setdefault(k, np.zeros_like(arr))
        return grads, (g if need_input_grad else None)
