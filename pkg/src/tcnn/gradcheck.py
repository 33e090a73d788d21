"""Central finite-difference checks for every differentiable layer.

Each check builds a small random instance, takes the scalar loss
``sum(out * R)`` for a fixed random ``R``, and compares the analytic gradient
of every input and parameter with ``(L(x + eps) - L(x - eps)) / (2 eps)``
elementwise using ``|a - n| / (|n| + 1e-8)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from types import SimpleNamespace

import numpy as np

from . import tensor_core as tc
from . import toi_pool as tp
from . import training
from .network import NetworkPreset
from .toi_pool import ToIOutputSpec
from .tpn import TPNHead

EPS = 1e-5
FLOOR = 1e-8
TOLERANCE = 1e-3
MAX_COORDS = 40  # finite-difference probes per tensor per instance


@dataclass
class GradReport:
    layer: str
    instances: int
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= TOLERANCE


def rel_error(analytic, numeric) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return np.abs(analytic - numeric) / (np.abs(numeric) + FLOOR)


def _probe(loss_fn, tensors: dict, grads: dict, rng, max_coords=MAX_COORDS, eps=EPS) -> float:
    worst = 0.0
    for name, arr in tensors.items():
        flat = arr.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, max_coords, replace=False)
        g = np.asarray(grads[name]).reshape(-1)
        for i in coords:
            keep = flat[i]
            flat[i] = keep + eps
            up = loss_fn()
            flat[i] = keep - eps
            down = loss_fn()
            flat[i] = keep
            numeric = (up - down) / (2 * eps)
            worst = max(worst, float(rel_error(g[i], numeric)))
    return worst


def _spread(rng, shape) -> np.ndarray:
    """Distinct values in (-1, 1), none near 0, spaced 1/n apart (keeps max and relu away from kinks)."""
    n = int(np.prod(shape))
    vals = rng.permutation(n) - (n - 1) / 2 + 0.25
    return (vals / n).reshape(shape)


def check_conv3d(rng) -> float:
    cin, cout = rng.integers(1, 3, endpoint=True), rng.integers(1, 3, endpoint=True)
    d, h, w = rng.integers(2, 4, size=3, endpoint=True)
    pad = tuple(int(p) for p in rng.integers(0, 1, size=3, endpoint=True))
    x = rng.standard_normal((cin, d + 2, h + 2, w + 2))
    k = rng.standard_normal((cout, cin, 3, 3, 3))
    b = rng.standard_normal(cout)
    r = rng.standard_normal(tc.conv3d_forward(x, k, b, pad).shape)
    loss = lambda: float(np.sum(tc.conv3d_forward(x, k, b, pad) * r))
    gx, gk, gb = tc.conv3d_backward(x, k, r, pad)
    return _probe(loss, {"x": x, "k": k, "b": b}, {"x": gx, "k": gk, "b": gb}, rng)


def check_maxpool3d(rng) -> float:
    kern = [(1, 2, 2), (2, 2, 2), (1, 1, 2), (2, 1, 1)][rng.integers(4)]
    c = rng.integers(1, 3, endpoint=True)
    shape = (c,) + tuple(int(kk * rng.integers(1, 3, endpoint=True)) for kk in kern)
    x = _spread(rng, shape)
    out, arg = tc.maxpool3d_forward(x, kern)
    r = rng.standard_normal(out.shape)
    loss = lambda: float(np.sum(tc.maxpool3d_forward(x, kern)[0] * r))
    gx = tc.maxpool3d_backward(r, arg, x.shape)
    return _probe(loss, {"x": x}, {"x": gx}, rng)


def check_fc(rng) -> float:
    n, i, o = rng.integers(1, 5, size=3, endpoint=True)
    x, w, b = rng.standard_normal((n, i)), rng.standard_normal((o, i)), rng.standard_normal(o)
    r = rng.standard_normal((n, o))
    loss = lambda: float(np.sum(tc.fc_forward(x, w, b) * r))
    gx, gw, gb = tc.fc_backward(x, w, r)
    return _probe(loss, {"x": x, "w": w, "b": b}, {"x": gx, "w": gw, "b": gb}, rng)


def check_relu(rng) -> float:
    x = _spread(rng, tuple(rng.integers(1, 5, size=3, endpoint=True)))
    r = rng.standard_normal(x.shape)
    loss = lambda: float(np.sum(tc.relu_forward(x) * r))
    return _probe(loss, {"x": x}, {"x": tc.relu_backward(x, r)}, rng)


def check_l2norm(rng) -> float:
    x = rng.standard_normal((rng.integers(1, 4, endpoint=True), rng.integers(2, 8, endpoint=True)))
    r = rng.standard_normal(x.shape)
    loss = lambda: float(np.sum(tc.l2norm_forward(x)[0] * r))
    y, norms = tc.l2norm_forward(x)
    return _probe(loss, {"x": x}, {"x": tc.l2norm_backward(y, norms, r)}, rng)


def check_conv1x1(rng) -> float:
    cin, cout = rng.integers(1, 4, size=2, endpoint=True)
    x = rng.standard_normal((cin,) + tuple(rng.integers(1, 3, size=3, endpoint=True)))
    w, b = rng.standard_normal((cout, cin)), rng.standard_normal(cout)
    r = rng.standard_normal((cout,) + x.shape[1:])
    loss = lambda: float(np.sum(tc.conv1x1_forward(x, w, b) * r))
    gx, gw, gb = tc.conv1x1_backward(x, w, r)
    return _probe(loss, {"x": x, "w": w, "b": b}, {"x": gx, "w": gw, "b": gb}, rng)


def random_tube(rng, d, h, w) -> np.ndarray:
    tube = np.zeros((d, 4))
    for t in range(d):
        x1, x2 = np.sort(rng.uniform(0, w, 2))
        y1, y2 = np.sort(rng.uniform(0, h, 2))
        tube[t] = [x1, y1, x2, y2]
    return tube


def check_toi_pool(rng) -> float:
    c = rng.integers(1, 3, endpoint=True)
    d, h, w = rng.integers(2, 6, size=3, endpoint=True)
    x = _spread(rng, (c, d, h, w))
    spec = ToIOutputSpec(int(rng.integers(1, d, endpoint=True)), int(rng.integers(1, 3, endpoint=True)),
                         int(rng.integers(1, 3, endpoint=True)))
    tube = random_tube(rng, d, h, w)
    out, arg = tp.toi_pool_forward(x, tube, spec)
    r = rng.standard_normal(out.shape)
    loss = lambda: float(np.sum(tp.toi_pool_forward(x, tube, spec)[0] * r))
    return _probe(loss, {"x": x}, {"x": tp.toi_pool_backward(r, arg)}, rng)


TINY = NetworkPreset("tiny_32x32", (32, 32), {"conv1": 2, "conv2": 3, "conv3": 2, "conv4": 2, "conv5": 3},
                     skip_spec=ToIOutputSpec(8, 2, 2), box_spec=ToIOutputSpec(1, 2, 2),
                     reduce_dim=6, tpn_fc=5, recog_spec=ToIOutputSpec(1, 2, 2), recog_fc=5)


def tpn_instance(rng, preset: NetworkPreset = TINY, skip_source: str | None = "conv2"):
    """Random feature taps, head and labelled anchors for the composed TPN loss."""
    anchors = rng.uniform(0.3, 0.9, size=(3, 2))
    head = TPNHead(preset, len(anchors), skip_source, rng)
    for layer in head.layers().values():
        layer.weights[...] = rng.standard_normal(layer.weights.shape) * 0.5
        layer.bias[...] = rng.standard_normal(layer.bias.shape) * 0.1
    model = SimpleNamespace(tpn=head, anchors=anchors, preset=preset)
    taps = {"conv5": rng.standard_normal(preset.tap_shape("conv5"))}
    if skip_source:
        taps[skip_source] = rng.standard_normal(preset.tap_shape(skip_source))
    fh, fw = preset.frame_size
    gt = []
    for _ in range(8):
        x1, y1 = rng.uniform(0, fw / 2), rng.uniform(0, fh / 2)
        gt.append(np.array([x1, y1, x1 + rng.uniform(6, fw / 2), y1 + rng.uniform(6, fh / 2)]))
    for t in rng.choice(8, int(rng.integers(0, 3)), replace=False):
        gt[t] = None
    boxes, labels = training.anchor_labels(model, gt, taps["conv5"].shape[2:])
    idx = np.arange(len(boxes))
    reg = idx[labels == 1]
    return model, taps, gt, idx, labels, reg


def check_tpn_loss(rng) -> float:
    model, taps, gt, idx, labels, reg = tpn_instance(rng)
    head = model.tpn

    def loss():
        a, r, _, _ = training.tpn_loss(model, taps, gt, idx, labels, reg)
        return a + r

    _, _, tap_grads, head_grads = training.tpn_loss(model, taps, gt, idx, labels, reg)
    tensors = dict(taps)
    grads = dict(tap_grads)
    for k, v in head.params().items():
        tensors[k] = v
        grads[k] = head_grads[k]
    return _probe(loss, tensors, grads, rng, max_coords=25)


CHECKS = {
    "conv3d": check_conv3d,
    "maxpool3d": check_maxpool3d,
    "fc": check_fc,
    "relu": check_relu,
    "l2norm": check_l2norm,
    "conv1x1": check_conv1x1,
    "toi_pool": check_toi_pool,
    "tpn_loss": check_tpn_loss,
}


def run_checks(instances: int = 20, seed: int = 0, layers=None) -> list[GradReport]:
    out = []
    for name in layers or CHECKS:
        rng = np.random.default_rng([seed, sum(map(ord, name))])
        worst = max(CHECKS[name](rng) for _ in range(instances))
        out.append(GradReport(name, instances, worst))
    return out


def format_report(reports) -> str:
    lines = [f"{'layer':<10} {'instances':>9} {'max_rel_error':>14}  status"]
    for r in reports:
        lines.append(f"{r.layer:<10} {r.instances:>9} {r.max_rel_error:>14.3e}  {'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
