"""The full detector: TPN and recognition networks plus checkpoint I/O."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .detection import RecognitionHead
from .formats import format_config, read_config
from .network import Backbone, NetworkPreset, get_preset
from .tensor_io import atomic_write, load_checkpoint, save_checkpoint
from .tpn import TPNHead

CONFIG_FILE = "model.cfg"
PARTS = ("tpn_backbone", "recog_backbone", "tpn", "recog")


class TCNN:
    """Two networks sharing a backbone architecture.

    ``tpn_backbone`` + ``tpn`` form the proposal network and
    ``recog_backbone`` + ``recog`` the recognition network.  Alternating
    training copies the backbone weights between the two.
    """

    def __init__(self, preset: NetworkPreset, anchors: np.ndarray, num_classes: int,
                 skip_source: str | None = "conv2", seed: int = 0):
        from .synth import substream

        self.preset = preset
        self.anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 2)
        self.num_classes = int(num_classes)
        self.skip_source = skip_source
        self.tpn_backbone = Backbone(preset, substream(seed, "init-backbone"))
        self.recog_backbone = Backbone(preset, substream(seed, "init-backbone"))
        self.tpn = TPNHead(preset, len(self.anchors), skip_source, substream(seed, "init-tpn"))
        self.recog = RecognitionHead(preset, num_classes, substream(seed, "init-recog"))

    def parts(self) -> dict:
        return {"tpn_backbone": self.tpn_backbone, "recog_backbone": self.recog_backbone,
                "tpn": self.tpn, "recog": self.recog}

    def params(self) -> dict:
        """Flat ``part.layer.param`` -> array view of every trainable tensor."""
        return {f"{p}.{k}": v for p, obj in self.parts().items() for k, v in obj.params().items()}

    def backbones_equal(self) -> bool:
        a, b = self.tpn_backbone.params(), self.recog_backbone.params()
        return all(np.array_equal(a[k], b[k]) for k in a)

    def copy_backbone(self, src: str, dst: str) -> None:
        s, d = getattr(self, src).params(), getattr(self, dst).params()
        for k in s:
            d[k][...] = s[k]

    def config(self) -> dict:
        return {"preset": self.preset.name, "num_classes": self.num_classes,
                "skip_source": self.skip_source or "none",
                "num_anchors": len(self.anchors)}

    def save(self, directory) -> None:
        directory = Path(directory)
        tensors = dict(self.params())
        tensors["anchors"] = self.anchors
        save_checkpoint(directory, tensors)
        atomic_write(directory / CONFIG_FILE, format_config(self.config()))

    @classmethod
    def load(cls, directory) -> "TCNN":
        directory = Path(directory)
        cfg = read_config(directory / CONFIG_FILE)
        tensors = load_checkpoint(directory)
        skip = None if cfg["skip_source"] == "none" else cfg["skip_source"]
        model = cls(get_preset(cfg["preset"]), tensors.pop("anchors"), int(cfg["num_classes"]), skip)
        params = model.params()
        missing = set(params) ^ set(tensors)
        if missing:
            raise ValueError(f"checkpoint does not match the model: {sorted(missing)}")
        for k, arr in tensors.items():
            if params[k].shape != arr.shape:
                raise ValueError(f"{k}: checkpoint shape {arr.shape} != model shape {params[k].shape}")
            params[k][...] = arr
        return model
