"""Tube-based action detection on clips of video: tube proposals, linking and recognition."""

from .model import TCNN
from .network import PRESETS, get_preset

__version__ = "0.1.0"

__all__ = ["TCNN", "PRESETS", "get_preset", "__version__"]
