"""
heatmap.py — Green-to-red PPM heatmaps of flow tensors and weight maps.

Colour ramp over [min, max] of the rendered array:
    f = (v − min) / (max − min),  r = rint(255·f),  g = 255 − r,  b = 0
so min is pure green, max pure red and a constant array renders all green.
Pixel row y is grid row i.
"""
import logging
import os
from typing import Literal

import numpy as np
from PIL import Image

from flowgrid import INFLOW, OUTFLOW

logger = logging.getLogger(__name__)

Channel = Literal["in", "out"]


def ramp(values: np.ndarray) -> np.ndarray:
    """H×W values → H×W×3 uint8 colours."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    f = np.zeros_like(v) if hi <= lo else (v - lo) / (hi - lo)
    r = np.rint(255.0 * f).astype(np.uint8)
    rgb = np.zeros(v.shape + (3,), dtype=np.uint8)
    rgb[..., 0] = r
    rgb[..., 1] = 255 - r
    return rgb


def select_channel(tensor: np.ndarray, channel: Channel = "in") -> np.ndarray:
    arr = np.asarray(tensor)
    if arr.ndim == 2:
        return arr
    if arr.ndim != 3 or arr.shape[0] != 2:
        raise ValueError(f"expected a 2×I×J flow tensor or an I×J map, got shape {arr.shape}")
    if channel not in ("in", "out"):
        raise ValueError(f"channel must be 'in' or 'out', got {channel!r}")
    return arr[INFLOW if channel == "in" else OUTFLOW]


def render(tensor: np.ndarray, channel: Channel = "in", scale: int = 1) -> Image.Image:
    if scale < 1:
        raise ValueError(f"scale must be >= 1, got {scale}")
    rgb = ramp(select_channel(tensor, channel))
    if scale > 1:
        rgb = rgb.repeat(scale, axis=0).repeat(scale, axis=1)
    return Image.fromarray(rgb)


def heatmap_export(tensor: np.ndarray, channel: Channel, path: str, scale: int = 1) -> str:
    """Write a binary PPM (P6) heatmap of one channel (or a 2-D map)."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    render(tensor, channel, scale).save(path, format="PPM")
    logger.debug("Heatmap written: %s", path)
    return path


def export_weight_maps(maps: dict[str, np.ndarray], out_dir: str, scale: int = 1) -> dict[str, str]:
    """One PPM per fusion component, named fusion_<component>.ppm."""
    return {
        label: heatmap_export(w, "in", os.path.join(out_dir, f"fusion_{label}.ppm"), scale)
        for label, w in maps.items()
    }
