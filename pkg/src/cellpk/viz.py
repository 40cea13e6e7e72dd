"""Per-filter activation heatmaps and overlays.

The colormap is a fixed 256-entry linear ramp from blue to red: entry ``k`` is
``(k, 0, 255 - k)``. Heatmap values in [0, 1] index it via ``floor(v * 255 + 0.5)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imgio import check_patch, quantize, resize, to_float
from .nn.graph import ModelGraph, forward_all

__all__ = ["Heatmap", "COLORMAP", "activation_heatmap", "colorize", "overlay"]

COLORMAP = np.stack([np.arange(256), np.zeros(256, dtype=int), 255 - np.arange(256)], axis=1).astype(np.uint8)


@dataclass
class Heatmap:
    values: np.ndarray
    layer: str
    filter_index: int

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    def to_gray(self) -> np.ndarray:
        return quantize(self.values)


def _normalize(act: np.ndarray) -> np.ndarray:
    lo, hi = act.min(), act.max()
    if hi == lo:
        return np.zeros_like(act, dtype=np.float64)
    return (act.astype(np.float64) - lo) / (float(hi) - float(lo))


def activation_heatmap(graph: ModelGraph, probe: np.ndarray, layer: str, filter_index: int) -> Heatmap:
    """Min-max normalised activation of one conv filter, upsampled to the probe size.

    The probe is resized to the graph's input resolution before the eval-mode
    forward pass.
    """
    probe = check_patch(probe)
    if layer not in graph.nodes:
        raise KeyError(f"unknown layer {layer!r}; conv layers are {graph.conv_layers()}")
    node = graph.nodes[layer]
    if node.kind != "conv2d":
        raise ValueError(f"layer {layer!r} is {node.kind}, not a convolution")
    n_filters = graph.shapes[layer][0]
    if not 0 <= filter_index < n_filters:
        raise IndexError(f"filter index {filter_index} out of range for {layer!r} with {n_filters} filters")
    _, h, w = graph.input_shape
    x = resize(to_float(probe), w, h).transpose(2, 0, 1)[None]
    act = forward_all(graph, x.astype(graph.dtype), "eval")[layer][0, filter_index]
    norm = _normalize(act)
    ph, pw = probe.shape[:2]
    up = resize(norm, pw, ph, method="bilinear")
    return Heatmap(up, layer, filter_index)


def colorize(values: np.ndarray) -> np.ndarray:
    return COLORMAP[quantize(values)]


def overlay(heatmap: Heatmap | np.ndarray, probe: np.ndarray, alpha: float = 0.4) -> np.ndarray:
    """Blend ``alpha * colormap(heatmap) + (1 - alpha) * probe`` and quantise."""
    probe = check_patch(probe)
    values = heatmap.values if isinstance(heatmap, Heatmap) else np.asarray(heatmap, dtype=np.float64)
    if values.shape != probe.shape[:2]:
        raise ValueError(f"heatmap {values.shape} and probe {probe.shape[:2]} differ in size")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if alpha == 0.0:
        return probe.copy()
    colored = colorize(values).astype(np.float64)
    if alpha == 1.0:
        return colored.astype(np.uint8)
    blend = alpha * colored + (1.0 - alpha) * probe.astype(np.float64)
    return np.clip(np.floor(blend + 0.5), 0, 255).astype(np.uint8)
