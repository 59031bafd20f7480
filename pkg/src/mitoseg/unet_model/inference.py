from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ..tensor_core import sigmoid
from .model import ReLU, UNetModel


@dataclass
class PredictionVolume:
    """Per-voxel foreground probabilities, (Z, H, W) float32 in [0, 1]."""

    probs: np.ndarray

    @property
    def shape(self):
        return self.probs.shape

    def threshold(self, t: float = 0.5) -> np.ndarray:
        return (self.probs >= t).astype(np.uint8)


def tile_starts(extent: int, tile: int) -> list[int]:
    """Tile origins at stride ``tile``; the last tile is anchored to the far edge."""
    if extent <= tile:
        return [0]
    starts = list(range(0, extent - tile + 1, tile))
    if starts[-1] + tile < extent:
        starts.append(extent - tile)
    return starts


def tile_grid(h: int, w: int, tile: int) -> list[tuple[int, int]]:
    return [(y, x) for y in tile_starts(h, tile) for x in tile_starts(w, tile)]


def _as_slices(stack) -> np.ndarray:
    arr = getattr(stack, "images", stack)
    arr = np.asarray(arr)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"expected a (Z, H, W) stack, got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError("cannot predict an empty stack")
    return arr


def predict_slice(model: UNetModel, image: np.ndarray, batch_size: int = 1) -> np.ndarray:
    """Probabilities for one 2D slice of any size, covered by model-sized tiles.

    Tiles are visited in row-major order and written in that order, so where
    the edge-anchored tiles overlap the later tile's values win. Slices smaller
    than a tile are zero-padded and cropped back.
    """
    s = model.config.input_size
    h, w = image.shape
    ph, pw = max(h, s), max(w, s)
    if (ph, pw) != (h, w):
        padded = np.zeros((ph, pw), dtype=np.float32)
        padded[:h, :w] = image
        image = padded
    out = np.empty((ph, pw), dtype=np.float32)
    grid = tile_grid(ph, pw, s)
    for i in range(0, len(grid), batch_size):
        chunk = grid[i:i + batch_size]
        batch = np.stack([image[y:y + s, x:x + s] for y, x in chunk])[:, None].astype(np.float32)
        probs = sigmoid(model.forward(batch, training=False))
        for (y, x), p in zip(chunk, probs):
            out[y:y + s, x:x + s] = p[0]
    return out[:h, :w]


def predict_volume(model: UNetModel, stack, batch_size: int = 1, workers: int = 1) -> PredictionVolume:
    """Predict every slice independently (no state crosses z).

    ``stack`` is a VolumeStack or a (Z, H, W) array with values in [0, 1].
    Output does not depend on ``workers`` or ``batch_size``.
    """
    slices = _as_slices(stack)
    out = np.empty(slices.shape, dtype=np.float32)

    def one(z):
        out[z] = predict_slice(model, slices[z], batch_size)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(one, range(len(slices))))
    else:
        for z in range(len(slices)):
            one(z)
    return PredictionVolume(out)


@dataclass
class UtilizationReport:
    active: int
    total: int
    per_layer: dict[str, tuple[int, int]]

    @property
    def fraction(self) -> float:
        return self.active / self.total if self.total else 0.0


def utilization(model: UNetModel, probe: np.ndarray, batch_size: int = 1) -> UtilizationReport:
    """Fraction of 3x3 conv filters whose post-ReLU output is positive somewhere on the probe set.

    ``probe`` is (N, S, S) or a stack whose slices match the model input size.
    """
    slices = _as_slices(probe)
    convs = {}
    prev = None
    for i, layer in enumerate(model.layers):
        if isinstance(layer, ReLU) and prev is not None and prev.kind == "conv" and prev.k == 3:
            convs[i] = prev
        prev = layer
    seen = {i: np.zeros(conv.n_out, dtype=bool) for i, conv in convs.items()}

    def observe(i, layer, out):
        if i in seen:
            seen[i] |= (out > 0).any(axis=(0, 2, 3))

    for k in range(0, len(slices), batch_size):
        batch = slices[k:k + batch_size][:, None].astype(np.float32)
        model.forward(batch, training=False, observer=observe)
    per_layer = {convs[i].name: (int(s.sum()), s.size) for i, s in seen.items()}
    active = sum(a for a, _ in per_layer.values())
    total = sum(n for _, n in per_layer.values())
    return UtilizationReport(active, total, per_layer)
