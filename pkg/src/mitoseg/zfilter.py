"""Median filtering along z to drop detections that do not persist across sections.

Every output voxel is the median of the ``depth`` voxels centered on it in its
own (row, col) column; out-of-range z indices are clamped to the first/last
slice. There is no lateral mixing, so the volume can be split into tiles or
streamed slice by slice.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

# lateral rows filtered per chunk; bounds the (depth x chunk) working set
_ROW_CHUNK = 64


@dataclass(frozen=True)
class ZFilterSpec:
    depth: int = 15
    binary: bool = True  # threshold first, then filter the 0/1 masks
    threshold: float = 0.5

    def __post_init__(self):
        _check_depth(self.depth)


def _check_depth(depth: int) -> None:
    if depth < 1 or depth % 2 == 0:
        raise ValueError(f"z-filter depth must be an odd positive integer, got {depth}")


def _window_median(window: np.ndarray) -> np.ndarray:
    # odd window: partition puts the exact middle element in place (no averaging)
    mid = window.shape[0] // 2
    return np.partition(window, mid, axis=0)[mid]


def zmedian(volume: np.ndarray, depth: int) -> np.ndarray:
    """Whole-volume z-median with edge replication."""
    _check_depth(depth)
    vol = np.asarray(volume)
    if vol.ndim != 3 or vol.shape[0] == 0:
        raise ValueError(f"expected a non-empty (Z, H, W) volume, got shape {vol.shape}")
    if depth == 1:
        return vol.copy()
    r = depth // 2
    z = vol.shape[0]
    idx = np.clip(np.arange(-r, z + r), 0, z - 1)
    out = np.empty_like(vol)
    windows = np.arange(depth)[:, None] + np.arange(z)[None, :]  # (depth, z) into idx
    for y0 in range(0, vol.shape[1], _ROW_CHUNK):
        block = vol[idx, y0:y0 + _ROW_CHUNK]  # (z + 2r, rows, W)
        out[:, y0:y0 + _ROW_CHUNK] = _window_median(block[windows])
    return out


def zfilter(volume, spec: ZFilterSpec = ZFilterSpec()):
    """Apply the z-median to a probability volume.

    With ``spec.binary`` (default) the volume is thresholded first and the
    result is a uint8 mask; otherwise raw probabilities are filtered.
    Accepts an ndarray or anything with a ``probs`` attribute.
    """
    probs = getattr(volume, "probs", volume)
    vol = np.asarray(probs)
    if spec.binary:
        vol = (vol >= spec.threshold).astype(np.uint8)
    return zmedian(vol, spec.depth)


class ZStreamFilter:
    """Rolling-window z-median: push slices in z order, receive filtered slices.

    Holds at most ``depth`` slices. The output for slice k is emitted as soon
    as slice k + depth//2 has arrived; :meth:`finish` flushes the tail.
    """

    def __init__(self, depth: int):
        _check_depth(depth)
        self.radius = depth // 2
        self._buf: deque[np.ndarray] = deque(maxlen=depth)
        self._newest = -1
        self._next = 0

    def _emit(self) -> np.ndarray:
        k = self._next
        first = self._newest - len(self._buf) + 1
        picks = [self._buf[min(max(k + t, 0), self._newest) - first] for t in range(-self.radius, self.radius + 1)]
        self._next += 1
        return _window_median(np.stack(picks))

    def push(self, sl: np.ndarray) -> list[np.ndarray]:
        self._buf.append(np.asarray(sl))
        self._newest += 1
        out = []
        while self._next + self.radius <= self._newest:
            out.append(self._emit())
        return out

    def finish(self) -> list[np.ndarray]:
        out = []
        while self._next <= self._newest:
            out.append(self._emit())
        return out


def zfilter_stream(slices: Iterable[np.ndarray], depth: int) -> Iterator[np.ndarray]:
    f = ZStreamFilter(depth)
    for sl in slices:
        yield from f.push(sl)
    yield from f.finish()
