"""On-the-fly training patches: rotated squares of varying size, random flips, resampled to the network size.

Coordinates: pixel (r, c) has its center at index coordinates (r, c). A patch
is a square of side ``side`` pixels centered at ``center`` (index coordinates),
rotated by ``angle``. Output pixel (i, j) samples the patch at half-pixel
centers, so an axis-aligned patch covering the whole slice at the slice's own
resolution reproduces it exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .stack import StackError, VolumeStack


@dataclass(frozen=True)
class AugmentSpec:
    min_coverage: float = 0.6
    flip_prob: float = 0.5
    output_size: int = 512
    max_tries: int = 1000

    def __post_init__(self):
        if not 0 < self.min_coverage <= 1:
            raise ValueError(f"min_coverage must be in (0, 1], got {self.min_coverage}")
        if not 0 <= self.flip_prob <= 1:
            raise ValueError(f"flip_prob must be in [0, 1], got {self.flip_prob}")
        if self.output_size < 1:
            raise ValueError("output_size must be positive")


_SLACK = 1e-9


@dataclass(frozen=True)
class PatchInfo:
    z: int
    drawn_side: float  # side length drawn from the coverage law
    side: float  # side actually used (smaller if the drawn square did not fit)
    angle: float
    center: tuple[float, float]
    flip_h: bool
    flip_v: bool


def _half_extent(side: float, angle: float, out: int) -> float:
    # outermost sample sits half an output pixel inside the square's edge
    a = 0.5 * side * (1.0 - 1.0 / out)
    return a * (abs(math.cos(angle)) + abs(math.sin(angle)))


def _fits(h: int, w: int, side: float, angle: float, out: int) -> bool:
    e = _half_extent(side, angle, out)
    return 2 * e <= h - 1 and 2 * e <= w - 1


def largest_side(h: int, w: int, angle: float, out: int) -> float:
    """Largest square side whose samples stay inside an h x w slice at this angle."""
    k = 0.5 * (1.0 - 1.0 / out) * (abs(math.cos(angle)) + abs(math.sin(angle)))
    return (min(h, w) - 1) / (2 * k)


def sample_grid(side: float, angle: float, center: tuple[float, float], out: int) -> tuple[np.ndarray, np.ndarray]:
    """Index-space (row, col) coordinates of every output pixel, each (out, out)."""
    t = ((np.arange(out) + 0.5) / out - 0.5) * side
    v, u = np.meshgrid(t, t, indexing="ij")  # v: down the patch, u: across
    ca, sa = math.cos(angle), math.sin(angle)
    rows = center[0] + u * sa + v * ca
    cols = center[1] + u * ca - v * sa
    return rows, cols


def bilinear_sample(img: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Bilinear lookup at in-bounds index coordinates (no clamping of real taps)."""
    h, w = img.shape
    r0 = np.floor(rows).astype(np.intp)
    c0 = np.floor(cols).astype(np.intp)
    fr = (rows - r0).astype(np.float32)
    fc = (cols - c0).astype(np.float32)
    # a tap exactly on the last row/col has zero weight on its far neighbour
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    top = img[r0, c0] * (1 - fc) + img[r0, c1] * fc
    bot = img[r1, c0] * (1 - fc) + img[r1, c1] * fc
    return (top * (1 - fr) + bot * fr).astype(np.float32)


def nearest_sample(img: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    r = np.floor(rows + 0.5).astype(np.intp)
    c = np.floor(cols + 0.5).astype(np.intp)
    return img[r, c]


def draw_geometry(h: int, w: int, spec: AugmentSpec, rng: np.random.Generator):
    m = min(h, w)
    drawn = rng.uniform(spec.min_coverage * m, m)
    angle = rng.uniform(0.0, 2 * math.pi)
    side = drawn
    # random draws keep a hair of slack so rounding in the sample grid can
    # never land a tap at -1e-15 (which would floor to index -1)
    slack = _SLACK * m
    e = _half_extent(side, angle, spec.output_size) + slack
    # all candidate centers in one draw; the first admissible one wins
    cand = rng.uniform(0.0, 1.0, size=(spec.max_tries, 2)) * (h, w)
    ok = np.flatnonzero((cand[:, 0] >= e) & (cand[:, 0] <= h - 1 - e) & (cand[:, 1] >= e) & (cand[:, 1] <= w - 1 - e))
    if ok.size:
        cy, cx = cand[ok[0]]
        return drawn, side, angle, (float(cy), float(cx))
    # degenerate geometry: shrink to the largest square that fits, then center it in the admissible box
    side = min(drawn, largest_side(h, w, angle, spec.output_size) * (1 - 4 * _SLACK))
    e = _half_extent(side, angle, spec.output_size)
    cy = rng.uniform(e, max(e, h - 1 - e))
    cx = rng.uniform(e, max(e, w - 1 - e))
    return drawn, side, angle, (cy, cx)


def sample_patch(stack: VolumeStack, spec: AugmentSpec, rng: np.random.Generator, *,
                 z: int | None = None, side: float | None = None, angle: float | None = None,
                 center: tuple[float, float] | None = None, flips: tuple[bool, bool] | None = None,
                 ) -> tuple[np.ndarray, np.ndarray, PatchInfo]:
    """Draw one augmented (image, mask) pair of ``spec.output_size`` squared.

    Keyword overrides pin individual random choices (used for deterministic checks).
    """
    if not stack.has_labels:
        raise StackError("patch sampling needs a labelled stack")
    _, h, w = stack.shape
    out = spec.output_size
    if z is None:
        z = int(rng.integers(stack.depth))
    if side is None and angle is None and center is None:
        drawn, side, angle, center = draw_geometry(h, w, spec, rng)
    else:
        side = float(min(h, w) if side is None else side)
        angle = 0.0 if angle is None else float(angle)
        center = ((h - 1) / 2, (w - 1) / 2) if center is None else center
        drawn = side
        if not _fits(h, w, side, angle, out):
            raise ValueError(f"patch side {side} at angle {angle} does not fit a {h}x{w} slice")
    if flips is None:
        flips = (bool(rng.random() < spec.flip_prob), bool(rng.random() < spec.flip_prob))

    rows, cols = sample_grid(side, angle, center, out)
    image = bilinear_sample(stack.images[z], rows, cols)
    mask = nearest_sample(stack.labels[z], rows, cols)
    if flips[0]:
        image, mask = image[:, ::-1], mask[:, ::-1]
    if flips[1]:
        image, mask = image[::-1], mask[::-1]
    info = PatchInfo(z, drawn, side, angle, center, flips[0], flips[1])
    return np.ascontiguousarray(image), np.ascontiguousarray(mask), info


class PatchSampler:
    """Adapter giving the trainer a ``sample(rng) -> (image, mask)`` callable."""

    def __init__(self, stack: VolumeStack, spec: AugmentSpec = AugmentSpec()):
        if not stack.has_labels:
            raise StackError("training requires a stack with masks")
        self.stack = stack
        self.spec = spec

    def sample(self, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        image, mask, _ = sample_patch(self.stack, self.spec, rng)
        return image, mask
