"""Desk-scale stand-in for labelled EM stacks: dark ellipses on a textured background."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .stack import VolumeStack


@dataclass(frozen=True)
class Ellipse:
    """A blob: center (row, col), semi-axes in pixels, orientation, and the z-range it occupies."""

    cy: float
    cx: float
    ry: float
    rx: float
    angle: float = 0.0
    z0: int = 0
    z1: int | None = None  # exclusive; None = through the last slice


@dataclass(frozen=True)
class BlobSpec:
    count: int = 20
    radius: tuple[float, float] = (14.0, 36.0)
    aspect: tuple[float, float] = (0.45, 1.0)
    z_extent: tuple[int, int] = (3, 9)  # consecutive slices each blob persists
    contrast: float = 0.35
    noise: float = 0.05


def ellipse_support(h: int, w: int, e: Ellipse, scale: float = 1.0) -> np.ndarray:
    """Boolean mask of pixel centers inside the (optionally scaled) ellipse."""
    ry, rx = e.ry * scale, e.rx * scale
    if ry <= 0 or rx <= 0:
        return np.zeros((h, w), dtype=bool)
    ca, sa = math.cos(e.angle), math.sin(e.angle)
    r = math.ceil(max(ry, rx)) + 1
    y0, y1 = max(0, math.floor(e.cy) - r), min(h, math.ceil(e.cy) + r + 1)
    x0, x1 = max(0, math.floor(e.cx) - r), min(w, math.ceil(e.cx) + r + 1)
    out = np.zeros((h, w), dtype=bool)
    if y0 >= y1 or x0 >= x1:
        return out
    yy, xx = np.mgrid[y0:y1, x0:x1]
    dy, dx = yy - e.cy, xx - e.cx
    u = dx * ca + dy * sa
    v = -dx * sa + dy * ca
    out[y0:y1, x0:x1] = (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
    return out


def _z_scale(z: int, e: Ellipse, depth: int) -> float:
    # blobs swell and shrink across their z-range like a cut through an ellipsoid
    z1 = depth if e.z1 is None else e.z1
    if not e.z0 <= z < z1:
        return 0.0
    n = z1 - e.z0
    if n <= 2:
        return 1.0
    t = (z - e.z0 + 0.5) / n * 2 - 1
    return 0.75 + 0.25 * math.sqrt(max(0.0, 1 - t * t))


def random_ellipses(depth: int, h: int, w: int, blobs: BlobSpec, rng: np.random.Generator) -> list[Ellipse]:
    out = []
    for _ in range(blobs.count):
        r = min(rng.uniform(*blobs.radius), 0.5 * min(h, w))
        ry, rx = r, r * rng.uniform(*blobs.aspect)
        length = int(rng.integers(blobs.z_extent[0], blobs.z_extent[1] + 1))
        length = min(length, depth)
        z0 = int(rng.integers(0, depth - length + 1))
        out.append(Ellipse(
            cy=rng.uniform(r, h - r), cx=rng.uniform(r, w - r), ry=ry, rx=rx,
            angle=rng.uniform(0, math.pi), z0=z0, z1=z0 + length,
        ))
    return out


def _texture(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    coarse = gaussian_filter(rng.standard_normal((h, w)), 6.0)
    fine = gaussian_filter(rng.standard_normal((h, w)), 1.2)
    tex = 0.62 + 0.9 * coarse + 0.25 * fine
    # thin dark membranes: thresholded band of a smooth field
    field = gaussian_filter(rng.standard_normal((h, w)), 10.0)
    field /= field.std() + 1e-12
    tex -= 0.18 * (np.abs(field) < 0.06)
    return tex


def make_synthetic_fixture(n_slices: int = 16, size: tuple[int, int] = (512, 512),
                           blobs: BlobSpec | int | list[Ellipse] = BlobSpec(), seed: int = 0) -> VolumeStack:
    """Deterministic labelled stack; labels are exactly the rendered ellipse supports.

    ``blobs`` may be a BlobSpec, a blob count (other settings default), or an explicit
    list of :class:`Ellipse`. Every random blob spans at least three consecutive slices.
    """
    h, w = size
    rng = np.random.default_rng(seed)
    if isinstance(blobs, int):
        spec = BlobSpec(count=blobs)
        ellipses = random_ellipses(n_slices, h, w, spec, rng)
    elif isinstance(blobs, BlobSpec):
        spec = blobs
        ellipses = random_ellipses(n_slices, h, w, spec, rng)
    else:
        spec = BlobSpec()
        ellipses = list(blobs)

    images = np.empty((n_slices, h, w), dtype=np.float32)
    labels = np.zeros((n_slices, h, w), dtype=np.uint8)
    for z in range(n_slices):
        img = _texture(h, w, rng)
        for e in ellipses:
            s = _z_scale(z, e, n_slices)
            if s == 0.0:
                continue
            inside = ellipse_support(h, w, e, s)
            # dark membrane ring just inside the boundary, lighter lamellae inside
            core = ellipse_support(h, w, e, s * 0.82)
            img[inside] -= spec.contrast
            img[inside & ~core] -= 0.12
            labels[z][inside] = 1
        img += spec.noise * rng.standard_normal((h, w))
        images[z] = np.clip(img, 0.0, 1.0)
    return VolumeStack(images, labels, voxel_size_nm=(5.0, 5.0, 5.0))
