"""Image-stack ingestion and export.

On-disk layout::

    <root>/images/NNNN.<ext>   one 8-bit grayscale raster per z-slice
    <root>/masks/NNNN.<ext>    optional, 0 = background, 255 = mitochondrion
    <root>/stack.meta          key=value lines: height, width, depth, voxel_size_nm
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

IMAGE_EXTS = (".png", ".tif", ".tiff", ".bmp", ".pgm")


class StackError(ValueError):
    pass


@dataclass(frozen=True)
class StackLayout:
    images: str = "images"
    masks: str = "masks"
    meta: str = "stack.meta"


@dataclass(frozen=True)
class VolumeStack:
    """Z-ordered grayscale slices in [0, 1] with optional binary labels.

    Arrays are made read-only so a loaded stack can be shared freely.
    """

    images: np.ndarray
    labels: np.ndarray | None = None
    voxel_size_nm: tuple[float, float, float] | None = None
    names: tuple[str, ...] | None = None

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float32)
        if images.ndim != 3:
            raise StackError(f"images must be (Z, H, W), got shape {images.shape}")
        images.flags.writeable = False
        object.__setattr__(self, "images", images)
        if self.labels is not None:
            labels = np.asarray(self.labels)
            if labels.shape != images.shape:
                raise StackError(f"labels shape {labels.shape} != images shape {images.shape}")
            if not np.isin(labels, (0, 1)).all():
                raise StackError("labels must contain only 0 and 1")
            labels = labels.astype(np.uint8)
            labels.flags.writeable = False
            object.__setattr__(self, "labels", labels)
        if self.names is None:
            object.__setattr__(self, "names", tuple(f"{z:04d}" for z in range(images.shape[0])))
        elif len(self.names) != images.shape[0]:
            raise StackError(f"{len(self.names)} slice names for {images.shape[0]} slices")

    @property
    def depth(self) -> int:
        return self.images.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.images.shape

    @property
    def has_labels(self) -> bool:
        return self.labels is not None


def _numbered_files(folder: Path) -> list[Path]:
    files = [p for p in folder.iterdir() if p.suffix.lower() in IMAGE_EXTS]
    numbered = []
    for p in files:
        m = re.search(r"(\d+)$", p.stem)
        if m is None:
            raise StackError(f"{p}: file name has no z-index number")
        numbered.append((int(m.group(1)), p))
    numbered.sort()
    return [p for _, p in numbered]


def read_raster(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im)


def read_meta(path: Path) -> dict[str, str]:
    meta = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise StackError(f"{path}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        meta[k.strip()] = v.strip()
    return meta


def write_meta(path: Path, depth: int, height: int, width: int,
               voxel_size_nm: tuple[float, float, float] | None = None, **extra) -> None:
    lines = [f"height={height}", f"width={width}", f"depth={depth}"]
    if voxel_size_nm is not None:
        lines.append("voxel_size_nm=" + ",".join(f"{v:g}" for v in voxel_size_nm))
    lines += [f"{k}={v}" for k, v in extra.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def load_stack(root: str | Path, layout: StackLayout = StackLayout(), require_masks: bool = False) -> VolumeStack:
    """Read a stack directory; z-order follows the numeric file-name suffix."""
    root = Path(root)
    img_dir = root / layout.images
    if not img_dir.is_dir():
        raise StackError(f"{root}: missing '{layout.images}/' directory")
    files = _numbered_files(img_dir)
    if not files:
        raise StackError(f"{img_dir}: no image files")

    slices, shape = [], None
    for f in files:
        arr = read_raster(f)
        if arr.ndim != 2 or arr.dtype != np.uint8:
            raise StackError(f"{f}: expected 8-bit single-channel raster, got {arr.dtype} shape {arr.shape}")
        if shape is None:
            shape = arr.shape
        elif arr.shape != shape:
            raise StackError(f"{f}: size {arr.shape[1]}x{arr.shape[0]} differs from first slice {shape[1]}x{shape[0]}")
        slices.append(arr)
    images = np.stack(slices).astype(np.float32) / 255.0

    labels = None
    mask_dir = root / layout.masks
    if mask_dir.is_dir():
        by_stem = {p.stem: p for p in _numbered_files(mask_dir)}
        masks = []
        for f in files:
            mf = by_stem.get(f.stem)
            if mf is None:
                raise StackError(f"{mask_dir}: missing mask for slice {f.name}")
            m = read_raster(mf)
            if m.shape != shape:
                raise StackError(f"{mf}: mask size {m.shape} differs from image size {shape}")
            bad = ~np.isin(m, (0, 255))
            if bad.any():
                raise StackError(f"{mf}: mask values must be 0 or 255, found {int(m[bad][0])}")
            masks.append(m == 255)
        labels = np.stack(masks).astype(np.uint8)
    elif require_masks:
        raise StackError(f"{root}: missing '{layout.masks}/' directory (labels required)")

    voxel = None
    meta_path = root / layout.meta
    if meta_path.exists():
        meta = read_meta(meta_path)
        expect = {"depth": len(files), "height": shape[0], "width": shape[1]}
        for key, val in expect.items():
            if key in meta and int(meta[key]) != val:
                raise StackError(f"{meta_path}: {key}={meta[key]} but files give {val}")
        if "voxel_size_nm" in meta:
            voxel = tuple(float(v) for v in meta["voxel_size_nm"].split(","))
    return VolumeStack(images, labels, voxel, tuple(f.stem for f in files))


def to_uint8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(values, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_stack(root: str | Path, stack: VolumeStack, ext: str = ".png", layout: StackLayout = StackLayout()) -> Path:
    root = Path(root)
    (root / layout.images).mkdir(parents=True, exist_ok=True)
    for name, img in zip(stack.names, stack.images):
        Image.fromarray(to_uint8(img)).save(root / layout.images / f"{name}{ext}")
    if stack.labels is not None:
        (root / layout.masks).mkdir(parents=True, exist_ok=True)
        for name, lab in zip(stack.names, stack.labels):
            Image.fromarray((lab * 255).astype(np.uint8)).save(root / layout.masks / f"{name}{ext}")
    z, h, w = stack.shape
    write_meta(root / layout.meta, z, h, w, stack.voxel_size_nm)
    return root
