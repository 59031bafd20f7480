"""Stack I/O, augmented patch sampling and synthetic fixtures."""

from .augment import AugmentSpec, PatchInfo, PatchSampler, sample_patch
from .stack import StackError, StackLayout, VolumeStack, load_stack, read_meta, save_stack, write_meta
from .synthetic import BlobSpec, Ellipse, ellipse_support, make_synthetic_fixture

__all__ = [
    "AugmentSpec", "BlobSpec", "Ellipse", "PatchInfo", "PatchSampler", "StackError", "StackLayout",
    "VolumeStack", "ellipse_support", "load_stack", "make_synthetic_fixture", "read_meta",
    "sample_patch", "save_stack", "write_meta",
]
