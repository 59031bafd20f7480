"""Inference throughput benchmark.

The timer wraps tensor work only: tiling, forward passes, sigmoid, stitching
and (optionally) the z-filter. The stack is in memory before the clock starts
and nothing is written while it runs.
"""

from __future__ import annotations

import json
import os
import platform
import statistics
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .unet_model import UNetModel, predict_slice, predict_volume, tile_grid
from .zfilter import ZFilterSpec, zfilter

REALTIME_MPS = 11.0  # single-beam microscope acquisition rate
TIMER_BOUNDARY = "in-memory stack -> probabilities: tiling, forward, sigmoid, stitching{z}; no disk I/O"


@dataclass(frozen=True)
class BenchReport:
    slice_seconds_mean: float  # one model-sized tile
    slice_seconds_std: float
    stack_seconds_mean: float
    stack_seconds_std: float
    stack_shape: tuple[int, int, int]
    tiles_per_stack: int
    throughput_mps: float
    runs: int
    warmup: int
    workers: int
    hardware: str
    timer_boundary: str

    @property
    def pixels(self) -> int:
        z, h, w = self.stack_shape
        return z * h * w

    @property
    def consistency(self) -> float:
        """Full-stack time over (per-tile time x tile count); 1.0 means no overhead beyond the tiles."""
        return self.stack_seconds_mean / (self.slice_seconds_mean * self.tiles_per_stack)

    @property
    def realtime(self) -> bool:
        return self.throughput_mps >= REALTIME_MPS

    def verdict(self) -> str:
        status = "PASS" if self.realtime else "FAIL"
        return (f"real-time reference {REALTIME_MPS:g} MP/s: {status} "
                f"({self.throughput_mps:.3f} MP/s on this machine; informational)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stack_shape"] = list(self.stack_shape)
        d.update(pixels=self.pixels, consistency=self.consistency, realtime_reference_mps=REALTIME_MPS,
                 realtime=self.realtime)
        return d

    def to_text(self) -> str:
        z, h, w = self.stack_shape
        lines = [
            f"slice_seconds={self.slice_seconds_mean:.6f} +/- {self.slice_seconds_std:.6f}",
            f"stack_seconds={self.stack_seconds_mean:.6f} +/- {self.stack_seconds_std:.6f}",
            f"stack_shape={z}x{h}x{w}",
            f"pixels={self.pixels}",
            f"tiles_per_stack={self.tiles_per_stack}",
            f"throughput_mps={self.throughput_mps:.6f}",
            f"consistency={self.consistency:.4f}",
            f"runs={self.runs}",
            f"warmup={self.warmup}",
            f"workers={self.workers}",
            f"hardware={self.hardware}",
            f"timer_boundary={self.timer_boundary}",
            self.verdict(),
        ]
        return "\n".join(lines) + "\n"

    def write(self, stem: str | Path) -> tuple[Path, Path]:
        stem = Path(stem)
        txt, js = stem.with_suffix(".txt"), stem.with_suffix(".json")
        txt.write_text(self.to_text())
        js.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return txt, js


def hardware_string() -> str:
    cpu = platform.processor() or platform.machine()
    return f"{cpu}; {os.cpu_count()} logical CPUs; {platform.system()} {platform.release()}; numpy {np.__version__}"


def _timed(fn, runs: int, warmup: int) -> list[float]:
    for _ in range(warmup):
        fn()
    out = []
    for _ in range(runs):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return out


def run_bench(model: UNetModel, stack: np.ndarray, runs: int = 3, warmup: int = 1, workers: int = 1,
              batch_size: int = 1, zfilter_depth: int | None = None) -> BenchReport:
    """Time a model-sized tile and the whole (Z, H, W) stack, each over ``runs`` timed repeats."""
    if runs < 3:
        raise ValueError(f"benchmark needs at least 3 timed runs, got {runs}")
    if warmup < 1:
        raise ValueError(f"benchmark needs at least 1 warmup run, got {warmup}")
    stack = np.ascontiguousarray(stack, dtype=np.float32)
    if stack.ndim != 3 or stack.shape[0] == 0:
        raise ValueError(f"benchmark stack must be a non-empty (Z, H, W) array, got shape {stack.shape}")
    s = model.config.input_size
    z, h, w = stack.shape
    tile = np.ascontiguousarray(stack[0, :s, :s]) if h >= s and w >= s else stack[0]
    zspec = ZFilterSpec(depth=zfilter_depth) if zfilter_depth else None

    def one_tile():
        predict_slice(model, tile)

    def full_stack():
        pv = predict_volume(model, stack, batch_size=batch_size, workers=workers)
        if zspec is not None:
            zfilter(pv, zspec)

    slice_t = _timed(one_tile, runs, warmup)
    stack_t = _timed(full_stack, runs, warmup)
    mean_stack = statistics.fmean(stack_t)
    n_tiles = z * len(tile_grid(max(h, s), max(w, s), s))
    return BenchReport(
        slice_seconds_mean=statistics.fmean(slice_t), slice_seconds_std=statistics.stdev(slice_t),
        stack_seconds_mean=mean_stack, stack_seconds_std=statistics.stdev(stack_t),
        stack_shape=(z, h, w), tiles_per_stack=n_tiles, throughput_mps=z * h * w / mean_stack / 1e6,
        runs=runs, warmup=warmup, workers=workers, hardware=hardware_string(),
        timer_boundary=TIMER_BOUNDARY.format(z=f", z-filter d={zfilter_depth}" if zspec else ""),
    )
