"""Checkpoint files.

Layout::

    b"MITOSEG\\0"                  8-byte magic
    uint32 little-endian           header length in bytes
    header                         UTF-8 JSON: format_version, config, seed,
                                   tensors [{name, shape, dtype, offset, nbytes}],
                                   train (step, rng state, adam hyperparameters) or null
    payload                        raw little-endian arrays at the listed offsets

Everything is validated before any model object is built, so a bad file
never yields a partially loaded model.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from ..tensor_core import AdamState
from .config import ConfigError, UNetConfig
from .model import UNetModel, build

MAGIC = b"MITOSEG\x00"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _entries(model: UNetModel, trainer=None) -> list[tuple[str, np.ndarray]]:
    items = [(name, p.data) for name, p in model.named_params()]
    if trainer is not None:
        for name, _ in model.named_params():
            st = trainer.optim[name]
            items.append((f"adam.m.{name}", st.m))
            items.append((f"adam.v.{name}", st.v))
        items.append(("train.losses", np.asarray(trainer.losses, dtype=np.float64)))
    return items


def save(path: str | Path, model: UNetModel, trainer=None) -> Path:
    path = Path(path)
    entries = _entries(model, trainer)
    tensors, offset = [], 0
    blobs = []
    for name, arr in entries:
        le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        blob = le.tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str,
                        "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    train = None
    if trainer is not None:
        first = next(iter(trainer.optim.values()))
        train = {
            "step": trainer.step,
            "adam_steps": {name: st.step for name, st in trainer.optim.items()},
            "lr": first.lr, "beta1": first.beta1, "beta2": first.beta2, "eps": first.eps,
            "rng": trainer.rng.bit_generator.state,
            "spec": vars(trainer.spec),
        }
    header = {
        "format_version": FORMAT_VERSION,
        "model": "unet2d",
        "config": model.config.to_dict(),
        "seed": model.seed,
        "payload_bytes": offset,
        "tensors": tensors,
        "train": train,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)
    return path


def _read(path: Path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<I", raw[8:12])
    if len(raw) < 12 + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12:12 + hlen])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    version = header.get("format_version")
    if version != FORMAT_VERSION or header.get("model") != "unet2d":
        raise CheckpointError(
            f"{path}: unsupported checkpoint (model {header.get('model')!r}, format version {version}); "
            f"this build reads unet2d version {FORMAT_VERSION}"
        )
    payload = memoryview(raw)[12 + hlen:]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, header declares {header['payload_bytes']} (truncated?)")
    arrays = {}
    for t in header["tensors"]:
        dt = np.dtype(t["dtype"])
        count = int(np.prod(t["shape"], dtype=np.int64))
        if count * dt.itemsize != t["nbytes"] or t["offset"] + t["nbytes"] > len(payload):
            raise CheckpointError(f"{path}: tensor {t['name']} extent does not match its shape {t['shape']}")
        arr = np.frombuffer(payload, dtype=dt, count=count, offset=t["offset"]).reshape(t["shape"])
        arrays[t["name"]] = arr.astype(dt.newbyteorder("="))
    return header, arrays


def _restore_model(path, header, arrays) -> UNetModel:
    try:
        config = UNetConfig.from_dict(header["config"])
    except (ConfigError, TypeError) as exc:
        raise CheckpointError(f"{path}: bad model config ({exc})") from None
    model = build(config, seed=header.get("seed", 0))
    for name, p in model.named_params():
        if name not in arrays:
            raise CheckpointError(f"{path}: missing tensor {name}")
        if arrays[name].shape != p.shape:
            raise CheckpointError(f"{path}: tensor {name} has shape {arrays[name].shape}, model expects {p.shape}")
        p.data = arrays[name]
    return model


def load(path: str | Path) -> UNetModel:
    """Load model parameters only."""
    header, arrays = _read(Path(path))
    return _restore_model(path, header, arrays)


def load_trainer(path: str | Path, spec=None):
    """Load model, optimizer moments, step counter and RNG state for resuming.

    ``spec`` overrides the stored training spec (e.g. to extend ``steps``).
    """
    from .train import Trainer, TrainSpec

    header, arrays = _read(Path(path))
    model = _restore_model(path, header, arrays)
    train = header.get("train")
    if train is None:
        raise CheckpointError(f"{path}: holds no training state")
    spec = spec or TrainSpec(**train["spec"])
    rng = np.random.default_rng()
    rng.bit_generator.state = train["rng"]
    optim = {}
    for name, p in model.named_params():
        try:
            m, v = arrays[f"adam.m.{name}"], arrays[f"adam.v.{name}"]
        except KeyError:
            raise CheckpointError(f"{path}: missing optimizer state for {name}") from None
        optim[name] = AdamState(m, v, train["adam_steps"][name], spec.lr, spec.beta1, spec.beta2, spec.eps)
    losses = arrays.get("train.losses", np.zeros(0)).tolist()
    return Trainer(model, spec, step=train["step"], rng=rng, optim=optim, losses=losses)
