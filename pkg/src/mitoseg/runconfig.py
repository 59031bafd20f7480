"""Flat ``key = value`` run configuration shared by the command-line tools.

One file holds model, optimizer and augmentation settings; ``--set key=value``
overrides apply on top. Unknown keys are rejected by name.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .data_pipeline import AugmentSpec
from .unet_model import ConfigError, TrainSpec, UNetConfig


@dataclass(frozen=True)
class RunConfig:
    # model
    filters: tuple[int, ...] = (16, 32, 64, 128, 256)
    input_size: int = 512
    dropout: float = 0.2
    # optimization
    batch_size: int = 4
    steps: int = 100_000
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    checkpoint_every: int = 0
    seed: int = 0
    # augmentation
    min_coverage: float = 0.6
    flip_prob: float = 0.5
    max_tries: int = 1000

    def model_config(self) -> UNetConfig:
        return UNetConfig(filters=self.filters, input_size=self.input_size, dropout=self.dropout)

    def train_spec(self) -> TrainSpec:
        return TrainSpec(batch_size=self.batch_size, steps=self.steps, lr=self.lr, beta1=self.beta1,
                         beta2=self.beta2, eps=self.eps, checkpoint_every=self.checkpoint_every, seed=self.seed)

    def augment_spec(self) -> AugmentSpec:
        return AugmentSpec(min_coverage=self.min_coverage, flip_prob=self.flip_prob,
                           output_size=self.input_size, max_tries=self.max_tries)

    def validate(self) -> "RunConfig":
        try:
            self.model_config()
            self.train_spec()
            self.augment_spec()
        except ValueError as exc:  # TrainSpec / AugmentSpec raise plain ValueError
            raise ConfigError(str(exc)) from None
        return self

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            text = ",".join(map(str, v)) if isinstance(v, tuple) else repr(v)
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    kind = _TYPES[key]
    raw = raw.strip()
    try:
        if kind == "tuple[int, ...]":
            return tuple(int(x) for x in raw.replace("[", "").replace("]", "").split(",") if x.strip())
        if kind == "int":
            return int(raw)
        return float(raw)
    except ValueError:
        raise ConfigError(f"config key '{key}': cannot parse {raw!r} as {kind}") from None


def parse_pairs(pairs, source: str = "override") -> dict:
    out = {}
    for lineno, line in pairs:
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"unknown config key '{key}' ({source}:{lineno})")
        out[key] = _coerce(key, raw)
    return out


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    values = {}
    if path is not None:
        text = Path(path).read_text()
        values.update(parse_pairs(enumerate(text.splitlines(), start=1), str(path)))
    values.update(parse_pairs(((i, s) for i, s in enumerate(overrides or [], start=1)), "--set"))
    return replace(RunConfig(), **values).validate()
