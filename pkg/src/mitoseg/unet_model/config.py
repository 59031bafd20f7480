from __future__ import annotations

from dataclasses import asdict, dataclass

# Encoder budget of the slimmed network; the default filter plan hits it exactly.
ENCODER_PARAMS = 1_178_480
# Decoder figure quoted for the reference network. The symmetric layout built
# here has 783,857; the gap is reported by ``inspect``, never asserted.
REFERENCE_DECODER_PARAMS = 780_053

DEFAULT_FILTERS = (16, 32, 64, 128, 256)
LEVELS = 5


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class UNetConfig:
    filters: tuple[int, ...] = DEFAULT_FILTERS
    input_size: int = 512
    dropout: float = 0.2
    in_channels: int = 1
    out_channels: int = 1

    def __post_init__(self):
        filters = tuple(int(f) for f in self.filters)
        object.__setattr__(self, "filters", filters)
        if len(filters) != LEVELS:
            raise ConfigError(f"filter plan needs {LEVELS} levels, got {len(filters)}: {list(filters)}")
        if filters[0] < 1:
            raise ConfigError(f"first filter width must be >= 1, got {filters[0]}")
        for i in range(1, LEVELS):
            if filters[i] != 2 * filters[i - 1]:
                raise ConfigError(
                    f"filter plan must double at every level: level {i + 1} has {filters[i]}, "
                    f"expected {2 * filters[i - 1]} (plan {list(filters)})"
                )
        if self.input_size < 16 or self.input_size % 16:
            raise ConfigError(f"input size must be a positive multiple of 16 (four 2x pools), got {self.input_size}")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.in_channels != 1 or self.out_channels != 1:
            raise ConfigError("only single-channel grayscale input and a single logit output are supported")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["filters"] = list(self.filters)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        known = {"filters", "input_size", "dropout", "in_channels", "out_channels"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config key(s): {sorted(unknown)}")
        return cls(**{k: (tuple(v) if k == "filters" else v) for k, v in d.items()})
