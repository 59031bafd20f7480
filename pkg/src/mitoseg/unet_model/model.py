"""The slimmed U-Net as an ordered layer list.

The network is a flat program: encoder levels push their last activation on a
skip stack before pooling, decoder levels pop it after upsampling. Walking the
list in reverse gives the backward pass, with the skip stack mirrored for
gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from ..tensor_core import (
    ShapeError,
    Tensor,
    bilinear_upsample2x,
    bilinear_upsample2x_backward,
    conv2d,
    conv2d_backward,
    dropout,
    dropout_backward,
    maxpool2x2,
    maxpool2x2_backward,
    relu,
    relu_backward,
)
from .config import ENCODER_PARAMS, DEFAULT_FILTERS, UNetConfig

ENCODER = "encoder"
DECODER = "decoder"


@dataclass
class _Pass:
    training: bool
    rng: np.random.Generator | None
    skips: list = field(default_factory=list)
    skip_grads: list = field(default_factory=list)


class Layer:
    kind = "layer"

    def __init__(self, name: str, scope: str):
        self.name = name
        self.scope = scope

    def params(self) -> list[Tensor]:
        return []

    def forward(self, x, ps: _Pass):
        raise NotImplementedError

    def backward(self, g, cache, ps: _Pass):
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}({self.name})"


class Conv(Layer):
    kind = "conv"

    def __init__(self, name, scope, n_in, n_out, k):
        super().__init__(name, scope)
        self.n_in, self.n_out, self.k = n_in, n_out, k
        self.padding = (k - 1) // 2
        self.weight = Tensor(np.zeros((n_out, n_in, k, k), np.float32), name=f"{name}.weight")
        self.bias = Tensor(np.zeros(n_out, np.float32), name=f"{name}.bias")

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x, ps):
        return conv2d(x, self.weight.data, self.bias.data, self.padding), x

    def backward(self, g, x, ps):
        gx, gw, gb = conv2d_backward(g, x, self.weight.data, self.padding)
        self.weight.accumulate(gw)
        self.bias.accumulate(gb)
        return gx

    def __repr__(self):
        return f"Conv({self.name}: {self.n_in}->{self.n_out}, {self.k}x{self.k})"


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, ps):
        y = relu(x)
        return y, y

    def backward(self, g, y, ps):
        return relu_backward(g, y)


class MaxPool(Layer):
    kind = "maxpool"

    def forward(self, x, ps):
        return maxpool2x2(x)

    def backward(self, g, argmax, ps):
        return maxpool2x2_backward(g, argmax)


class Upsample(Layer):
    kind = "upsample"

    def forward(self, x, ps):
        return bilinear_upsample2x(x), None

    def backward(self, g, cache, ps):
        return bilinear_upsample2x_backward(g)


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, name, scope, rate):
        super().__init__(name, scope)
        self.rate = rate

    def forward(self, x, ps):
        return dropout(x, self.rate, ps.training, ps.rng)

    def backward(self, g, mask, ps):
        return dropout_backward(g, mask)


class SaveSkip(Layer):
    kind = "skip_save"

    def forward(self, x, ps):
        ps.skips.append(x)
        return x, None

    def backward(self, g, cache, ps):
        return g + ps.skip_grads.pop()


class ConcatSkip(Layer):
    """Concatenate [upsampled, skip] along channels."""

    kind = "skip_concat"

    def forward(self, x, ps):
        skip = ps.skips.pop()
        if skip.shape[2:] != x.shape[2:]:
            raise ShapeError(f"{self.name}: skip spatial size {skip.shape[2:]} != decoder size {x.shape[2:]}")
        return np.concatenate([x, skip.astype(x.dtype, copy=False)], axis=1), x.shape[1]

    def backward(self, g, n_up, ps):
        ps.skip_grads.append(np.ascontiguousarray(g[:, n_up:]))
        return np.ascontiguousarray(g[:, :n_up])


Observer = Callable[[int, Layer, np.ndarray], None]


class UNetModel:
    def __init__(self, config: UNetConfig, layers: list[Layer], seed: int = 0):
        self.config = config
        self.layers = layers
        self.seed = seed

    # -- parameters -----------------------------------------------------
    def named_params(self) -> Iterator[tuple[str, Tensor]]:
        for layer in self.layers:
            for p in layer.params():
                yield p.name, p

    def params(self) -> list[Tensor]:
        return [p for _, p in self.named_params()]

    def param_count(self, scope: str = "total") -> int:
        if scope not in (ENCODER, DECODER, "total"):
            raise ValueError(f"scope must be encoder, decoder or total, got {scope!r}")
        return sum(
            p.size for layer in self.layers if scope == "total" or layer.scope == scope for p in layer.params()
        )

    def zero_grad(self) -> None:
        for p in self.params():
            p.grad = None

    def astype(self, dtype) -> "UNetModel":
        for p in self.params():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    @property
    def dtype(self):
        return self.layers[0].weight.data.dtype

    def conv_layers(self) -> list[Conv]:
        return [l for l in self.layers if isinstance(l, Conv)]

    # -- passes ---------------------------------------------------------
    def check_input(self, x: np.ndarray) -> None:
        s = self.config.input_size
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ShapeError(f"model input must be (batch, 1, {s}, {s}), got {x.shape}")
        if x.shape[2:] != (s, s):
            raise ShapeError(
                f"model input spatial size must be {s}x{s}, got {x.shape[2]}x{x.shape[3]}; resample or tile first"
            )

    def forward(self, x: np.ndarray, training: bool = False, rng: np.random.Generator | None = None,
                keep_tape: bool = False, observer: Observer | None = None):
        """Map (B, 1, S, S) inputs to (B, 1, S, S) logits.

        With ``keep_tape`` returns ``(logits, tape)`` for :meth:`backward`.
        ``observer(i, layer, output)`` sees every layer output.
        """
        self.check_input(x)
        ps = _Pass(training, rng)
        h = np.ascontiguousarray(x, dtype=self.dtype)
        tape = [] if keep_tape else None
        for i, layer in enumerate(self.layers):
            h, cache = layer.forward(h, ps)
            if keep_tape:
                tape.append(cache)
            if observer is not None:
                observer(i, layer, h)
        if keep_tape:
            return h, (tape, ps)
        return h

    def backward(self, tape, grad: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients from dloss/dlogits; returns dloss/dinput."""
        caches, ps = tape
        g = grad
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            g = layer.backward(g, cache, ps)
        return g

    def describe(self) -> list[str]:
        return [repr(l) for l in self.layers]


def build_layers(config: UNetConfig) -> list[Layer]:
    f = config.filters
    layers: list[Layer] = []
    n_in = config.in_channels
    for lvl, width in enumerate(f, start=1):
        tag = f"enc{lvl}"
        layers += [
            Conv(f"{tag}.conv1", ENCODER, n_in, width, 3), ReLU(f"{tag}.relu1", ENCODER),
            Conv(f"{tag}.conv2", ENCODER, width, width, 3), ReLU(f"{tag}.relu2", ENCODER),
        ]
        if lvl < len(f):
            layers += [SaveSkip(f"{tag}.skip", ENCODER), MaxPool(f"{tag}.pool", ENCODER)]
        elif config.dropout > 0:
            layers.append(Dropout(f"{tag}.dropout", ENCODER, config.dropout))
        n_in = width
    for lvl in range(len(f) - 1, 0, -1):
        tag = f"dec{lvl}"
        width = f[lvl - 1]
        layers += [
            Upsample(f"{tag}.up", DECODER), ConcatSkip(f"{tag}.concat", DECODER),
            Conv(f"{tag}.conv1", DECODER, n_in + width, width, 3), ReLU(f"{tag}.relu1", DECODER),
            Conv(f"{tag}.conv2", DECODER, width, width, 3), ReLU(f"{tag}.relu2", DECODER),
        ]
        n_in = width
    layers.append(Conv("head", DECODER, n_in, config.out_channels, 1))
    return layers


def build(config: UNetConfig | None = None, seed: int = 0) -> UNetModel:
    """Build and initialize the network (He-uniform weights, zero biases)."""
    config = config or UNetConfig()
    model = UNetModel(config, build_layers(config), seed)
    rng = np.random.default_rng(seed)
    for conv in model.conv_layers():
        fan_in = conv.n_in * conv.k * conv.k
        bound = np.sqrt(6.0 / fan_in)
        conv.weight.data = rng.uniform(-bound, bound, conv.weight.shape).astype(np.float32)
    if config.filters == DEFAULT_FILTERS and model.param_count(ENCODER) != ENCODER_PARAMS:
        raise AssertionError(f"encoder has {model.param_count(ENCODER)} parameters, expected {ENCODER_PARAMS}")
    return model
