from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """An operand has the wrong extent on a named axis."""


@dataclass
class Tensor:
    """Named parameter array with an optional accumulated gradient.

    Activations travel between ops as bare ``ndarray``s in batch-channel-row-column
    order; ``Tensor`` is what the model keeps for anything trainable.
    """

    data: np.ndarray
    grad: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data)
        if self.grad is not None and self.grad.shape != self.data.shape:
            raise ShapeError(
                f"{self.name or 'tensor'}: grad shape {self.grad.shape} != data shape {self.data.shape}"
            )

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(f"{self.name}: gradient shape {g.shape} != {self.data.shape}")
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g


@dataclass
class AdamState:
    """Moment estimates for one parameter array."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, param: np.ndarray, **hyper) -> "AdamState":
        return cls(m=np.zeros_like(param), v=np.zeros_like(param), **hyper)

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.step, self.lr, self.beta1, self.beta2, self.eps)
