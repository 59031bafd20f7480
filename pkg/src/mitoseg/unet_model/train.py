from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from ..tensor_core import AdamState, adam_step, sigmoid_bce_loss
from .model import UNetModel

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


class Sampler(Protocol):
    def sample(self, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Return one (image, mask) pair, both (S, S)."""


@dataclass
class TrainSpec:
    batch_size: int = 4
    steps: int = 100_000
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    checkpoint_every: int = 0  # 0: final checkpoint only
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")


@dataclass
class Trainer:
    """Optimizer state plus the single RNG that drives sampling and dropout."""

    model: UNetModel
    spec: TrainSpec
    step: int = 0
    rng: np.random.Generator = None
    optim: dict[str, AdamState] = field(default_factory=dict)
    losses: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.rng is None:
            self.rng = np.random.default_rng(self.spec.seed)
        for name, p in self.model.named_params():
            if name not in self.optim:
                self.optim[name] = AdamState.zeros_like(
                    p.data, lr=self.spec.lr, beta1=self.spec.beta1, beta2=self.spec.beta2, eps=self.spec.eps
                )

    def next_batch(self, sampler: Sampler) -> tuple[np.ndarray, np.ndarray]:
        pairs = [sampler.sample(self.rng) for _ in range(self.spec.batch_size)]
        images = np.stack([p[0] for p in pairs])[:, None].astype(np.float32)
        masks = np.stack([p[1] for p in pairs])[:, None].astype(np.float32)
        return images, masks

    def train_step(self, sampler: Sampler) -> float:
        images, masks = self.next_batch(sampler)
        logits, tape = self.model.forward(images, training=True, rng=self.rng, keep_tape=True)
        loss, grad = sigmoid_bce_loss(logits, masks)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"loss became {loss} at step {self.step + 1}")
        self.model.zero_grad()
        self.model.backward(tape, grad)
        for name, p in self.model.named_params():
            p.data, self.optim[name] = adam_step(p.data, p.grad, self.optim[name])
            p.grad = None
        self.step += 1
        self.losses.append(loss)
        return loss

    def run(self, sampler: Sampler, out_dir: str | Path | None = None,
            on_step: Callable[[int, float], None] | None = None) -> list[float]:
        """Train until ``spec.steps``; resumes from ``self.step`` if already partway."""
        from .checkpoint import save  # circular at module level

        out = Path(out_dir) if out_dir is not None else None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
        while self.step < self.spec.steps:
            loss = self.train_step(sampler)
            if on_step is not None:
                on_step(self.step, loss)
            if self.step % 500 == 0:
                log.info("step %d loss %.5f", self.step, loss)
            every = self.spec.checkpoint_every
            if out is not None and every and self.step % every == 0 and self.step < self.spec.steps:
                save(out / f"ckpt_{self.step:07d}.msg", self.model, self)
        if out is not None:
            save(out / "final.msg", self.model, self)
            write_loss_log(out / "loss.log", self.losses)
        return self.losses


def write_loss_log(path: str | Path, losses: list[float]) -> None:
    with open(path, "w") as fh:
        for i, loss in enumerate(losses, start=1):
            fh.write(f"{i}\t{loss!r}\n")


def train(model: UNetModel, spec: TrainSpec, sampler: Sampler, out_dir: str | Path | None = None) -> Trainer:
    trainer = Trainer(model, spec)
    trainer.run(sampler, out_dir)
    return trainer
