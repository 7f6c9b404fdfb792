"""SGD with momentum and a linear-warmup cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from .seeding import stream
from .tensor import GradTape, Tensor, reverse_mode_gradient


def cosine_lr(base_lr: float, step: int, total_steps: int, warmup_steps: int) -> float:
    """Linear ramp over ``warmup_steps`` then half-cosine decay to zero at ``total_steps``."""
    if step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min((step - warmup_steps) / span, 1.0)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))


class SGD:
    """Heavy-ball SGD: ``buf = momentum * buf + (g + wd * p)``, ``p -= lr * buf``."""

    def __init__(self, params: Sequence[Tensor], momentum: float = 0.9, weight_decay: float = 0.0):
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        frozen = [p.name for p in params if not p.requires_grad]
        if frozen:
            raise ValueError(f"refusing to optimise frozen parameters: {frozen[:3]}")
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._buf = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        if lr == 0.0:
            return
        for p, buf in zip(self.params, self._buf):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            buf *= self.momentum
            buf += g
            p.data = p.data - lr * buf


@dataclass(frozen=True)
class TrainRecipe:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    epochs: int = 30
    warmup_epochs: int = 3
    batch_size: int = 32
    seed: int = 0

    def validate(self) -> list[str]:
        problems = []
        if self.lr < 0:
            problems.append(f"lr must be >= 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            problems.append(f"momentum must be in [0, 1), got {self.momentum}")
        if self.epochs < 0:
            problems.append(f"epochs must be >= 0, got {self.epochs}")
        if self.epochs and not 0 <= self.warmup_epochs < self.epochs:
            problems.append(f"warmup_epochs {self.warmup_epochs} must be < epochs {self.epochs}")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1, got {self.batch_size}")
        return problems

    def to_dict(self) -> dict:
        return asdict(self)


def run_sgd(
    params: Sequence[Tensor],
    n_items: int,
    batch_loss: Callable[[np.ndarray], Tensor],
    recipe: TrainRecipe,
    stream_name: str = "shuffle",
    on_epoch: Callable[[int, float], dict | None] | None = None,
) -> list[dict]:
    """Minibatch SGD over ``n_items`` with a per-step cosine schedule.

    ``batch_loss(indices)`` must build the loss on a fresh tape-ready graph; the loop
    wraps it in a :class:`GradTape`. Shuffling is drawn from the named seed stream.
    Returns one log row per epoch.
    """
    problems = recipe.validate()
    if problems:
        raise ValueError("; ".join(problems))
    if n_items == 0:
        raise ValueError("cannot train on an empty dataset")
    opt = SGD(params, momentum=recipe.momentum, weight_decay=recipe.weight_decay)
    rng = stream(recipe.seed, stream_name)
    steps_per_epoch = -(-n_items // recipe.batch_size)
    total = steps_per_epoch * recipe.epochs
    warmup = steps_per_epoch * recipe.warmup_epochs
    log = []
    step = 0
    for epoch in range(recipe.epochs):
        order = rng.permutation(n_items)
        losses = []
        for s in range(steps_per_epoch):
            idx = order[s * recipe.batch_size : (s + 1) * recipe.batch_size]
            opt.zero_grad()
            with GradTape() as tape:
                loss = batch_loss(idx)
            value = float(loss.data[0])
            if not math.isfinite(value):
                raise FloatingPointError(
                    f"non-finite loss {value} at epoch {epoch} step {s}; lr={recipe.lr} may be too high"
                )
            reverse_mode_gradient(tape, loss, accumulate=False)
            opt.step(cosine_lr(recipe.lr, step, total, warmup))
            losses.append(value)
            step += 1
        row = {"epoch": epoch, "loss": float(np.mean(losses))}
        if on_epoch is not None:
            row.update(on_epoch(epoch, row["loss"]) or {})
        log.append(row)
    return log
