"""Mini-batch SGD training and post-compression fine-tuning presets.

Standard training minimizes the mean cross-entropy over the dataset with
plain SGD (optional heavy-ball momentum) under a piecewise-constant
learning-rate schedule: 0.1 for the first four epochs, 0.01 afterwards.

Fine-tuning presets after compression:
  prune-std / prune-adv: lr 0.1, no momentum
  quant-std / quant-adv: lr 0.01, momentum 0.9
with 3 epochs by default; the ``-adv`` variants train on PGD-perturbed
batches.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .data import BatchIterator, Dataset
from .nn import Model
from .tensor import Tensor

DEFAULT_SCHEDULE: List[Tuple[int, float]] = [(0, 0.1), (4, 0.01)]

FINETUNE_PRESETS = {
    "prune-std": {"lr": 0.1, "momentum": 0.0, "adversarial": False},
    "prune-adv": {"lr": 0.1, "momentum": 0.0, "adversarial": True},
    "quant-std": {"lr": 0.01, "momentum": 0.9, "adversarial": False},
    "quant-adv": {"lr": 0.01, "momentum": 0.9, "adversarial": True},
}


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch, self.loss = epoch, batch, loss


@dataclass
class OptimizerState:
    lr: float
    momentum: float = 0.0
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    schedule: List[Tuple[int, float]] = field(default_factory=lambda: list(DEFAULT_SCHEDULE))
    seed: int = 0
    mode: str = "standard"            # "standard" | "adversarial"
    preset: Optional[str] = None

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        thresholds = [e for e, _ in self.schedule]
        if thresholds != sorted(set(thresholds)):
            raise ValueError("schedule thresholds must be strictly increasing")


def lr_at(schedule: Sequence[Tuple[int, float]], epoch: int) -> float:
    """Piecewise-constant lookup: the rate of the last threshold <= epoch."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    lr = schedule[0][1]
    for threshold, rate in schedule:
        if epoch >= threshold:
            lr = rate
    return lr


def sgd_step(params: Dict[str, Tensor], state: OptimizerState) -> None:
    """In-place SGD update from the accumulated ``grad`` buffers.

    momentum 0:  w <- w - lr * g
    momentum mu: v <- mu * v + g;  w <- w - lr * v
    """
    for name in sorted(params):
        p = params[name]
        if p.grad is None:
            continue
        if p.grad.shape != p.data.shape:
            raise T.ShapeMismatchError(f"grad shape {p.grad.shape} vs param {p.data.shape} for {name}")
        if state.momentum > 0.0:
            v = state.velocity.get(name)
            if v is None:
                v = np.zeros_like(p.data)
            v = state.momentum * v + p.grad
            state.velocity[name] = v
            p.data = p.data - state.lr * v
        else:
            p.data = p.data - state.lr * p.grad


BatchTransform = Callable[[Model, np.ndarray, np.ndarray, np.ndarray, int], np.ndarray]


def run_training(model: Model, dataset: Dataset, config: TrainConfig,
                 lr_override: Optional[float] = None,
                 momentum: float = 0.0,
                 batch_transform: Optional[BatchTransform] = None,
                 forward_fn=None,
                 on_step=None,
                 log: Optional[List[dict]] = None) -> List[dict]:
    """Shared SGD loop; returns per-epoch log records.

    ``batch_transform(model, images, labels, indices, epoch)`` may replace
    each batch (adversarial training); ``forward_fn(model, Tensor)``
    overrides the forward pass (fake-quantized training); ``on_step`` runs
    after every optimizer step.
    """
    if log is None:
        log = []
    it = BatchIterator(dataset, config.batch_size, config.seed)
    state = OptimizerState(lr=0.0, momentum=momentum)
    for epoch in range(config.epochs):
        lr = lr_override if lr_override is not None else lr_at(config.schedule, epoch)
        state.lr = lr
        t0 = time.perf_counter()
        total_loss = 0.0
        correct = 0
        for b, (xb, yb, idx) in enumerate(it.batches(epoch)):
            if batch_transform is not None:
                xb = batch_transform(model, xb, yb, idx, epoch)
            x = Tensor(xb)
            logits = forward_fn(model, x) if forward_fn else model.forward(x)
            loss = T.cross_entropy(logits, yb)
            lval = float(loss.data)
            if not np.isfinite(lval):
                raise TrainingDiverged(epoch, b, lval)
            model.zero_grad()
            loss.backward()
            sgd_step(model.params, state)
            if on_step is not None:
                on_step(model)
            total_loss += lval * len(yb)
            correct += int((logits.data.argmax(axis=1) == yb).sum())
        n = len(dataset)
        log.append({"epoch": epoch, "split": dataset.split,
                    "loss": total_loss / n, "accuracy": correct / n, "lr": lr,
                    "wall_ms": 1000.0 * (time.perf_counter() - t0)})
    return log


def train_standard(model: Model, dataset: Dataset,
                   config: TrainConfig) -> Tuple[Model, List[dict]]:
    """Empirical-risk minimization by mini-batch SGD; deterministic per seed."""
    log = run_training(model, dataset, config)
    return model, log


def finetune(model: Model, dataset: Dataset, preset: str, epochs: int = 3,
             attack_config=None, seed: int = 0,
             batch_size: int = 64) -> Tuple[Model, List[dict]]:
    """Brief post-compression training with the preset hyperparameters."""
    if preset not in FINETUNE_PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(FINETUNE_PRESETS)}")
    p = FINETUNE_PRESETS[preset]
    if epochs == 0:
        return model, []
    config = TrainConfig(epochs=epochs, batch_size=batch_size,
                         schedule=[(0, p["lr"])], seed=seed,
                         mode="adversarial" if p["adversarial"] else "standard",
                         preset=preset)
    if p["adversarial"]:
        from .attack import train_adversarial
        if attack_config is None:
            raise ValueError(f"preset {preset!r} requires an attack config")
        model, log = train_adversarial(model, dataset, config, attack_config,
                                       momentum=p["momentum"])
    else:
        log = run_training(model, dataset, config, momentum=p["momentum"])
    return model, log


def log_to_csv(log: List[dict]) -> str:
    lines = ["epoch,split,loss,accuracy,lr,wall_ms"]
    for rec in log:
        lines.append(f"{rec['epoch']},{rec['split']},{rec['loss']:.6f},"
                     f"{rec['accuracy']:.6f},{rec['lr']},{rec['wall_ms']:.1f}")
    return "\n".join(lines) + "\n"
