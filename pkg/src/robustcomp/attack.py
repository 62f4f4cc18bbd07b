"""PGD attacks under the sup-norm ball, robustness evaluation, and
adversarial training.

The attack iterates x <- Proj(x + step * sign(grad_x loss)) inside the
eps-ball around the original input, clamping to the valid pixel range
[0, 1] after every step. Random starts draw a per-sample uniform offset
whose RNG stream depends only on (attack seed, dataset index), so batch
composition never changes results.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from typing import Callable, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .data import Dataset
from .nn import Model
from .seeds import rng_for
from .tensor import Tensor


@dataclass
class AttackConfig:
    eps: float = 0.1
    step_size: float = 0.01
    steps: int = 20
    norm: str = "linf"
    random_start: bool = True
    seed: int = 0
    clamp: Tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if self.eps < 0:
            raise ValueError("eps must be >= 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.steps > 0 and self.step_size <= 0:
            raise ValueError("step_size must be positive when steps > 0")
        if self.norm != "linf":
            raise ValueError(f"unsupported norm {self.norm!r}")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class RobustnessReport:
    clean_accuracy: float
    robust_accuracy: float
    robust_correct: np.ndarray          # per-sample flags under attack
    clean_correct: np.ndarray
    attack_digest: str
    n: int
    bad_gradient_count: int = 0

    def to_json(self, cfg: AttackConfig, model_digest: str = "") -> str:
        return json.dumps({
            "clean_acc": self.clean_accuracy, "robust_acc": self.robust_accuracy,
            "eps": cfg.eps, "steps": cfg.steps, "step_size": cfg.step_size,
            "n": self.n, "seed": cfg.seed, "model_digest": model_digest,
        }, indent=2)


def _frozen_params(model) -> list:
    """Temporarily flip off requires_grad for model parameters."""
    frozen = []
    if hasattr(model, "parameters"):
        for t in model.parameters().values():
            if t.requires_grad:
                t.requires_grad = False
                frozen.append(t)
    return frozen


def pgd_attack(model: Callable[[Tensor], Tensor], x: np.ndarray, y: np.ndarray,
               cfg: AttackConfig, indices: Optional[np.ndarray] = None,
               return_diagnostics: bool = False):
    """Return the perturbation delta with max|delta| <= eps and
    x + delta inside the clamp range.

    ``model`` is any callable mapping a batched input Tensor to logits;
    parameters are never modified. Samples whose input gradient goes
    non-finite are abandoned at delta = 0 and flagged.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n = x.shape[0]
    if indices is None:
        indices = np.arange(n)
    lo, hi = cfg.clamp
    bad = np.zeros(n, dtype=bool)

    if cfg.eps == 0.0 or (cfg.steps == 0 and not cfg.random_start):
        delta = np.zeros_like(x)
        return (delta, bad) if return_diagnostics else delta

    xa = x.copy()
    if cfg.random_start:
        for i in range(n):
            rng = rng_for(cfg.seed, "pgd-start", int(indices[i]))
            xa[i] = x[i] + rng.uniform(-cfg.eps, cfg.eps, size=x.shape[1:])
        np.clip(xa, lo, hi, out=xa)

    frozen = _frozen_params(model)
    try:
        for _ in range(cfg.steps):
            xt = Tensor(xa, requires_grad=True)
            logits = model(xt)
            # summed loss: each sample's input gradient is independent
            loss = T.cross_entropy(logits, y) * float(n)
            loss.backward()
            g = xt.grad
            finite = np.isfinite(g).reshape(n, -1).all(axis=1)
            bad |= ~finite
            step = cfg.step_size * np.sign(g)
            step[~finite] = 0.0
            xa = xa + step
            np.clip(xa, x - cfg.eps, x + cfg.eps, out=xa)
            np.clip(xa, lo, hi, out=xa)
    finally:
        for t in frozen:
            t.requires_grad = True

    delta = xa - x
    # exact projection: the sup-norm bound and the clamp must both hold in
    # floating point, so clip in delta space and nudge ulp stragglers
    np.clip(delta, -cfg.eps, cfg.eps, out=delta)
    np.clip(delta, lo - x, hi - x, out=delta)
    for _ in range(4):
        xf = x + delta
        off = (xf < lo) | (xf > hi)
        if not off.any():
            break
        delta[off] = np.nextafter(delta[off], 0.0)
    delta[bad] = 0.0
    return (delta, bad) if return_diagnostics else delta


def evaluate(model: Model, dataset: Dataset, cfg: AttackConfig,
             batch_size: int = 256,
             forward_fn: Optional[Callable] = None) -> RobustnessReport:
    """Clean and PGD-robust accuracy over a dataset."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    fwd = forward_fn if forward_fn is not None else model
    clean_correct = np.zeros(len(dataset), dtype=bool)
    robust_correct = np.zeros(len(dataset), dtype=bool)
    bad_total = 0
    for i in range(0, len(dataset), batch_size):
        xb = dataset.images[i:i + batch_size]
        yb = dataset.labels[i:i + batch_size]
        idx = np.arange(i, i + len(yb))
        logits = fwd(Tensor(xb))
        clean_correct[idx] = logits.data.argmax(axis=1) == yb
        delta, bad = pgd_attack(fwd, xb, yb, cfg, indices=idx, return_diagnostics=True)
        bad_total += int(bad.sum())
        adv_logits = fwd(Tensor(xb + delta))
        robust_correct[idx] = adv_logits.data.argmax(axis=1) == yb
    return RobustnessReport(
        clean_accuracy=float(clean_correct.mean()),
        robust_accuracy=float(robust_correct.mean()),
        robust_correct=robust_correct, clean_correct=clean_correct,
        attack_digest=cfg.digest(), n=len(dataset), bad_gradient_count=bad_total)


def train_adversarial(model: Model, dataset: Dataset, train_config,
                      attack_config: AttackConfig, momentum: float = 0.0,
                      forward_fn: Optional[Callable] = None,
                      on_step=None) -> Tuple[Model, List[dict]]:
    """SGD on PGD-perturbed mini-batches (the worst-case empirical loss).

    At eps = 0 this is exactly standard training: the perturbation is
    identically zero and the parameter trajectory is bit-identical.
    """
    from .train import run_training

    def perturb(m, xb, yb, idx, epoch):
        target = m if forward_fn is None else (lambda t: forward_fn(m, t))
        delta = pgd_attack(target, xb, yb, attack_config, indices=idx)
        return xb + delta

    log = run_training(model, dataset, train_config, momentum=momentum,
                       batch_transform=perturb,
                       forward_fn=forward_fn, on_step=on_step)
    return model, log
