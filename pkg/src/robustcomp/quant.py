"""Uniform quantization simulation: scheme computation, fake quantization,
post-training calibration, and quantization-aware training.

Weights use symmetric schemes (zero point 0, clipping range +-max|w|),
hidden activations use asymmetric min-max schemes observed on a
calibration set. All arithmetic stays in float64: tensors are passed
through dequantize(quantize(.)) to simulate the integer grid. Gradients
cross the fake-quant nodes by the straight-through rule: identity inside
the clipping range, zero outside.

Grid conventions: asymmetric b-bit uses [0, 2^b - 1]; symmetric uses
[-(2^(b-1) - 1), 2^(b-1) - 1] with clamping at the edges (the scale
(beta - alpha) / (2^b - 1) cannot represent beta exactly on the
restricted grid). 1-bit symmetric degenerates, so it is defined as sign
quantization onto {-beta, +beta} and marked nonstandard in dumps.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .data import Dataset
from .nn import Model
from .tensor import Tensor

SUPPORTED_BITS = (1, 2, 4, 8, 16)


@dataclass(frozen=True)
class QuantScheme:
    bits: int
    symmetric: bool
    alpha: float
    beta: float
    scale: float
    zero_point: int
    qmin: float
    qmax: float
    degenerate: bool = False
    nonstandard: bool = False        # 1-bit symmetric sign convention

    def to_dict(self, name: str = "") -> dict:
        return {"name": name, "b": self.bits, "symmetric": self.symmetric,
                "alpha": self.alpha, "beta": self.beta, "s": self.scale,
                "z": self.zero_point, "nonstandard": self.nonstandard}


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def compute_scheme(values: Optional[np.ndarray] = None, bits: int = 8,
                   symmetric: bool = True,
                   vmin: Optional[float] = None,
                   vmax: Optional[float] = None) -> QuantScheme:
    """Build a scheme from observed values or an explicit running range."""
    if bits not in SUPPORTED_BITS:
        raise ValueError(f"unsupported bit width {bits}; choose from {SUPPORTED_BITS}")
    if values is not None:
        vmin = float(np.min(values))
        vmax = float(np.max(values))
    if vmin is None or vmax is None:
        raise ValueError("either values or (vmin, vmax) is required")

    if symmetric:
        beta = max(abs(vmin), abs(vmax))
        alpha = -beta
        if bits == 1:
            # sign quantization onto {-beta, +beta}
            s = beta if beta > 0.0 else 1.0
            return QuantScheme(1, True, alpha, beta, s, 0, -1.0, 1.0,
                               degenerate=beta == 0.0, nonstandard=True)
        if beta == 0.0:
            return QuantScheme(bits, True, 0.0, 0.0, 1.0, 0,
                               -(2 ** (bits - 1) - 1), 2 ** (bits - 1) - 1,
                               degenerate=True)
        s = (beta - alpha) / (2 ** bits - 1)
        return QuantScheme(bits, True, alpha, beta, s, 0,
                           -(2 ** (bits - 1) - 1), 2 ** (bits - 1) - 1)

    if vmax == vmin:
        z = int(-_round_half_away(np.float64(vmin)))
        return QuantScheme(bits, False, vmin, vmax, 1.0, z,
                           0.0, 2 ** bits - 1, degenerate=True)
    s = (vmax - vmin) / (2 ** bits - 1)
    z = int(_round_half_away(np.float64(-vmin / s)))
    return QuantScheme(bits, False, vmin, vmax, s, z, 0.0, 2 ** bits - 1)


def quantize(r: np.ndarray, scheme: QuantScheme) -> np.ndarray:
    """Map real values onto the integer grid (returned as float64)."""
    r = np.asarray(r, dtype=np.float64)
    if scheme.symmetric and scheme.bits == 1:
        return np.where(r >= 0.0, 1.0, -1.0)
    q = _round_half_away(r / scheme.scale) + scheme.zero_point
    if scheme.degenerate:
        return q
    return np.clip(q, scheme.qmin, scheme.qmax)


def dequantize(q: np.ndarray, scheme: QuantScheme) -> np.ndarray:
    if scheme.symmetric and scheme.bits == 1:
        return scheme.scale * np.asarray(q, dtype=np.float64)
    return scheme.scale * (np.asarray(q, dtype=np.float64) - scheme.zero_point)


def fake_quant(r: np.ndarray, scheme: QuantScheme) -> np.ndarray:
    return dequantize(quantize(r, scheme), scheme)


def fake_quant_op(x: Tensor, scheme: QuantScheme) -> Tensor:
    """Fake quantization as a tape node with straight-through gradients."""
    out = Tensor(fake_quant(x.data, scheme), _parents=(x,), _op="fake_quant")
    mask = (x.data >= scheme.alpha) & (x.data <= scheme.beta)
    out._backward = lambda g: ((x, g * mask),)
    return out


class QuantizedModel:
    """A model plus per-weight (symmetric) and per-activation-site
    (asymmetric) schemes; calibrated once, then immutable for inference."""

    def __init__(self, model: Model, bits: int,
                 weight_schemes: Dict[str, QuantScheme],
                 act_schemes: Dict[str, QuantScheme],
                 calibration_digest: str):
        self.model = model
        self.bits = bits
        self.weight_schemes = weight_schemes
        self.act_schemes = act_schemes
        self.calibration_digest = calibration_digest

    def __call__(self, x: Tensor) -> Tensor:
        return quantized_forward(self, x)

    def parameters(self) -> Dict[str, Tensor]:
        return self.model.parameters()

    def schemes_json(self) -> str:
        entries = [s.to_dict(n) for n, s in sorted(self.weight_schemes.items())]
        entries += [s.to_dict(n) for n, s in sorted(self.act_schemes.items())]
        return json.dumps(entries, indent=2)


def weight_scheme_names(model: Model) -> List[str]:
    return [n for n in model.params if n.endswith(".weight")]


def derive_weight_schemes(model: Model, bits: int) -> Dict[str, QuantScheme]:
    return {name: compute_scheme(model.params[name].data, bits, symmetric=True)
            for name in weight_scheme_names(model)}


def ptq_calibrate(model: Model, calibration_images: np.ndarray, bits: int = 8,
                  batch_size: int = 256) -> QuantizedModel:
    """Post-training calibration: weight ranges from the weights themselves,
    activation ranges from float forward passes over the calibration set."""
    if calibration_images.size == 0:
        raise ValueError("empty calibration set")
    ranges: Dict[str, Tuple[float, float]] = {}

    def observe(site: str, t: Tensor) -> Tensor:
        lo = float(t.data.min())
        hi = float(t.data.max())
        if site in ranges:
            plo, phi = ranges[site]
            ranges[site] = (min(plo, lo), max(phi, hi))
        else:
            ranges[site] = (lo, hi)
        return t

    for i in range(0, calibration_images.shape[0], batch_size):
        model.forward(Tensor(calibration_images[i:i + batch_size]),
                      activation_hook=observe)

    act_schemes = {site: compute_scheme(bits=bits, symmetric=False,
                                        vmin=lo, vmax=hi)
                   for site, (lo, hi) in ranges.items()}
    digest = hashlib.sha256(calibration_images.tobytes()
                            + bits.to_bytes(2, "little")).hexdigest()[:16]
    return QuantizedModel(model, bits, derive_weight_schemes(model, bits),
                          act_schemes, digest)


def quantized_forward(qmodel: QuantizedModel, x: Tensor,
                      weight_schemes: Optional[Dict[str, QuantScheme]] = None) -> Tensor:
    """Forward pass with fake-quantized weights and hidden activations."""
    schemes = weight_schemes if weight_schemes is not None else qmodel.weight_schemes
    override = {}
    for name in weight_scheme_names(qmodel.model):
        if name not in schemes:
            raise KeyError(f"no quantization scheme for weight {name}")
        override[name] = fake_quant_op(qmodel.model.params[name], schemes[name])

    def hook(site: str, t: Tensor) -> Tensor:
        if site not in qmodel.act_schemes:
            raise KeyError(f"no quantization scheme for activation site {site}")
        return fake_quant_op(t, qmodel.act_schemes[site])

    return qmodel.model.forward(x, weight_override=override, activation_hook=hook)


def qat_forward_fn(qmodel: QuantizedModel) -> Callable[[Model, Tensor], Tensor]:
    """Training-time forward: weight schemes re-derived from the current
    master weights at every call, activation schemes frozen."""
    def fwd(model: Model, x: Tensor) -> Tensor:
        schemes = derive_weight_schemes(model, qmodel.bits)
        return quantized_forward(qmodel, x, weight_schemes=schemes)
    return fwd


def qat_epochs(qmodel: QuantizedModel, dataset: Dataset, train_config,
               attack_config=None, momentum: float = 0.0) -> Tuple[QuantizedModel, List[dict]]:
    """Quantization-aware training for ``train_config.epochs`` epochs.

    Float master weights are updated by SGD through the straight-through
    estimator; adversarial mode attacks the fake-quantized forward.
    """
    from .train import run_training

    fwd = qat_forward_fn(qmodel)
    if attack_config is not None:
        from .attack import train_adversarial
        _, log = train_adversarial(qmodel.model, dataset, train_config,
                                   attack_config, momentum=momentum,
                                   forward_fn=fwd)
    else:
        log = run_training(qmodel.model, dataset, train_config,
                           momentum=momentum, forward_fn=fwd)
    qmodel.weight_schemes = derive_weight_schemes(qmodel.model, qmodel.bits)
    return qmodel, log
