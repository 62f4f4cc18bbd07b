"""Structured filter pruning by per-filter absolute-sum magnitude.

For each conv layer the filters with the smallest l1 norm (sum of |w|
over the C_in x k x k filter, bias excluded) are removed; the next conv
layer loses the kernels at the corresponding input channels, and the
first fully-connected consumer loses the weight columns for all spatial
positions of removed channels (flatten order is channel-major). The
result is a physically smaller model with a new fingerprint.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np

from .nn import LayerSpec, Model, architecture_fingerprint
from .tensor import Tensor


@dataclass
class PrunePlan:
    ratio: float
    model_fingerprint: bytes
    kept: List[List[int]]              # per conv layer, sorted kept indices
    norms: List[List[float]]           # per conv layer, all filter norms

    def to_json(self) -> str:
        return json.dumps({
            "ratio": self.ratio,
            "model_fingerprint": self.model_fingerprint.hex(),
            "layers": [{"kept": k, "norms": n} for k, n in zip(self.kept, self.norms)],
        }, indent=2)


def filter_l1_norms(weight: np.ndarray) -> np.ndarray:
    """Per-filter sum of absolute values of a [C_out, C_in, k, k] weight."""
    if weight.ndim != 4:
        raise ValueError(f"not a conv weight: shape {weight.shape}")
    return np.abs(weight).sum(axis=(1, 2, 3))


def kept_count(c_out: int, ratio: float) -> int:
    """Filters surviving at a sparsity ratio, never below 1.

    Uses ceil((1 - ratio) * c_out): at 80% sparsity the default conv
    widths [32, 32, 64, 64, 128, 128] become [7, 7, 13, 13, 26, 26].
    """
    return max(1, math.ceil((1.0 - ratio) * c_out))


def plan_prune(model: Model, ratio: float) -> PrunePlan:
    """Choose the highest-norm filters per conv layer; ties keep the
    lower index."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"sparsity ratio must be in [0,1), got {ratio}")
    kept: List[List[int]] = []
    norms: List[List[float]] = []
    conv_i = 0
    for spec in model.layers:
        if spec.kind != "conv":
            continue
        conv_i += 1
        s = filter_l1_norms(model.params[f"conv{conv_i}.weight"].data)
        n_keep = kept_count(spec.out_channels, ratio)
        # stable sort on (-norm, index): equal norms keep the lower index
        order = sorted(range(len(s)), key=lambda j: (-s[j], j))
        kept.append(sorted(order[:n_keep]))
        norms.append([float(v) for v in s])
    return PrunePlan(ratio=ratio, model_fingerprint=model.fingerprint,
                     kept=kept, norms=norms)


def apply_prune(model: Model, plan: PrunePlan) -> Model:
    """Build the physically smaller model described by a plan."""
    if plan.model_fingerprint != model.fingerprint:
        raise ValueError("plan was made for a different model (fingerprint mismatch)")
    conv_specs = [s for s in model.layers if s.kind == "conv"]
    if len(plan.kept) != len(conv_specs):
        raise ValueError(f"plan covers {len(plan.kept)} conv layers, model has {len(conv_specs)}")

    new_params: Dict[str, Tensor] = {}
    new_layers: List[LayerSpec] = []
    conv_i = 0
    prev_kept: List[int] | None = None       # kept output channels of previous conv
    fc_cols_done = False
    for spec in model.layers:
        if spec.kind == "conv":
            conv_i += 1
            keep = plan.kept[conv_i - 1]
            w = model.params[f"conv{conv_i}.weight"].data
            b = model.params[f"conv{conv_i}.bias"].data
            w = w[keep]
            if prev_kept is not None:
                w = w[:, prev_kept]
            new_params[f"conv{conv_i}.weight"] = Tensor(w.copy(), requires_grad=True)
            new_params[f"conv{conv_i}.bias"] = Tensor(b[keep].copy(), requires_grad=True)
            new_layers.append(LayerSpec("conv", len(keep), w.shape[1], spec.kernel,
                                        spec.stride, spec.padding, spec.activation))
            prev_kept = keep
        elif spec.kind == "fc":
            fc_i = sum(1 for l in new_layers if l.kind == "fc") + 1
            w = model.params[f"fc{fc_i}.weight"].data
            b = model.params[f"fc{fc_i}.bias"].data
            in_width = w.shape[1]
            if prev_kept is not None and not fc_cols_done:
                # channel-major flatten: each kept channel contributes a
                # contiguous block of spatial columns
                old_channels = conv_specs[-1].out_channels
                spatial = in_width // old_channels
                cols = np.concatenate([np.arange(c * spatial, (c + 1) * spatial)
                                       for c in prev_kept])
                w = w[:, cols]
                in_width = w.shape[1]
                fc_cols_done = True
            new_params[f"fc{fc_i}.weight"] = Tensor(w.copy(), requires_grad=True)
            new_params[f"fc{fc_i}.bias"] = Tensor(b.copy(), requires_grad=True)
            new_layers.append(LayerSpec("fc", spec.out_channels, in_width,
                                        activation=spec.activation))
        else:
            new_layers.append(spec)
    return Model(new_layers, new_params)
