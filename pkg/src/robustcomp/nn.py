"""The 8-layer CNN: layer specs, forward with feature taps, binary save/load.

Architecture (fixed up to pruning): six 3x3 conv blocks with channel
widths [32, 32, 64, 64, 128, 128], stride 1, padding 1, ReLU after each
conv, 2x2 max pooling after blocks 2, 4 and 6, then FC 128*3*3 -> 256
with ReLU and FC 256 -> 10.

Serialized model files are a little-endian container: magic ``RPRS``,
format version u32, 32-byte SHA-256 architecture fingerprint, a
length-prefixed architecture JSON blob, tensor count u32, then per tensor
name (u32 length + UTF-8), rank u32, dims u64, raw float64 data.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .tensor import Tensor

MAGIC = b"RPRS"
FORMAT_VERSION = 1

DEFAULT_CONV_CHANNELS = [32, 32, 64, 64, 128, 128]
NUM_CLASSES = 10
INPUT_SHAPE = (1, 28, 28)


class ModelFormatError(ValueError):
    """Raised when a model file fails magic/fingerprint/structure checks."""


@dataclass(frozen=True)
class LayerSpec:
    """One layer of the network graph."""
    kind: str                      # "conv" | "maxpool" | "flatten" | "fc"
    out_channels: int = 0          # conv filters / fc units
    in_channels: int = 0           # conv input channels / fc input width
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    activation: bool = False       # ReLU after the layer

    def to_dict(self) -> dict:
        return {"kind": self.kind, "out": self.out_channels, "in": self.in_channels,
                "k": self.kernel, "stride": self.stride, "pad": self.padding,
                "act": self.activation}

    @staticmethod
    def from_dict(d: dict) -> "LayerSpec":
        return LayerSpec(d["kind"], d["out"], d["in"], d["k"], d["stride"],
                         d["pad"], d["act"])


@dataclass
class FeatureTap:
    """Captured activation of one parameterized layer for one forward pass."""
    layer_index: int
    values: np.ndarray


def architecture_fingerprint(layers: List[LayerSpec]) -> bytes:
    blob = json.dumps([l.to_dict() for l in layers], sort_keys=True).encode()
    return hashlib.sha256(blob).digest()


class Model:
    """Ordered layer graph with named parameter tensors.

    Parameter names follow ``conv{i}.weight`` / ``conv{i}.bias`` for the
    i-th conv block (1-based) and ``fc{i}.weight`` / ``fc{i}.bias`` for
    the fully-connected layers. Parameterized layers are numbered 1..8
    for feature taps (conv blocks 1-6, then fc 1-2); a conv block's tap
    point is its output after ReLU and, where present, pooling.
    """

    def __init__(self, layers: List[LayerSpec], params: Dict[str, Tensor]):
        self.layers = list(layers)
        self.params = params
        self.fingerprint = architecture_fingerprint(self.layers)

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def parameters(self) -> Dict[str, Tensor]:
        return self.params

    def param_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def param_digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].data.tobytes())
        return h.hexdigest()

    def forward(self, x: Tensor, taps: Optional[Iterable[int]] = None,
                weight_override: Optional[Dict[str, Tensor]] = None,
                activation_hook=None) -> Tensor | Tuple[Tensor, List[FeatureTap]]:
        """Run the network; returns logits, plus FeatureTaps if requested.

        ``weight_override`` substitutes parameter tensors by name (used by
        fake quantization); ``activation_hook(site, tensor) -> tensor`` is
        applied after every hidden ReLU.
        """
        tap_set = set(taps) if taps is not None else None
        captured: List[FeatureTap] = []
        p = self.params if weight_override is None else {**self.params, **weight_override}

        conv_i = fc_i = 0
        layer_no = 0                     # parameterized-layer counter
        in_pool_block = 0                # conv block awaiting its pool
        for i, spec in enumerate(self.layers):
            completed = None
            if spec.kind == "conv":
                conv_i += 1
                layer_no += 1
                x = T.conv2d(x, p[f"conv{conv_i}.weight"], p[f"conv{conv_i}.bias"],
                             stride=spec.stride, padding=spec.padding)
                if spec.activation:
                    x = T.relu(x)
                    if activation_hook is not None:
                        x = activation_hook(f"conv{conv_i}.act", x)
                nxt = self.layers[i + 1] if i + 1 < len(self.layers) else None
                if nxt is not None and nxt.kind == "maxpool":
                    in_pool_block = layer_no   # block completes after the pool
                else:
                    completed = layer_no
            elif spec.kind == "maxpool":
                x = T.maxpool2d(x, spec.kernel, spec.stride)
                completed, in_pool_block = in_pool_block, 0
            elif spec.kind == "flatten":
                x = T.flatten(x)
            elif spec.kind == "fc":
                fc_i += 1
                layer_no += 1
                x = T.linear(x, p[f"fc{fc_i}.weight"], p[f"fc{fc_i}.bias"])
                if spec.activation:
                    x = T.relu(x)
                    if activation_hook is not None:
                        x = activation_hook(f"fc{fc_i}.act", x)
                completed = layer_no
            else:
                raise ValueError(f"unknown layer kind {spec.kind!r}")
            if tap_set is not None and completed in tap_set:
                captured.append(FeatureTap(completed, x.data.copy()))
        if taps is not None:
            return x, captured
        return x

    def predict(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Argmax class predictions for a [N,1,28,28] image array."""
        preds = []
        for i in range(0, images.shape[0], batch_size):
            logits = self.forward(Tensor(images[i:i + batch_size]))
            preds.append(logits.data.argmax(axis=1))
        return np.concatenate(preds)

    def clone(self) -> "Model":
        params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad)
                  for k, v in self.params.items()}
        return Model(self.layers, params)


def small_cnn_layers(conv_channels: Optional[List[int]] = None,
                     fc_hidden: int = 256) -> List[LayerSpec]:
    """Layer table for the 8-layer CNN; conv widths may differ post-pruning."""
    ch = list(conv_channels or DEFAULT_CONV_CHANNELS)
    if len(ch) != 6:
        raise ValueError("expected 6 conv block widths")
    layers: List[LayerSpec] = []
    cin = 1
    for i, cout in enumerate(ch):
        layers.append(LayerSpec("conv", cout, cin, 3, 1, 1, activation=True))
        cin = cout
        if i % 2 == 1:
            layers.append(LayerSpec("maxpool", kernel=2, stride=2))
    layers.append(LayerSpec("flatten"))
    layers.append(LayerSpec("fc", fc_hidden, ch[-1] * 3 * 3, activation=True))
    layers.append(LayerSpec("fc", NUM_CLASSES, fc_hidden, activation=False))
    return layers


def init_params(layers: List[LayerSpec], seed: int) -> Dict[str, Tensor]:
    """Kaiming-uniform fan-in weights, zero biases, deterministic per seed."""
    rng = np.random.default_rng(seed)
    params: Dict[str, Tensor] = {}
    conv_i = fc_i = 0
    for spec in layers:
        if spec.kind == "conv":
            conv_i += 1
            fan_in = spec.in_channels * spec.kernel * spec.kernel
            bound = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound,
                            (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel))
            params[f"conv{conv_i}.weight"] = Tensor(w, requires_grad=True)
            params[f"conv{conv_i}.bias"] = Tensor(np.zeros(spec.out_channels),
                                                  requires_grad=True)
        elif spec.kind == "fc":
            fc_i += 1
            bound = np.sqrt(6.0 / spec.in_channels)
            w = rng.uniform(-bound, bound, (spec.out_channels, spec.in_channels))
            params[f"fc{fc_i}.weight"] = Tensor(w, requires_grad=True)
            params[f"fc{fc_i}.bias"] = Tensor(np.zeros(spec.out_channels),
                                              requires_grad=True)
    return params


def build_small_cnn(seed: int = 0,
                    conv_channels: Optional[List[int]] = None) -> Model:
    layers = small_cnn_layers(conv_channels)
    return Model(layers, init_params(layers, seed))


def save(model: Model, path) -> None:
    arch = json.dumps([l.to_dict() for l in model.layers], sort_keys=True).encode()
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", FORMAT_VERSION)
    out += model.fingerprint
    out += struct.pack("<I", len(arch)) + arch
    out += struct.pack("<I", len(model.params))
    for name in sorted(model.params):
        t = model.params[name]
        nb = name.encode()
        out += struct.pack("<I", len(nb)) + nb
        out += struct.pack("<I", t.data.ndim)
        for d in t.data.shape:
            out += struct.pack("<Q", d)
        out += np.ascontiguousarray(t.data, dtype="<f8").tobytes()
    with open(path, "wb") as f:
        f.write(bytes(out))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ModelFormatError("truncated model file")
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def load(path) -> Model:
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if r.take(4) != MAGIC:
        raise ModelFormatError("bad magic; not a model file")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported format version {version}")
    fingerprint = r.take(32)
    arch_len = r.u32()
    try:
        arch = json.loads(r.take(arch_len).decode())
        layers = [LayerSpec.from_dict(d) for d in arch]
    except (ValueError, KeyError, UnicodeDecodeError) as e:
        raise ModelFormatError(f"unreadable architecture block: {e}") from e
    if architecture_fingerprint(layers) != fingerprint:
        raise ModelFormatError("architecture fingerprint mismatch")
    count = r.u32()
    params: Dict[str, Tensor] = {}
    for _ in range(count):
        name = r.take(r.u32()).decode()
        rank = r.u32()
        dims = tuple(r.u64() for _ in range(rank))
        n = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(dims).copy()
        params[name] = Tensor(data, requires_grad=True)
    if r.pos != len(r.buf):
        raise ModelFormatError("trailing bytes after tensor data")
    return Model(layers, params)
