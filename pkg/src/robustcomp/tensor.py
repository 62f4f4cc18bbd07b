"""Dense float64 tensors with reverse-mode automatic differentiation.

Small tape-based autodiff engine backed by numpy. Only the operations
needed to train and attack small CNNs are provided: convolution, linear
maps, ReLU, max pooling, flatten, elementwise arithmetic, reductions and
a numerically stable cross-entropy.

All computation is float64 and deterministic: identical inputs produce
bit-identical outputs.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np


class ShapeMismatchError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


class TapeError(RuntimeError):
    """Raised on invalid backward calls (non-scalar loss, consumed tape)."""


class Tensor:
    """A numpy-backed tensor that optionally participates in the gradient tape.

    Non-leaf tensors record their parents and a backward closure; calling
    :meth:`backward` on a scalar result walks the tape in reverse
    topological order and accumulates gradients into every reachable
    tensor with ``requires_grad=True``.

    Data buffers are treated as immutable after construction; only the
    ``grad`` buffer mutates.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False,
                 _parents: Sequence["Tensor"] = (), _op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents = tuple(_parents)
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    def _wants_grad(self) -> bool:
        return self.requires_grad or bool(self._parents)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every requires_grad leaf.

        ``self`` must be scalar. The tape is consumed: a second backward
        on the same result raises. Gradients from successive backward
        passes (over fresh tapes) accumulate until ``zero_grad``.
        """
        if self.data.size != 1:
            raise TapeError(f"backward requires a scalar, got shape {self.data.shape}")
        if self._op == "consumed":
            raise TapeError("tape already consumed by a previous backward call")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node._accumulate(g)
            if node._backward is not None:
                for parent, pg in node._backward(g):
                    if id(parent) in grads:
                        grads[id(parent)] += pg
                    else:
                        grads[id(parent)] = pg
        self._op = "consumed"
        self._backward = None

    # -- elementwise arithmetic -------------------------------------------

    def __add__(self, other: "Tensor") -> "Tensor":
        other = _as_tensor(other)
        if self.data.shape != other.data.shape:
            raise ShapeMismatchError(f"add: {self.data.shape} vs {other.data.shape}")
        out = Tensor(self.data + other.data, _parents=(self, other), _op="add")
        out._backward = lambda g: ((self, g), (other, g))
        return out

    def __sub__(self, other: "Tensor") -> "Tensor":
        other = _as_tensor(other)
        if self.data.shape != other.data.shape:
            raise ShapeMismatchError(f"sub: {self.data.shape} vs {other.data.shape}")
        out = Tensor(self.data - other.data, _parents=(self, other), _op="sub")
        out._backward = lambda g: ((self, g), (other, -g))
        return out

    def __mul__(self, other) -> "Tensor":
        if np.isscalar(other):
            out = Tensor(self.data * other, _parents=(self,), _op="scale")
            out._backward = lambda g: ((self, g * other),)
            return out
        other = _as_tensor(other)
        if self.data.shape != other.data.shape:
            raise ShapeMismatchError(f"mul: {self.data.shape} vs {other.data.shape}")
        out = Tensor(self.data * other.data, _parents=(self, other), _op="mul")
        out._backward = lambda g: ((self, g * other.data), (other, g * self.data))
        return out

    __rmul__ = __mul__

    def sum(self) -> "Tensor":
        out = Tensor(self.data.sum(), _parents=(self,), _op="sum")
        out._backward = lambda g: ((self, np.broadcast_to(g, self.data.shape).copy()),)
        return out

    def reshape(self, *shape: int) -> "Tensor":
        out = Tensor(self.data.reshape(shape), _parents=(self,), _op="reshape")
        src = self.data.shape
        out._backward = lambda g: ((self, g.reshape(src)),)
        return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0), _parents=(x,), _op="relu")
    mask = x.data > 0
    out._backward = lambda g: ((x, g * mask),)
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight.T + bias``.

    ``x`` may be a vector ``[n]`` or a batch ``[B, n]``; ``weight`` is
    ``[m, n]`` and ``bias`` ``[m]``.
    """
    batched = x.data.ndim == 2
    n = x.data.shape[-1]
    if weight.data.ndim != 2 or weight.data.shape[1] != n:
        raise ShapeMismatchError(
            f"linear: input inner dim {n} vs weight {weight.data.shape}")
    if bias.data.shape != (weight.data.shape[0],):
        raise ShapeMismatchError(
            f"linear: bias {bias.data.shape} vs weight rows {weight.data.shape[0]}")
    y = x.data @ weight.data.T + bias.data
    out = Tensor(y, _parents=(x, weight, bias), _op="linear")

    def bwd(g):
        grads = []
        if x._wants_grad():
            grads.append((x, g @ weight.data if batched else weight.data.T @ g))
        if weight._wants_grad():
            grads.append((weight, g.T @ x.data if batched else np.outer(g, x.data)))
        if bias._wants_grad():
            grads.append((bias, g.sum(axis=0) if batched else g))
        return grads

    out._backward = bwd
    return out


def _im2col(x: np.ndarray, k: int, stride: int, padding: int):
    """Lower [B,C,H,W] to patch columns [B, C*k*k, OH*OW]."""
    b, c, h, w = x.shape
    if padding > 0:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hp, wp = x.shape[2], x.shape[3]
    oh = (hp - k) // stride + 1
    ow = (wp - k) // stride + 1
    sb, sc, sh, sw = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x, shape=(b, c, oh, ow, k, k),
        strides=(sb, sc, sh * stride, sw * stride, sh, sw))
    cols = windows.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * k * k, oh * ow)
    return np.ascontiguousarray(cols), oh, ow, hp, wp


def _col2im(cols: np.ndarray, c: int, k: int, stride: int, padding: int,
            hp: int, wp: int, oh: int, ow: int, h: int, w: int) -> np.ndarray:
    """Scatter-add patch columns back to image space (adjoint of _im2col)."""
    b = cols.shape[0]
    xpad = np.zeros((b, c, hp, wp))
    patches = cols.reshape(b, c, k, k, oh, ow)
    for ki in range(k):
        for kj in range(k):
            xpad[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride] \
                += patches[:, :, ki, kj]
    if padding > 0:
        return xpad[:, :, padding:padding + h, padding:padding + w]
    return xpad


def conv2d(x: Tensor, filters: Tensor, bias: Tensor,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x`` with ``filters`` plus per-channel bias.

    ``x`` is ``[C_in, H, W]`` or batched ``[B, C_in, H, W]``; ``filters``
    is ``[C_out, C_in, k, k]``; ``bias`` is ``[C_out]``. No kernel flip.
    """
    batched = x.data.ndim == 4
    xb = x.data if batched else x.data[None]
    if filters.data.ndim != 4 or filters.data.shape[2] != filters.data.shape[3]:
        raise ShapeMismatchError(f"conv2d: filters must be [C_out,C_in,k,k], got {filters.data.shape}")
    cout, cin, k, _ = filters.data.shape
    if xb.ndim != 4 or xb.shape[1] != cin:
        raise ShapeMismatchError(
            f"conv2d: input channels {xb.shape[1] if xb.ndim == 4 else xb.shape} "
            f"vs filter C_in {cin}")
    if bias.data.shape != (cout,):
        raise ShapeMismatchError(f"conv2d: bias {bias.data.shape} vs C_out {cout}")
    h, w = xb.shape[2], xb.shape[3]
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ShapeMismatchError(
            f"conv2d: kernel {k} exceeds padded extent {(h + 2 * padding, w + 2 * padding)}")

    cols, oh, ow, hp, wp = _im2col(xb, k, stride, padding)
    wmat = filters.data.reshape(cout, cin * k * k)
    y = wmat @ cols                           # (B, C_out, OH*OW) batched GEMM
    y = y.reshape(xb.shape[0], cout, oh, ow) + bias.data[None, :, None, None]
    if not batched:
        y = y[0]
    out = Tensor(y, _parents=(x, filters, bias), _op="conv2d")

    def bwd(g):
        gb4 = g if batched else g[None]
        gflat = gb4.reshape(gb4.shape[0], cout, oh * ow)
        grads = []
        if filters._wants_grad():
            gw = np.tensordot(gflat, cols, axes=([0, 2], [0, 2]))
            grads.append((filters, gw.reshape(filters.data.shape)))
        if bias._wants_grad():
            grads.append((bias, gflat.sum(axis=(0, 2))))
        if x._wants_grad():
            gcols = np.matmul(wmat.T, gflat)
            gx = _col2im(gcols, cin, k, stride, padding, hp, wp, oh, ow, h, w)
            grads.append((x, gx if batched else gx[0]))
        return grads

    out._backward = bwd
    return out


def maxpool2d(x: Tensor, window: int, stride: Optional[int] = None) -> Tensor:
    """Max pooling over square windows; gradient goes to the argmax element
    (first flat index on ties)."""
    if stride is None:
        stride = window
    batched = x.data.ndim == 4
    xb = x.data if batched else x.data[None]
    b, c, h, w = xb.shape
    if window > h or window > w:
        raise ShapeMismatchError(f"maxpool2d: window {window} exceeds extent {(h, w)}")
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    sb, sc, sh, sw = xb.strides
    win = np.lib.stride_tricks.as_strided(
        xb, shape=(b, c, oh, ow, window, window),
        strides=(sb, sc, sh * stride, sw * stride, sh, sw))
    flat = win.reshape(b, c, oh, ow, window * window)
    arg = flat.argmax(axis=-1)                       # first index on ties
    y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    out = Tensor(y if batched else y[0], _parents=(x,), _op="maxpool2d")

    def bwd(g):
        gb4 = g if batched else g[None]
        gx = np.zeros_like(xb)
        bi, ci, oi, oj = np.indices(arg.shape, sparse=False)
        hi = oi * stride + arg // window
        wj = oj * stride + arg % window
        np.add.at(gx, (bi, ci, hi, wj), gb4)
        return ((x, gx if batched else gx[0]),)

    out._backward = bwd
    return out


def flatten(x: Tensor) -> Tensor:
    """Flatten all but the batch axis ([B,C,H,W] -> [B,CHW]); a bare
    [C,H,W] input flattens fully. Channel-major order."""
    if x.data.ndim == 4:
        return x.reshape(x.data.shape[0], -1)
    return x.reshape(-1)


def cross_entropy(logits: Tensor, label) -> Tensor:
    """Mean softmax cross-entropy, max-subtraction stabilized.

    ``logits`` is ``[C]`` with an integer label, or ``[B, C]`` with a
    length-B label vector (mean reduction over the batch).
    """
    if logits.data.ndim == 1:
        labels = np.asarray([label], dtype=np.int64)
        z = logits.data[None]
    else:
        labels = np.asarray(label, dtype=np.int64)
        z = logits.data
    c = z.shape[1]
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"label out of range [0,{c}): {labels}")
    zmax = z.max(axis=1, keepdims=True)
    zs = z - zmax
    logsumexp = np.log(np.exp(zs).sum(axis=1, keepdims=True))
    logp = zs - logsumexp
    n = z.shape[0]
    loss = -logp[np.arange(n), labels].sum() / n
    out = Tensor(loss, _parents=(logits,), _op="cross_entropy")

    def bwd(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        gz = (float(g) / n) * p
        return ((logits, gz if logits.data.ndim == 2 else gz[0]),)

    out._backward = bwd
    return out


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    """Stable softmax over the last axis (plain numpy, no tape)."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
