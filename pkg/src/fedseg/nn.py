"""Miniature fully convolutional segmentation network with hand-written backprop.

Tensors are plain numpy arrays in NCHW layout. Weight layouts follow the usual
conventions: ``conv2d`` takes ``[out, in, k, k]`` and ``conv_transpose2d`` takes
``[in, out, k, k]``, so the same array is its own adjoint between the two.

Network layout for ``hidden_channels = [h0, h1, ...]``::

    enc{i}: conv k x k, stride 2, padding k // 2, ReLU   (in -> h0 -> h1 -> ...)
    dec{i}: transposed conv, stride 2, ReLU               (mirror back up to h0)
    head:   1 x 1 conv to num_classes logits
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .paramset import ParamSet
from .rng import SplitMix64, derive_seed


class NumericError(ArithmeticError):
    """Raised when activations, losses or gradients stop being finite."""


@dataclass(frozen=True)
class FcnConfig:
    in_channels: int = 3
    num_classes: int = 4
    hidden_channels: tuple[int, ...] = (8, 16)
    kernel_size: int = 3
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "hidden_channels", tuple(int(h) for h in self.hidden_channels))
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if not self.hidden_channels or min(self.hidden_channels) < 1:
            raise ValueError("hidden_channels must be a non-empty list of positive ints")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd and >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def total_stride(self) -> int:
        return 2 ** len(self.hidden_channels)

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "num_classes": self.num_classes,
            "hidden_channels": list(self.hidden_channels),
            "kernel_size": self.kernel_size,
            "seed": self.seed,
            "dtype": self.dtype,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FcnConfig":
        return cls(**d)


@dataclass(frozen=True)
class _Layer:
    name: str
    kind: str  # "conv" or "convT"
    cin: int
    cout: int
    k: int
    stride: int
    relu: bool = field(default=True)

    @property
    def padding(self) -> int:
        return self.k // 2

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == "conv":
            return (self.cout, self.cin, self.k, self.k)
        return (self.cin, self.cout, self.k, self.k)

    @property
    def fan_in(self) -> int:
        return self.cin * self.k * self.k


def layer_plan(config: FcnConfig) -> list[_Layer]:
    k = config.kernel_size
    chans = [config.in_channels, *config.hidden_channels]
    plan = [_Layer(f"enc{i}", "conv", chans[i], chans[i + 1], k, 2) for i in range(len(chans) - 1)]
    for i in reversed(range(len(config.hidden_channels))):
        cout = chans[i] if i > 0 else chans[1]
        plan.append(_Layer(f"dec{i}", "convT", chans[i + 1], cout, k, 2))
    plan.append(_Layer("head", "conv", chans[1], config.num_classes, 1, 1, relu=False))
    return plan


def init_params(config: FcnConfig) -> ParamSet:
    """Uniform(-b, b) weights with ``b = sqrt(1 / fan_in)``, zero biases.

    Layer ``i`` draws from ``SplitMix64(derive_seed(config.seed, i))`` in
    row-major weight order.
    """
    dtype = np.dtype(config.dtype)
    entries = []
    for i, layer in enumerate(layer_plan(config)):
        gen = SplitMix64(derive_seed(config.seed, i))
        n = int(np.prod(layer.weight_shape))
        bound = np.sqrt(1.0 / layer.fan_in)
        w = (2.0 * gen.random_array(n) - 1.0) * bound
        entries.append((f"{layer.name}.weight", w.reshape(layer.weight_shape).astype(dtype)))
        entries.append((f"{layer.name}.bias", np.zeros(layer.cout, dtype=dtype)))
    return ParamSet(entries)


# --------------------------------------------------------------------------
# layers


def _out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _windows(x: np.ndarray, k: int, stride: int, padding: int, out_h: int, out_w: int) -> np.ndarray:
    """Strided k x k patches of the zero-padded input, shape [N, C, out_h, out_w, k, k]."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    return win[:, :, : stride * (out_h - 1) + 1 : stride, : stride * (out_w - 1) + 1 : stride]


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None,
           stride: int = 1, padding: int = 0) -> np.ndarray:
    """Cross-correlation of ``x [N,C,H,W]`` with ``weight [O,C,k,k]``."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects 4-d input and weight")
    n, c, h, w = x.shape
    o, wc, kh, kw = weight.shape
    if wc != c or kh != kw:
        raise ValueError(f"conv2d shape mismatch: input {x.shape}, weight {weight.shape}")
    oh, ow = _out_size(h, kh, stride, padding), _out_size(w, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise ValueError("conv2d output would be empty")
    cols = _windows(x, kh, stride, padding, oh, ow)
    out = np.tensordot(cols, weight, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.reshape(1, o, 1, 1)
    return np.ascontiguousarray(out)


def conv_transpose2d(y: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None,
                     stride: int = 1, padding: int = 0, output_padding: int = 0) -> np.ndarray:
    """Transposed convolution of ``y [N,Ci,h,w]`` with ``weight [Ci,Co,k,k]``.

    Output size is ``(h - 1) * stride - 2 * padding + k + output_padding``.
    """
    if y.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv_transpose2d expects 4-d input and weight")
    n, ci, h, w = y.shape
    wci, co, k, kw = weight.shape
    if wci != ci or k != kw:
        raise ValueError(f"conv_transpose2d shape mismatch: input {y.shape}, weight {weight.shape}")
    if output_padding < 0 or (output_padding and output_padding >= stride):
        raise ValueError("output_padding must be in [0, stride)")
    oh = (h - 1) * stride - 2 * padding + k + output_padding
    ow = (w - 1) * stride - 2 * padding + k + output_padding
    if oh < 1 or ow < 1:
        raise ValueError("conv_transpose2d output would be empty")
    full_h = (h - 1) * stride + k + output_padding
    full_w = (w - 1) * stride + k + output_padding
    buf = np.zeros((n, co, full_h, full_w), dtype=np.result_type(y, weight))
    cols = np.tensordot(y, weight, axes=([1], [0]))  # [N, h, w, Co, k, k]
    cols = cols.transpose(0, 3, 4, 5, 1, 2)  # [N, Co, k, k, h, w]
    span_h, span_w = stride * (h - 1) + 1, stride * (w - 1) + 1
    for i in range(k):
        for j in range(k):
            buf[:, :, i : i + span_h : stride, j : j + span_w : stride] += cols[:, :, i, j]
    out = buf[:, :, padding : padding + oh, padding : padding + ow]
    if bias is not None:
        out = out + bias.reshape(1, co, 1, 1)
    return np.ascontiguousarray(out)


def conv2d_backward(x, weight, grad_out, stride, padding):
    """Gradients of conv2d wrt (input, weight, bias)."""
    k = weight.shape[2]
    oh, ow = grad_out.shape[2:]
    h = x.shape[2]
    w = x.shape[3]
    op_h = h - ((oh - 1) * stride - 2 * padding + k)
    op_w = w - ((ow - 1) * stride - 2 * padding + k)
    gx = _conv_transpose_to(grad_out, weight, stride, padding, (op_h, op_w))
    cols = _windows(x, k, stride, padding, oh, ow)
    gw = np.tensordot(grad_out, cols, axes=([0, 2, 3], [0, 2, 3]))
    gb = grad_out.sum(axis=(0, 2, 3))
    return gx, gw, gb


def _conv_transpose_to(y, weight, stride, padding, op_hw):
    op_h, op_w = op_hw
    if op_h == op_w:
        return conv_transpose2d(y, weight, None, stride, padding, op_h)
    big = conv_transpose2d(y, weight, None, stride, padding, max(op_h, op_w))
    h = big.shape[2] - (max(op_h, op_w) - op_h)
    w = big.shape[3] - (max(op_h, op_w) - op_w)
    return np.ascontiguousarray(big[:, :, :h, :w])


def conv_transpose2d_backward(y, weight, grad_out, stride, padding):
    """Gradients of conv_transpose2d wrt (input, weight, bias)."""
    k = weight.shape[2]
    h, w = y.shape[2:]
    gy = conv2d(grad_out, weight, None, stride, padding)
    cols = _windows(grad_out, k, stride, padding, h, w)
    gw = np.tensordot(y, cols, axes=([0, 2, 3], [0, 2, 3]))
    gb = grad_out.sum(axis=(0, 2, 3))
    return gy, gw, gb


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


# --------------------------------------------------------------------------
# losses


def bce_with_logits(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy from logits and its gradient wrt the logits.

    Uses ``max(x, 0) - x * y + log1p(exp(-|x|))`` so large ``|x|`` never overflows.
    """
    logits = np.asarray(logits)
    targets = np.asarray(targets, dtype=logits.dtype)
    if logits.shape != targets.shape:
        raise ValueError(f"shape mismatch: logits {logits.shape}, targets {targets.shape}")
    count = logits.size
    per = np.maximum(logits, 0) - logits * targets + np.log1p(np.exp(-np.abs(logits)))
    loss = float(per.sum(dtype=np.float64) / count)
    grad = (sigmoid(logits) - targets) / logits.dtype.type(count)
    return loss, grad


def sigmoid(x: np.ndarray) -> np.ndarray:
    # Evaluate exp only on non-positive arguments.
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e))


def sum_losses(named: Sequence[tuple[str, float]]) -> float:
    """Unified loss: plain sum of named partial losses (0.0 when empty)."""
    total = 0.0
    for _, value in named:
        total += value
    return total


# --------------------------------------------------------------------------
# model


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")


def _run(params: ParamSet, config: FcnConfig, batch: np.ndarray):
    dtype = np.dtype(config.dtype)
    x = np.asarray(batch, dtype=dtype)
    if x.ndim != 4 or x.shape[1] != config.in_channels:
        raise ValueError(f"expected batch [N,{config.in_channels},H,W], got {x.shape}")
    s = config.total_stride
    if x.shape[2] % s or x.shape[3] % s:
        raise ValueError(f"H and W must be divisible by {s}")
    sizes = []  # spatial size entering each encoder layer
    tape = []
    for layer in layer_plan(config):
        w = params[f"{layer.name}.weight"]
        b = params[f"{layer.name}.bias"]
        if layer.kind == "conv":
            if layer.name.startswith("enc"):
                sizes.append(x.shape[2:])
            z = conv2d(x, w, b, layer.stride, layer.padding)
        else:
            th, tw = sizes.pop()
            base = (x.shape[2] - 1) * layer.stride - 2 * layer.padding + layer.k
            z = conv_transpose2d(x, w, b, layer.stride, layer.padding, th - base)
        _check_finite(z, f"{layer.name} activations")
        tape.append((layer, x, z))
        x = relu(z) if layer.relu else z
    return x, tape


def forward(params: ParamSet, config: FcnConfig, batch: np.ndarray) -> np.ndarray:
    """Per-pixel class logits ``[N, num_classes, H, W]``."""
    logits, _ = _run(params, config, batch)
    return logits


def predict(params: ParamSet, config: FcnConfig, batch: np.ndarray) -> np.ndarray:
    """Argmax class map ``[N, H, W]``."""
    return forward(params, config, batch).argmax(axis=1)


def loss_value(params: ParamSet, config: FcnConfig, batch) -> float:
    images, targets = batch
    loss, _ = bce_with_logits(forward(params, config, images), targets)
    return loss


def compute_gradients(params: ParamSet, config: FcnConfig, batch) -> tuple[float, ParamSet]:
    """Loss and parameter gradients for ``batch = (images, one-hot targets)``."""
    images, targets = batch
    logits, tape = _run(params, config, images)
    loss, g = bce_with_logits(logits, targets)
    if not np.isfinite(loss):
        raise NumericError("non-finite loss")
    grads: dict[str, np.ndarray] = {}
    for layer, x_in, z in reversed(tape):
        if layer.relu:
            g = relu_backward(z, g)
        w = params[f"{layer.name}.weight"]
        if layer.kind == "conv":
            g, gw, gb = conv2d_backward(x_in, w, g, layer.stride, layer.padding)
        else:
            g, gw, gb = conv_transpose2d_backward(x_in, w, g, layer.stride, layer.padding)
        grads[f"{layer.name}.weight"] = gw.astype(w.dtype, copy=False)
        grads[f"{layer.name}.bias"] = gb.astype(w.dtype, copy=False)
    out = ParamSet((name, grads[name]) for name in params.names)
    for _, arr in out:
        _check_finite(arr, "gradients")
    return loss, out


def sgd_step(params: ParamSet, grads: ParamSet, lr: float) -> ParamSet:
    params.check_compatible(grads)
    return ParamSet(
        (name, p - p.dtype.type(lr) * g) for (name, p), g in zip(params, grads.arrays)
    )


def finite_diff_gradient(params: ParamSet, config: FcnConfig, batch, epsilon: float = 1e-5) -> ParamSet:
    """Central-difference gradient oracle, evaluated in float64."""
    cfg64 = FcnConfig(**{**config.to_dict(), "dtype": "float64"})
    p64 = params.map(lambda a: a.astype(np.float64))
    images, targets = batch
    batch64 = (np.asarray(images, np.float64), np.asarray(targets, np.float64))
    out = []
    for name, arr in p64:
        grad = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = loss_value(p64, cfg64, batch64)
            flat[i] = orig - epsilon
            down = loss_value(p64, cfg64, batch64)
            flat[i] = orig
            gflat[i] = (up - down) / (2 * epsilon)
        out.append((name, grad))
    return ParamSet(out)
