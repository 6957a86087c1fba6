"""Minimal differentiable tensor ops for the density regressor.

Arrays are plain numpy ndarrays in NCHW layout. Training runs in float32;
every op preserves the dtype it is given, so gradient checks can run the
identical code in float64. Scalar reductions (loss, counts) always
accumulate in 64-bit. Convolution is cross-correlation (no kernel flip),
stride 1, zero-padded to keep the spatial size.

Each forward op has a hand-written adjoint; the network composes them
explicitly, there is no autodiff tape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class ParamTensor:
    """A named parameter with its gradient and Adam moment buffers."""

    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None)  # type: ignore[assignment]
    adam_m: np.ndarray = field(default=None)  # type: ignore[assignment]
    adam_v: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.adam_m is None:
            self.adam_m = np.zeros_like(self.value)
        if self.adam_v is None:
            self.adam_v = np.zeros_like(self.value)
        for buf, label in ((self.grad, "grad"), (self.adam_m, "adam_m"), (self.adam_v, "adam_v")):
            if buf.shape != self.value.shape:
                raise ValueError(f"{self.name}: {label} shape {buf.shape} != value shape {self.value.shape}")


def _check_conv_shapes(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None) -> None:
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.ndim}-D and {weight.ndim}-D")
    cout, cin, kh, kw = weight.shape
    if x.shape[1] != cin:
        raise ValueError(f"conv2d: input has {x.shape[1]} channels, weight expects {cin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel must be odd-sized, got {kh}x{kw}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {bias.shape}, expected ({cout},)")


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Zero-pad for 'same' output and unfold into (B*H*W, C*kh*kw) patches."""
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2)))
    s0, s1, s2, s3 = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp, shape=(b, c, kh, kw, h, w), strides=(s0, s1, s2, s3, s2, s3), writeable=False
    )
    return windows.transpose(0, 4, 5, 1, 2, 3).reshape(b * h * w, c * kh * kw)


def conv2d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Stride-1 same-padded cross-correlation: (B,Cin,H,W) -> (B,Cout,H,W)."""
    _check_conv_shapes(x, weight, bias)
    b, _, h, w = x.shape
    cout = weight.shape[0]
    cols = _im2col(x, weight.shape[2], weight.shape[3])
    out = cols @ weight.reshape(cout, -1).T
    out += bias
    return out.reshape(b, h, w, cout).transpose(0, 3, 1, 2)


def conv2d_backward(grad_out: np.ndarray, x: np.ndarray,
                    weight: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Adjoint of conv2d_forward: gradients for input, weight, and bias."""
    _check_conv_shapes(x, weight, None)
    if grad_out.shape != (x.shape[0], weight.shape[0], x.shape[2], x.shape[3]):
        raise ValueError(f"conv2d_backward: grad_out shape {grad_out.shape} inconsistent with forward")
    cout, cin, kh, kw = weight.shape
    b, _, h, w = x.shape

    grad_bias = grad_out.sum(axis=(0, 2, 3))

    cols = _im2col(x, kh, kw)
    go_flat = grad_out.transpose(0, 2, 3, 1).reshape(b * h * w, cout)
    grad_weight = (go_flat.T @ cols).reshape(cout, cin, kh, kw)

    # input gradient is the same-padded cross-correlation of grad_out with the
    # 180-degree-rotated kernel, in/out channels swapped
    w_rot = weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    go_cols = _im2col(grad_out, kh, kw)
    grad_input = (go_cols @ w_rot.reshape(cin, -1).T).reshape(b, h, w, cin).transpose(0, 3, 1, 2)
    return grad_input, grad_weight, grad_bias


def maxpool2x2_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping 2x2 max pool; returns (output, argmax mask).

    Ties route to the first maximal element in row-major order within the
    window, which the mask records for the backward pass.
    """
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    blocks = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        b, c, h // 2, w // 2, 4)
    mask = blocks.argmax(axis=-1)  # first max wins on ties
    out = np.take_along_axis(blocks, mask[..., None], axis=-1)[..., 0]
    return out, mask


def maxpool2x2_backward(grad_out: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Route each output gradient to the recorded argmax position."""
    if grad_out.shape != mask.shape:
        raise ValueError(f"maxpool2x2_backward: grad {grad_out.shape} vs mask {mask.shape}")
    b, c, oh, ow = grad_out.shape
    blocks = np.zeros((b, c, oh, ow, 4), dtype=grad_out.dtype)
    np.put_along_axis(blocks, mask[..., None], grad_out[..., None], axis=-1)
    return blocks.reshape(b, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        b, c, 2 * oh, 2 * ow)


def upsample_nearest2x_forward(x: np.ndarray) -> np.ndarray:
    """Replicate every pixel into a 2x2 block."""
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample_nearest2x_backward(grad_out: np.ndarray) -> np.ndarray:
    """Adjoint of replication: sum each 2x2 block."""
    b, c, h, w = grad_out.shape
    if h % 2 or w % 2:
        raise ValueError(f"upsample backward needs even spatial dims, got {h}x{w}")
    return grad_out.reshape(b, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    # subgradient at 0 is 0
    return grad_out * (x > 0)


def concat_channels_forward(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"concat_channels: incompatible shapes {a.shape} and {b.shape}")
    return np.concatenate([a, b], axis=1)


def concat_channels_backward(grad_out: np.ndarray, a_channels: int) -> tuple[np.ndarray, np.ndarray]:
    return grad_out[:, :a_channels], grad_out[:, a_channels:]


def rmse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Root-mean-square error over all elements, with its gradient in pred.

    loss = sqrt(mean((pred - target)^2)) with the mean over every element in
    the batch; grad = (pred - target) / (N * loss), zero when the loss is 0.
    The reduction accumulates in float64 regardless of input dtype.
    """
    if pred.shape != target.shape:
        raise ValueError(f"rmse_loss: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.astype(np.float64) - target.astype(np.float64)
    n = diff.size
    loss = math.sqrt(float(np.mean(diff * diff)))
    if loss == 0.0:
        return 0.0, np.zeros_like(pred)
    grad = (diff / (n * loss)).astype(pred.dtype)
    return loss, grad


def adam_step(params: list[ParamTensor], lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8, t: int = 1) -> None:
    """One bias-corrected Adam update from each parameter's .grad, in place.

    t is the 1-based step index used for bias correction.
    """
    if t < 1:
        raise ValueError(f"adam_step: t must be >= 1, got {t}")
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for p in params:
        g = p.grad
        p.adam_m *= beta1
        p.adam_m += (1.0 - beta1) * g
        p.adam_v *= beta2
        p.adam_v += (1.0 - beta2) * (g * g)
        m_hat = p.adam_m / bc1
        v_hat = p.adam_v / bc2
        p.value -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.value.dtype)


def he_init(shape: tuple[int, ...], seed: int, fan_in: int | None = None,
            dtype=np.float32) -> np.ndarray:
    """Zero-mean Gaussian with variance 2/fan_in; fan_in defaults to prod(shape[1:])."""
    if fan_in is None:
        fan_in = int(np.prod(shape[1:]))
    if fan_in <= 0:
        raise ValueError(f"he_init: fan_in must be positive, got {fan_in}")
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape).astype(dtype)


def zeros_init(shape: tuple[int, ...], dtype=np.float32) -> np.ndarray:
    """Bias initializer: all zeros."""
    return np.zeros(shape, dtype=dtype)
