"""Encoder-decoder density regressor composed from nncore ops.

The network is a small UNet: `depth` encoder levels of (conv-relu x2,
maxpool), a bottleneck block, `depth` decoder levels of (nearest-upsample,
concat skip, conv-relu x2), and a linear 1x1 head. Channels double per
level. The forward pass returns an activation cache; the backward pass is
composed explicitly from the op adjoints, no tape.

The head output is an unbounded scaled density; predictions are clamped to
zero and divided by the training density scale only at inference
(`predict_count`), keeping the training loss landscape free of output
nonlinearities.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .density import DensityMap, integrate_count
from .errors import CheckpointError, ConfigError
from .nncore import (
    ParamTensor,
    concat_channels_backward,
    concat_channels_forward,
    conv2d_backward,
    conv2d_forward,
    he_init,
    maxpool2x2_backward,
    maxpool2x2_forward,
    relu_backward,
    relu_forward,
    upsample_nearest2x_backward,
    upsample_nearest2x_forward,
    zeros_init,
)

CHECKPOINT_MAGIC = b"UNCK"
CHECKPOINT_VERSION = 1

DEFAULT_DENSITY_SCALE = 100.0

# std below this is treated as flat input; guards the normalization divide
_STD_FLOOR = 1e-6


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 3
    base_channels: int = 16
    in_channels: int = 1
    kernel_size: int = 3

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.in_channels not in (1, 3):
            raise ConfigError(f"in_channels must be 1 or 3, got {self.in_channels}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd and positive, got {self.kernel_size}")


def _conv_plan(config: UNetConfig) -> list[tuple[str, int, int, int]]:
    """Every conv layer as (name, in_ch, out_ch, kernel) in construction order."""
    k = config.kernel_size
    plan = []
    ch = config.in_channels
    for lvl in range(config.depth):
        out = config.base_channels * (2 ** lvl)
        plan.append((f"enc{lvl}.conv1", ch, out, k))
        plan.append((f"enc{lvl}.conv2", out, out, k))
        ch = out
    out = ch * 2
    plan.append(("bottleneck.conv1", ch, out, k))
    plan.append(("bottleneck.conv2", out, out, k))
    ch = out
    for lvl in reversed(range(config.depth)):
        skip = config.base_channels * (2 ** lvl)
        plan.append((f"dec{lvl}.conv1", ch + skip, skip, k))
        plan.append((f"dec{lvl}.conv2", skip, skip, k))
        ch = skip
    plan.append(("head", ch, 1, 1))
    return plan


def parameter_count(config: UNetConfig) -> int:
    """Total scalar parameter count, a pure function of the config."""
    total = 0
    for _, cin, cout, k in _conv_plan(config):
        total += cout * cin * k * k + cout
    return total


class UNetModel:
    """Config plus ordered parameters and the input-normalization stats.

    norm_mean/norm_std are per-channel statistics of the training split,
    applied as (x - mean) / std before the first conv; scale is the density
    multiplier the targets were scaled by during training.
    """

    def __init__(self, config: UNetConfig, params: list[ParamTensor],
                 norm_mean: np.ndarray, norm_std: np.ndarray,
                 scale: float = DEFAULT_DENSITY_SCALE,
                 meta: dict[str, str] | None = None):
        self.config = config
        self.params = params
        self._by_name = {p.name: p for p in params}
        if len(self._by_name) != len(params):
            raise ConfigError("duplicate parameter names")
        self.norm_mean = np.asarray(norm_mean, dtype=np.float32).reshape(config.in_channels)
        self.norm_std = np.asarray(norm_std, dtype=np.float32).reshape(config.in_channels)
        if float(scale) <= 0:
            raise ConfigError(f"density scale must be positive, got {scale}")
        self.scale = float(scale)
        self.meta = dict(meta or {})

    def param(self, name: str) -> ParamTensor:
        return self._by_name[name]

    def zero_grads(self) -> None:
        for p in self.params:
            p.grad[...] = 0.0


def build_model(config: UNetConfig, seed: int, scale: float = DEFAULT_DENSITY_SCALE) -> UNetModel:
    """He-initialized weights, zero biases, identity normalization."""
    plan = _conv_plan(config)
    seeds = np.random.SeedSequence(seed).generate_state(len(plan))
    params: list[ParamTensor] = []
    for (name, cin, cout, k), s in zip(plan, seeds):
        params.append(ParamTensor(f"{name}.weight", he_init((cout, cin, k, k), seed=int(s))))
        params.append(ParamTensor(f"{name}.bias", zeros_init((cout,))))
    mean = np.zeros(config.in_channels, dtype=np.float32)
    std = np.ones(config.in_channels, dtype=np.float32)
    return UNetModel(config, params, mean, std, scale=scale)


def _block_forward(model, name, x):
    w1, b1 = model.param(f"{name}.conv1.weight"), model.param(f"{name}.conv1.bias")
    w2, b2 = model.param(f"{name}.conv2.weight"), model.param(f"{name}.conv2.bias")
    z1 = conv2d_forward(x, w1.value, b1.value)
    a1 = relu_forward(z1)
    z2 = conv2d_forward(a1, w2.value, b2.value)
    a2 = relu_forward(z2)
    return a2, (x, z1, a1, z2)


def _block_backward(model, name, cache, grad_out):
    x, z1, a1, z2 = cache
    w1, b1 = model.param(f"{name}.conv1.weight"), model.param(f"{name}.conv1.bias")
    w2, b2 = model.param(f"{name}.conv2.weight"), model.param(f"{name}.conv2.bias")
    gz2 = relu_backward(grad_out, z2)
    ga1, gw2, gb2 = conv2d_backward(gz2, a1, w2.value)
    w2.grad += gw2
    b2.grad += gb2
    gz1 = relu_backward(ga1, z1)
    gx, gw1, gb1 = conv2d_backward(gz1, x, w1.value)
    w1.grad += gw1
    b1.grad += gb1
    return gx


def unet_forward(model: UNetModel, images: np.ndarray) -> tuple[np.ndarray, dict]:
    """Map (B,C,H,W) images to (B,1,H,W) scaled densities, caching activations.

    H and W must already be divisible by 2^depth; callers pad with
    pad_to_divisible and crop afterwards.
    """
    cfg = model.config
    if images.ndim != 4 or images.shape[1] != cfg.in_channels:
        raise ConfigError(f"expected (B,{cfg.in_channels},H,W) input, got {images.shape}")
    div = 2 ** cfg.depth
    if images.shape[2] % div or images.shape[3] % div:
        raise ConfigError(f"spatial dims {images.shape[2:]} not divisible by {div}")

    cache: dict = {"enc": [], "masks": [], "dec": []}
    skips: list[np.ndarray] = []
    h = images
    for lvl in range(cfg.depth):
        h, blk = _block_forward(model, f"enc{lvl}", h)
        cache["enc"].append(blk)
        skips.append(h)
        h, mask = maxpool2x2_forward(h)
        cache["masks"].append(mask)
    h, cache["bottleneck"] = _block_forward(model, "bottleneck", h)
    for lvl in reversed(range(cfg.depth)):
        up = upsample_nearest2x_forward(h)
        h = concat_channels_forward(up, skips[lvl])
        h, blk = _block_forward(model, f"dec{lvl}", h)
        cache["dec"].append((blk, up.shape[1]))
    cache["head_in"] = h
    wh, bh = model.param("head.weight"), model.param("head.bias")
    pred = conv2d_forward(h, wh.value, bh.value)
    return pred, cache


def unet_backward(model: UNetModel, cache: dict, grad_pred: np.ndarray) -> np.ndarray:
    """Accumulate parameter gradients for a cached forward; returns grad wrt input."""
    cfg = model.config
    wh, bh = model.param("head.weight"), model.param("head.bias")
    g, gwh, gbh = conv2d_backward(grad_pred, cache["head_in"], wh.value)
    wh.grad += gwh
    bh.grad += gbh

    skip_grads: list[np.ndarray | None] = [None] * cfg.depth
    # decoder caches were appended deepest level last-to-first, i.e. dec order
    # is [depth-1 .. 0]; walk them shallowest-first for the backward sweep
    for pos, lvl in enumerate(range(cfg.depth)):
        blk, up_channels = cache["dec"][cfg.depth - 1 - pos]
        g = _block_backward(model, f"dec{lvl}", blk, g)
        g_up, g_skip = concat_channels_backward(g, up_channels)
        skip_grads[lvl] = g_skip
        g = upsample_nearest2x_backward(g_up)

    g = _block_backward(model, "bottleneck", cache["bottleneck"], g)

    for lvl in reversed(range(cfg.depth)):
        g = maxpool2x2_backward(g, cache["masks"][lvl])
        # the skip tap and the pooling path both consume the block output, so
        # their gradients add before the block adjoint
        g = g + skip_grads[lvl]
        g = _block_backward(model, f"enc{lvl}", cache["enc"][lvl], g)
    return g


def normalize_images(model: UNetModel, images: np.ndarray) -> np.ndarray:
    """Per-channel (x - mean) / std with the model's stored statistics."""
    mean = model.norm_mean.reshape(1, -1, 1, 1)
    std = np.maximum(model.norm_std, _STD_FLOOR).reshape(1, -1, 1, 1)
    return ((images - mean) / std).astype(images.dtype, copy=False)


def compute_norm_stats(images: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std over every pixel of the given (C,H,W) images."""
    if not images:
        raise ConfigError("cannot compute normalization stats from an empty set")
    channels = images[0].shape[0]
    total = np.zeros(channels, dtype=np.float64)
    total_sq = np.zeros(channels, dtype=np.float64)
    count = 0
    for img in images:
        flat = img.reshape(channels, -1).astype(np.float64)
        total += flat.sum(axis=1)
        total_sq += (flat * flat).sum(axis=1)
        count += flat.shape[1]
    mean = total / count
    var = np.maximum(total_sq / count - mean * mean, 0.0)
    std = np.maximum(np.sqrt(var), _STD_FLOOR)
    return mean.astype(np.float32), std.astype(np.float32)


def pad_to_divisible(images: np.ndarray, divisor: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Reflect-pad bottom/right so H and W divide by divisor; returns original size."""
    h, w = images.shape[-2:]
    ph = (-h) % divisor
    pw = (-w) % divisor
    out = images
    # reflect can only extend by size-1 per application; loop covers tiny inputs
    while ph or pw:
        ch, cw = out.shape[-2:]
        sh = min(ph, ch - 1) if ch > 1 else 0
        sw = min(pw, cw - 1) if cw > 1 else 0
        mode = "reflect"
        if sh == 0 and ph:
            sh, mode = ph, "edge"
        if sw == 0 and pw:
            sw, mode = pw, "edge"
        pad = [(0, 0)] * (out.ndim - 2) + [(0, sh), (0, sw)]
        out = np.pad(out, pad, mode=mode)
        ph -= sh
        pw -= sw
    return out, (h, w)


def crop_to(images: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    return images[..., : size[0], : size[1]]


def predict_density(model: UNetModel, image: np.ndarray) -> np.ndarray:
    """Raw image (C,H,W) or (H,W) -> clamped, descaled density (H,W) float32."""
    if image.ndim == 2:
        image = image[None]
    if image.ndim != 3 or image.shape[0] != model.config.in_channels:
        raise ConfigError(f"expected ({model.config.in_channels},H,W) image, got {image.shape}")
    x = normalize_images(model, image[None].astype(np.float32))
    x, orig = pad_to_divisible(x, 2 ** model.config.depth)
    pred, _ = unet_forward(model, x)
    dm = crop_to(pred, orig)[0, 0]
    dm = np.maximum(dm, 0.0) / np.float32(model.scale)
    return dm.astype(np.float32)


def predict_count(model: UNetModel, image: np.ndarray) -> tuple[float, DensityMap]:
    """Predicted object count plus the predicted density map for one image."""
    values = predict_density(model, image)
    dm = DensityMap(width=values.shape[1], height=values.shape[0], values=values)
    return integrate_count(dm), dm


# --- checkpoint serialization -------------------------------------------------

_ARCH_KEYS = ("base_channels", "depth", "in_channels", "kernel_size")


def _config_record(model: UNetModel) -> bytes:
    fields = {
        "base_channels": str(model.config.base_channels),
        "depth": str(model.config.depth),
        "in_channels": str(model.config.in_channels),
        "kernel_size": str(model.config.kernel_size),
        "scale": repr(model.scale),
    }
    for key, val in model.meta.items():
        if key in fields:
            raise CheckpointError(f"meta key {key!r} collides with a config field")
        fields[key] = str(val)
    lines = "".join(f"{k}={fields[k]}\n" for k in sorted(fields))
    return lines.encode("utf-8")


def _parse_config_record(blob: bytes) -> tuple[UNetConfig, float, dict[str, str]]:
    fields: dict[str, str] = {}
    for ln, line in enumerate(blob.decode("utf-8").splitlines(), start=1):
        if "=" not in line:
            raise CheckpointError(f"config record line {ln} is not key=value: {line!r}")
        key, _, val = line.partition("=")
        if key in fields:
            raise CheckpointError(f"config record repeats key {key!r}")
        fields[key] = val
    try:
        config = UNetConfig(
            depth=int(fields.pop("depth")),
            base_channels=int(fields.pop("base_channels")),
            in_channels=int(fields.pop("in_channels")),
            kernel_size=int(fields.pop("kernel_size")),
        )
        scale = float(fields.pop("scale"))
    except KeyError as exc:
        raise CheckpointError(f"config record missing key {exc.args[0]!r}") from None
    except (ValueError, ConfigError) as exc:
        raise CheckpointError(f"bad config record: {exc}") from None
    return config, scale, fields


def save_checkpoint(model: UNetModel, sink) -> None:
    """Write the UNCK v1 binary checkpoint to a path or binary file object."""
    if hasattr(sink, "write"):
        _write_checkpoint(model, sink)
    else:
        with open(sink, "wb") as fh:
            _write_checkpoint(model, fh)


def _write_checkpoint(model: UNetModel, fh) -> None:
    fh.write(CHECKPOINT_MAGIC)
    fh.write(struct.pack("<B", CHECKPOINT_VERSION))
    record = _config_record(model)
    fh.write(struct.pack("<I", len(record)))
    fh.write(record)
    fh.write(struct.pack("<I", model.config.in_channels))
    fh.write(model.norm_mean.astype("<f4").tobytes())
    fh.write(model.norm_std.astype("<f4").tobytes())
    for p in model.params:
        name = p.name.encode("utf-8")
        fh.write(struct.pack("<I", len(name)))
        fh.write(name)
        fh.write(struct.pack("<B", p.value.ndim))
        fh.write(struct.pack(f"<{p.value.ndim}I", *p.value.shape))
        fh.write(np.ascontiguousarray(p.value, dtype="<f4").tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(source, expected_config: UNetConfig | None = None) -> UNetModel:
    """Read a UNCK checkpoint, auditing every parameter shape against the config.

    expected_config, when given, must equal the stored architecture; a
    mismatch is reported before any tensor is read.
    """
    if hasattr(source, "read"):
        return _read_checkpoint(source, expected_config)
    with open(source, "rb") as fh:
        return _read_checkpoint(fh, expected_config)


def _read_checkpoint(fh, expected_config: UNetConfig | None) -> UNetModel:
    magic = _read_exact(fh, 4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    (version,) = struct.unpack("<B", _read_exact(fh, 1, "version"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (rec_len,) = struct.unpack("<I", _read_exact(fh, 4, "config record length"))
    config, scale, meta = _parse_config_record(_read_exact(fh, rec_len, "config record"))
    if expected_config is not None and expected_config != config:
        raise CheckpointError(
            f"checkpoint architecture {config} does not match expected {expected_config}")
    (channels,) = struct.unpack("<I", _read_exact(fh, 4, "normalization channel count"))
    if channels != config.in_channels:
        raise CheckpointError(
            f"normalization stats for {channels} channels, config has {config.in_channels}")
    mean = np.frombuffer(_read_exact(fh, 4 * channels, "normalization means"), dtype="<f4").copy()
    std = np.frombuffer(_read_exact(fh, 4 * channels, "normalization stds"), dtype="<f4").copy()

    params: list[ParamTensor] = []
    for layer, cin, cout, k in _conv_plan(config):
        for suffix, shape in ((f"{layer}.weight", (cout, cin, k, k)), (f"{layer}.bias", (cout,))):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, f"name length of {suffix}"))
            name = _read_exact(fh, name_len, f"name of {suffix}").decode("utf-8")
            if name != suffix:
                raise CheckpointError(f"expected parameter {suffix!r}, found {name!r}")
            (rank,) = struct.unpack("<B", _read_exact(fh, 1, f"rank of {name}"))
            if rank != len(shape):
                raise CheckpointError(f"parameter {name}: rank {rank}, expected {len(shape)}")
            extents = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, f"extents of {name}"))
            if extents != shape:
                raise CheckpointError(f"parameter {name}: shape {extents}, expected {shape}")
            size = int(np.prod(shape))
            payload = _read_exact(fh, 4 * size, f"values of {name}")
            value = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
            if not np.isfinite(value).all():
                raise CheckpointError(f"parameter {name} contains non-finite values")
            params.append(ParamTensor(name, value))
    trailing = fh.read(1)
    if trailing:
        raise CheckpointError("trailing data after the last parameter")
    return UNetModel(config, params, mean, std, scale=scale, meta=meta)
