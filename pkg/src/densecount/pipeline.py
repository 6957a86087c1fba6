"""Dataset assembly, the training loop, and count-level evaluation.

A dataset item is a pair (image, truth): image as a (C,H,W) float32 array
in [0,1], truth as an AnnotatedImage whose dots give the integer count.
Training regresses scaled ground-truth density patches under an RMSE loss;
evaluation always runs on full images so each object is integrated exactly
once, and scores predicted counts against dot-list cardinality.
"""

from __future__ import annotations

import copy
import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .annotations import AnnotatedImage, parse_dot_csv
from .density import DensityMap, KernelSpec, adaptive_density_map, gaussian_density_map, integrate_count
from .errors import ConfigError, TrainingDivergedError, ValidationError
from .nncore import adam_step, rmse_loss
from .unet import (
    UNetConfig,
    UNetModel,
    build_model,
    compute_norm_stats,
    normalize_images,
    predict_count,
    unet_backward,
    unet_forward,
)


@dataclass(frozen=True)
class SplitSpec:
    """Fractional train/val/test partition with a shuffle seed."""

    train_fraction: float = 0.8
    val_fraction: float = 0.1
    test_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        fracs = (self.train_fraction, self.val_fraction, self.test_fraction)
        if any(f < 0 for f in fracs):
            raise ConfigError(f"split fractions must be non-negative, got {fracs}")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions sum to {sum(fracs)!r}, expected 1")


def make_splits(images: list[AnnotatedImage], spec: SplitSpec):
    """Seeded shuffle, then largest-remainder partition into three disjoint lists."""
    paths = [img.image_path for img in images]
    if len(set(paths)) != len(paths):
        raise ValidationError("duplicate image_path entries cannot be split disjointly")
    order = np.random.default_rng(spec.seed).permutation(len(images))
    shuffled = [images[i] for i in order]
    n = len(images)
    fracs = (spec.train_fraction, spec.val_fraction, spec.test_fraction)
    raw = [f * n for f in fracs]
    sizes = [int(math.floor(r)) for r in raw]
    leftover = n - sum(sizes)
    by_remainder = sorted(range(3), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in range(leftover):
        sizes[by_remainder[i % 3]] += 1
    train = shuffled[: sizes[0]]
    val = shuffled[sizes[0] : sizes[0] + sizes[1]]
    test = shuffled[sizes[0] + sizes[1] :]
    return train, val, test


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    patch_size: int = 64
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    kernel: KernelSpec = field(default_factory=KernelSpec.constant)
    scale: float = 100.0
    seed: int = 0
    patience: int | None = None
    patches_per_image: int = 4
    object_biased: bool = False
    flip_augment: bool = False

    def __post_init__(self):
        for name in ("batch_size", "patch_size", "learning_rate", "scale", "patches_per_image"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.patience is not None and self.patience < 1:
            raise ConfigError(f"patience must be >= 1 or None, got {self.patience}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    train_loss: float
    val_rmse: float
    val_mae: float


def ground_truth_map(truth: AnnotatedImage, kernel: KernelSpec) -> DensityMap:
    if kernel.mode == "adaptive":
        return adaptive_density_map(truth, kernel)
    return gaussian_density_map(truth, kernel)


def sample_patches(image: np.ndarray, dm: DensityMap, patch_size: int, count: int,
                   seed, dots: tuple | None = None, object_biased: bool = False):
    """Crop (image patch, density patch) pairs at random valid offsets.

    The density patch is the exact sub-grid of the full-image map, so its
    mass can be fractional when kernels straddle the crop boundary. With
    object_biased, every other patch is placed to contain a random dot
    (when any exist). seed may be an int or a Generator.
    """
    h, w = dm.values.shape
    if image.shape[-2:] != (h, w):
        raise ConfigError(f"image {image.shape[-2:]} and density map {(h, w)} disagree")
    if patch_size > h or patch_size > w:
        raise ConfigError(f"patch size {patch_size} exceeds image {h}x{w}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = []
    for j in range(count):
        if object_biased and dots and j % 2 == 0:
            dot = dots[int(rng.integers(len(dots)))]
            cx = min(int(math.floor(dot.x)), w - 1)
            cy = min(int(math.floor(dot.y)), h - 1)
            ox = int(rng.integers(max(0, cx - patch_size + 1), min(w - patch_size, cx) + 1))
            oy = int(rng.integers(max(0, cy - patch_size + 1), min(h - patch_size, cy) + 1))
        else:
            ox = int(rng.integers(0, w - patch_size + 1))
            oy = int(rng.integers(0, h - patch_size + 1))
        out.append((image[..., oy : oy + patch_size, ox : ox + patch_size],
                    dm.values[oy : oy + patch_size, ox : ox + patch_size]))
    return out


def _snapshot(model: UNetModel):
    return [p.value.copy() for p in model.params]


def _restore(model: UNetModel, snap) -> None:
    for p, v in zip(model.params, snap):
        p.value[...] = v


def train(train_set, val_set, config: TrainConfig,
          model_config: UNetConfig | None = None, on_epoch=None):
    """Minibatch Adam on RMSE against scale * ground-truth density patches.

    Per epoch: sample patches_per_image crops from every training image,
    shuffle, step over batches, then score count MAE/RMSE on the full val
    images. Keeps the parameters of the best-val-MAE epoch and stops early
    after `patience` epochs without improvement. Deterministic from
    config.seed. on_epoch, when given, is called with each EpochLog.
    Returns (model, list of EpochLog).
    """
    if not train_set:
        raise ConfigError("training set is empty")
    model_config = model_config or UNetConfig()
    if config.patch_size % (2 ** model_config.depth):
        raise ConfigError(
            f"patch_size {config.patch_size} not divisible by 2^depth = {2 ** model_config.depth}")

    model = build_model(model_config, seed=config.seed, scale=config.scale)
    mean, std = compute_norm_stats([img for img, _ in train_set])
    model.norm_mean = mean
    model.norm_std = std

    gt_maps = [ground_truth_map(truth, config.kernel) for _, truth in train_set]

    logs: list[EpochLog] = []
    best_mae = math.inf
    best_snap = None
    stale = 0
    step = 0
    for epoch in range(1, config.epochs + 1):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, epoch]))
        patches = []
        for (img, truth), dm in zip(train_set, gt_maps):
            patches.extend(sample_patches(img, dm, config.patch_size, config.patches_per_image,
                                          rng, dots=truth.dots, object_biased=config.object_biased))
        order = rng.permutation(len(patches))

        loss_total = 0.0
        batches = 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            xs = np.stack([patches[i][0] for i in idx]).astype(np.float32)
            ys = np.stack([patches[i][1] for i in idx])[:, None].astype(np.float32)
            if config.flip_augment:
                for b in range(xs.shape[0]):
                    if rng.integers(2):
                        xs[b] = xs[b, :, :, ::-1]
                        ys[b] = ys[b, :, :, ::-1]
                    if rng.integers(2):
                        xs[b] = xs[b, :, ::-1, :]
                        ys[b] = ys[b, :, ::-1, :]
            step += 1
            pred, cache = unet_forward(model, normalize_images(model, xs))
            loss, grad = rmse_loss(pred, np.float32(config.scale) * ys)
            if not math.isfinite(loss):
                raise TrainingDivergedError(
                    f"loss is {loss} at epoch {epoch}, step {step}")
            model.zero_grads()
            unet_backward(model, cache, grad)
            adam_step(model.params, lr=config.learning_rate, beta1=config.beta1,
                      beta2=config.beta2, t=step)
            loss_total += loss
            batches += 1

        if val_set:
            val_report = evaluate(model, val_set)
            val_rmse, val_mae = val_report.rmse, val_report.mae
        else:
            val_rmse = val_mae = float("nan")
        logs.append(EpochLog(epoch, loss_total / max(batches, 1), val_rmse, val_mae))
        if on_epoch is not None:
            on_epoch(logs[-1])

        if val_set:
            if val_mae < best_mae:
                best_mae = val_mae
                best_snap = _snapshot(model)
                stale = 0
            else:
                stale += 1
                if config.patience is not None and stale >= config.patience:
                    break
    if best_snap is not None:
        _restore(model, best_snap)
    return model, logs


@dataclass(frozen=True)
class CountRecord:
    image: str
    y: float
    y_hat: float


@dataclass(frozen=True)
class MetricsReport:
    """Per-image counts with their RMSE/MAE aggregates (power means, so mae <= rmse)."""

    records: tuple[CountRecord, ...]
    rmse: float
    mae: float
    config_fingerprint: str = ""

    @staticmethod
    def from_records(records, config_fingerprint: str = "") -> "MetricsReport":
        records = tuple(records)
        if not records:
            raise ValidationError("no records")
        err = np.array([r.y_hat - r.y for r in records], dtype=np.float64)
        rmse = float(np.sqrt(np.mean(err * err)))
        mae = float(np.mean(np.abs(err)))
        return MetricsReport(records, rmse, mae, config_fingerprint)

    def to_json(self) -> str:
        payload = {
            "records": [{"image": r.image, "y": r.y, "y_hat": r.y_hat} for r in self.records],
            "rmse": self.rmse,
            "mae": self.mae,
            "config_fingerprint": self.config_fingerprint,
        }
        return json.dumps(payload, indent=2, sort_keys=True)


def evaluate(model: UNetModel | None, test_set, kernel: KernelSpec | None = None,
             oracle: bool = False, config_fingerprint: str = "") -> MetricsReport:
    """Score predicted counts against dot-list cardinality, in input order.

    oracle mode integrates the ground-truth density map instead of running
    the model, which bounds everything downstream of annotation parsing.
    """
    records = []
    for image, truth in test_set:
        if oracle:
            if kernel is None:
                raise ConfigError("oracle evaluation needs a kernel spec")
            y_hat = integrate_count(ground_truth_map(truth, kernel))
        else:
            if model is None:
                raise ConfigError("evaluation without a model requires oracle mode")
            y_hat, _ = predict_count(model, image)
        records.append(CountRecord(truth.image_path, float(truth.count), float(y_hat)))
    return MetricsReport.from_records(records, config_fingerprint)


def compare_report(report: MetricsReport, references: dict[str, tuple[float, float]] | None = None) -> str:
    """Render the report beside optional named (rmse, mae) reference rows."""
    if not report.records:
        raise ValidationError("no records")
    lines = []
    if references:
        lines.append(f"{'source':<16} {'rmse':>8} {'mae':>8} {'d_rmse':>8} {'d_mae':>8}")
        lines.append(f"{'this run':<16} {report.rmse:>8.3f} {report.mae:>8.3f} {'':>8} {'':>8}")
        for name in sorted(references):
            ref_rmse, ref_mae = references[name]
            lines.append(
                f"{name:<16} {ref_rmse:>8.3f} {ref_mae:>8.3f} "
                f"{report.rmse - ref_rmse:>+8.3f} {report.mae - ref_mae:>+8.3f}")
    else:
        lines.append(f"{'source':<16} {'rmse':>8} {'mae':>8}")
        lines.append(f"{'this run':<16} {report.rmse:>8.3f} {report.mae:>8.3f}")
    lines.append(f"images: {len(report.records)}")
    return "\n".join(lines)


def write_training_log(logs: list[EpochLog], stream, config_fingerprint: str = "") -> None:
    """CSV with one row per epoch; the fingerprint rides in a leading comment."""
    if config_fingerprint:
        stream.write(f"# config_fingerprint={config_fingerprint}\n")
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["epoch", "train_loss", "val_rmse", "val_mae"])
    for row in logs:
        writer.writerow([row.epoch, repr(row.train_loss), repr(row.val_rmse), repr(row.val_mae)])


def load_image(path, channels: int = 1) -> np.ndarray:
    """Read an image file into a (C,H,W) float32 array scaled to [0,1]."""
    if channels not in (1, 3):
        raise ConfigError(f"channels must be 1 or 3, got {channels}")
    with Image.open(path) as img:
        img = img.convert("L" if channels == 1 else "RGB")
        arr = np.asarray(img, dtype=np.float32) / 255.0
    if channels == 1:
        return arr[None]
    return arr.transpose(2, 0, 1)


def load_dataset(root, csv_name: str = "dots.csv", channels: int = 1):
    """Read a dataset directory (dot CSV + images) into (image, truth) pairs."""
    from pathlib import Path

    root = Path(root)
    csv_path = root / csv_name
    if not csv_path.is_file():
        raise ValidationError(f"annotation file not found: {csv_path}")
    with open(csv_path, newline="") as fh:
        annotated = parse_dot_csv(fh)
    return [(load_image(root / a.image_path, channels=channels), a) for a in annotated]
