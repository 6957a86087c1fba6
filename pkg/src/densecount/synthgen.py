"""Reproducible synthetic aerial-like scenes with exact dot ground truth.

Scenes composite soft-edged ellipses (the "animals") over a flat, gradient,
or speckle background, optionally washed by a bright glare blotch. The
returned dot list is exactly the ellipse centers, so generated datasets
carry perfect annotations by construction. Every scene is a pure function
of (spec.seed, index): generation order and parallelism cannot change
pixels.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import partial
from pathlib import Path

import numpy as np
from PIL import Image

from .annotations import AnnotatedImage, DotAnnotation, write_dot_csv
from .errors import ConfigError

BACKGROUND_MODES = ("flat", "gradient", "speckle")

_REJECTION_LIMIT = 10_000


@dataclass(frozen=True)
class SceneSpec:
    width: int = 128
    height: int = 128
    count_min: int = 0
    count_max: int = 10
    radius_min: float = 3.0
    radius_max: float = 6.0
    background: str = "speckle"
    glare_probability: float = 0.3
    glare_intensity: float = 0.35
    min_separation: float = 8.0
    seed: int = 42

    def __post_init__(self):
        if self.width < 8 or self.height < 8:
            raise ConfigError(f"scene size {self.width}x{self.height} too small")
        if not 0 <= self.count_min <= self.count_max:
            raise ConfigError(f"bad count range [{self.count_min}, {self.count_max}]")
        if not 0 < self.radius_min <= self.radius_max:
            raise ConfigError(f"bad radius range [{self.radius_min}, {self.radius_max}]")
        if self.background not in BACKGROUND_MODES:
            raise ConfigError(f"background must be one of {BACKGROUND_MODES}, got {self.background!r}")
        if self.min_separation < 0:
            raise ConfigError(f"min_separation must be >= 0, got {self.min_separation}")
        if not 0 <= self.glare_probability <= 1:
            raise ConfigError(f"glare_probability must lie in [0, 1], got {self.glare_probability}")
        # crude feasibility bound: disjoint separation disks must fit the frame
        if self.count_max > 0 and self.min_separation > 0:
            area = self.width * self.height
            disks = self.count_max * math.pi * (self.min_separation / 2) ** 2
            if disks > area:
                raise ConfigError(
                    f"{self.count_max} objects at separation {self.min_separation} "
                    f"cannot fit a {self.width}x{self.height} scene")


def _background(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.height, spec.width
    level = rng.uniform(0.3, 0.6)
    if spec.background == "flat":
        return np.full((h, w), level, dtype=np.float64)
    ys, xs = np.mgrid[0:h, 0:w]
    if spec.background == "gradient":
        theta = rng.uniform(0, 2 * math.pi)
        span = rng.uniform(0.1, 0.3) * rng.choice([-1.0, 1.0])
        t = (xs * math.cos(theta) + ys * math.sin(theta)) / max(h, w)
        t = (t - t.min()) / max(t.max() - t.min(), 1e-12)
        return level + span * (t - 0.5)
    # speckle: flat base, a low-frequency ripple, and per-pixel noise
    fx, fy = rng.uniform(0.02, 0.08, size=2)
    phase = rng.uniform(0, 2 * math.pi)
    ripple = rng.uniform(0.01, 0.04) * np.sin(2 * math.pi * (fx * xs + fy * ys) + phase)
    noise = rng.normal(0.0, rng.uniform(0.01, 0.03), size=(h, w))
    return level + ripple + noise


def _stamp_ellipse(canvas: np.ndarray, cx: float, cy: float, a: float, b: float,
                   phi: float, delta: float, soft: float) -> None:
    """Add a soft-edged ellipse of amplitude delta; soft is the edge half-width
    as a fraction of the normalized radius."""
    h, w = canvas.shape
    reach = a * (1 + soft) + 1
    x_lo, x_hi = max(0, int(cx - reach)), min(w - 1, int(cx + reach) + 1)
    y_lo, y_hi = max(0, int(cy - reach)), min(h - 1, int(cy + reach) + 1)
    if x_lo > x_hi or y_lo > y_hi:
        return
    ys, xs = np.mgrid[y_lo : y_hi + 1, x_lo : x_hi + 1]
    dx = xs - cx
    dy = ys - cy
    u = dx * math.cos(phi) + dy * math.sin(phi)
    v = -dx * math.sin(phi) + dy * math.cos(phi)
    rho = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    alpha = np.clip(0.5 + (1.0 - rho) / (2 * soft), 0.0, 1.0)
    canvas[y_lo : y_hi + 1, x_lo : x_hi + 1] += delta * alpha


def generate_scene(spec: SceneSpec, index: int) -> tuple[np.ndarray, AnnotatedImage]:
    """One deterministic scene: (H,W) float32 image in [0,1] plus its truth."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, index]))
    n = int(rng.integers(spec.count_min, spec.count_max + 1))
    canvas = _background(spec, rng)

    centers: list[tuple[float, float]] = []
    dots: list[DotAnnotation] = []
    for _ in range(n):
        for attempt in range(_REJECTION_LIMIT):
            cx = rng.uniform(1.0, spec.width - 1.0)
            cy = rng.uniform(1.0, spec.height - 1.0)
            if all((cx - px) ** 2 + (cy - py) ** 2 >= spec.min_separation ** 2
                   for px, py in centers):
                break
        else:
            raise ConfigError(
                f"could not place object {len(centers) + 1} of {n} after "
                f"{_REJECTION_LIMIT} attempts; separation {spec.min_separation} "
                f"is infeasible for this spec")
        centers.append((cx, cy))
        a = rng.uniform(spec.radius_min, spec.radius_max)
        b = a * rng.uniform(0.5, 0.9)
        phi = rng.uniform(0, math.pi)
        delta = rng.uniform(0.3, 0.7) * (1.0 if rng.integers(2) else -1.0)
        _stamp_ellipse(canvas, cx, cy, a, b, phi, delta, soft=0.35)
        dots.append(DotAnnotation(cx, cy))

    if rng.uniform() < spec.glare_probability:
        gx = rng.uniform(0, spec.width)
        gy = rng.uniform(0, spec.height)
        ga = rng.uniform(spec.width * 0.1, spec.width * 0.3)
        gb = ga * rng.uniform(0.6, 1.0)
        gphi = rng.uniform(0, math.pi)
        _stamp_ellipse(canvas, gx, gy, ga, gb, gphi, spec.glare_intensity, soft=0.8)

    image = np.clip(canvas, 0.0, 1.0).astype(np.float32)
    truth = AnnotatedImage(
        image_path=f"img_{index:05d}.png",
        width=spec.width,
        height=spec.height,
        dots=tuple(dots),
    )
    return image, truth


def save_scene_png(image: np.ndarray, path) -> None:
    """Quantize a [0,1] float image to 8-bit grayscale PNG."""
    data = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path)


def generate_dataset(spec: SceneSpec, size: int, out_dir, jobs: int = 1) -> list[AnnotatedImage]:
    """Write `size` PNG scenes plus a dots.csv into out_dir; returns the truths.

    Scenes are keyed by index, so jobs > 1 changes wall time only.
    """
    if size < 0:
        raise ConfigError(f"size must be >= 0, got {size}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if jobs > 1 and size > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            scenes = list(pool.map(partial(generate_scene, spec), range(size), chunksize=8))
    else:
        scenes = [generate_scene(spec, i) for i in range(size)]
    truths = []
    for image, truth in scenes:
        save_scene_png(image, out_dir / truth.image_path)
        truths.append(truth)
    with open(out_dir / "dots.csv", "w", newline="") as fh:
        write_dot_csv(truths, fh)
    return truths
