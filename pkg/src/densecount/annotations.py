"""Dot and box annotations for counting imagery.

Coordinate convention: x is the column, y the row, origin at the top-left,
pixel centers at integer coordinates. Image bounds are half-open, so a legal
dot satisfies 0 <= x < width and 0 <= y < height.

The dot CSV interchange format is UTF-8 with header
``image_path,width,height,x,y``, one row per dot. An image with no dots is
declared by a single row whose x and y fields are empty. Box annotations
travel as JSON-lines, one object per image:
``{"image_path": str, "width": int, "height": int, "boxes": [[x_min, y_min, x_max, y_max], ...]}``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, TextIO

import numpy as np

from .errors import AnnotationParseError, ValidationError

CSV_HEADER = ["image_path", "width", "height", "x", "y"]


@dataclass(frozen=True)
class DotAnnotation:
    """A point label marking one object center, sub-pixel precision."""

    x: float
    y: float


@dataclass(frozen=True)
class BoxAnnotation:
    x_min: float
    y_min: float
    x_max: float
    y_max: float


@dataclass(frozen=True)
class AnnotatedImage:
    """An image reference with its dot labels; dots may be empty."""

    image_path: str
    width: int
    height: int
    dots: tuple[DotAnnotation, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValidationError(
                f"{self.image_path}: image dimensions must be positive, got {self.width}x{self.height}"
            )
        for i, dot in enumerate(self.dots):
            if not (0 <= dot.x < self.width) or not (0 <= dot.y < self.height):
                raise ValidationError(
                    f"{self.image_path}: dot {i} at ({dot.x}, {dot.y}) outside "
                    f"[0, {self.width}) x [0, {self.height})"
                )

    @property
    def count(self) -> int:
        return len(self.dots)


def parse_dot_csv(stream: TextIO | str) -> list[AnnotatedImage]:
    """Parse the dot CSV format into one AnnotatedImage per distinct image path.

    Rows are grouped by image_path in first-appearance order; dot order within
    an image follows row order. A row with empty x and y declares a zero-dot
    image. Malformed rows raise AnnotationParseError naming the line; an
    out-of-bounds dot raises ValidationError naming the image and dot index.
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    reader = csv.reader(stream)

    try:
        header = next(reader)
    except StopIteration:
        raise AnnotationParseError("empty input: missing CSV header") from None
    if header != CSV_HEADER:
        raise AnnotationParseError(
            f"line 1: expected header {','.join(CSV_HEADER)!r}, got {','.join(header)!r}"
        )

    # image_path -> (width, height, [dots]); dict preserves first-appearance order
    groups: dict[str, tuple[int, int, list[DotAnnotation]]] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 5:
            raise AnnotationParseError(f"line {lineno}: expected 5 columns, got {len(row)}")
        path, width_s, height_s, x_s, y_s = row
        if not path:
            raise AnnotationParseError(f"line {lineno}: empty image_path")
        try:
            width, height = int(width_s), int(height_s)
        except ValueError:
            raise AnnotationParseError(
                f"line {lineno}: non-integer image dimensions {width_s!r}, {height_s!r}"
            ) from None

        if path in groups:
            prev_w, prev_h, dots = groups[path]
            if (prev_w, prev_h) != (width, height):
                raise AnnotationParseError(
                    f"line {lineno}: image {path!r} re-declared as {width}x{height}, "
                    f"was {prev_w}x{prev_h}"
                )
        else:
            dots = []
            groups[path] = (width, height, dots)

        if x_s == "" and y_s == "":
            continue  # zero-dot declaration row
        try:
            x, y = float(x_s), float(y_s)
        except ValueError:
            raise AnnotationParseError(
                f"line {lineno}: non-numeric coordinate {x_s!r}, {y_s!r}"
            ) from None
        if not (math.isfinite(x) and math.isfinite(y)):
            raise AnnotationParseError(f"line {lineno}: non-finite coordinate {x_s!r}, {y_s!r}")
        dots.append(DotAnnotation(x, y))

    return [
        AnnotatedImage(path, width, height, tuple(dots))
        for path, (width, height, dots) in groups.items()
    ]


def write_dot_csv(images: Iterable[AnnotatedImage], sink: TextIO) -> None:
    """Serialize images to the dot CSV format; inverse of parse_dot_csv."""
    writer = csv.writer(sink, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for img in images:
        if not img.dots:
            writer.writerow([img.image_path, img.width, img.height, "", ""])
        for dot in img.dots:
            writer.writerow([img.image_path, img.width, img.height, repr(dot.x), repr(dot.y)])


def box_to_dot(box: BoxAnnotation) -> DotAnnotation:
    """Reduce a box to its center point. Degenerate boxes are rejected."""
    if not (box.x_min < box.x_max and box.y_min < box.y_max):
        raise ValidationError(
            f"degenerate box ({box.x_min}, {box.y_min}, {box.x_max}, {box.y_max}): "
            "needs positive width and height"
        )
    return DotAnnotation((box.x_min + box.x_max) / 2.0, (box.y_min + box.y_max) / 2.0)


def parse_box_jsonl(stream: TextIO | str) -> list[AnnotatedImage]:
    """Parse box JSON-lines and convert every box to its center dot."""
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    images = []
    for lineno, line in enumerate(stream, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise AnnotationParseError(f"line {lineno}: invalid JSON: {exc}") from None
        try:
            path = obj["image_path"]
            width, height = int(obj["width"]), int(obj["height"])
            boxes = obj["boxes"]
        except (KeyError, TypeError, ValueError) as exc:
            raise AnnotationParseError(f"line {lineno}: bad record: {exc}") from None
        dots = []
        for bi, b in enumerate(boxes):
            if not isinstance(b, (list, tuple)) or len(b) != 4:
                raise AnnotationParseError(f"line {lineno}: box {bi} is not a 4-element list")
            dots.append(box_to_dot(BoxAnnotation(*map(float, b))))
        images.append(AnnotatedImage(path, width, height, tuple(dots)))
    return images


def dots_to_raster(dots: Iterable[DotAnnotation], width: int, height: int) -> "DensityMap":
    """Rasterize dots into a width x height indicator map.

    Each dot adds 1 at its round-half-up nearest pixel; coinciding dots
    accumulate, so the raster sums exactly to the number of dots. Rounding
    can push a coordinate in [width - 0.5, width) to the border, which is
    clamped back to the last in-image pixel.
    """
    # density imports this module, so pull DensityMap in lazily
    from .density import DensityMap

    raster = np.zeros((height, width), dtype=np.float32)
    for dot in dots:
        col = min(int(math.floor(dot.x + 0.5)), width - 1)
        row = min(int(math.floor(dot.y + 0.5)), height - 1)
        raster[row, col] += 1.0
    return DensityMap(width=width, height=height, values=raster)
