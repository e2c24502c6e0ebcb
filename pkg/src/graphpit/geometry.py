"""Part localisation, bounding boxes and the IoU/centroid adjacency rule."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError


@dataclass(frozen=True)
class BBox:
    x_min: float
    y_min: float
    w: float
    h: float

    def __post_init__(self):
        if self.w < 0 or self.h < 0:
            raise ValueError(f"negative box size ({self.w}, {self.h})")

    @property
    def x_max(self) -> float:
        return self.x_min + self.w

    @property
    def y_max(self) -> float:
        return self.y_min + self.h

    @property
    def area(self) -> float:
        return self.w * self.h


@dataclass(frozen=True)
class PartPlacement:
    part: int
    corners: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if len(self.corners) != 4:
            raise ValueError("a placement has exactly 4 corners")
        if not all(math.isfinite(c) for xy in self.corners for c in xy):
            raise ValueError("non-finite corner coordinate")


@dataclass(frozen=True)
class GraphPriorConfig:
    tau_iou: float = 0.0
    tau_dist: float = 512.0
    iou_strict: bool = True

    def __post_init__(self):
        if not 0.0 <= self.tau_iou <= 1.0:
            raise ValueError("tau_iou must lie in [0, 1]")
        if self.tau_dist < 0:
            raise ValueError("tau_dist must be non-negative")


@dataclass
class RasterImage:
    """Grayscale image, intensities in [0, 1], stored as a (height, width) array."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2:
            raise ValueError("raster must be 2-D")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


def bbox_from_corners(p: PartPlacement) -> BBox:
    xs = [c[0] for c in p.corners]
    ys = [c[1] for c in p.corners]
    x0, y0 = min(xs), min(ys)
    return BBox(x0, y0, max(xs) - x0, max(ys) - y0)


def centroid(b: BBox) -> tuple[float, float]:
    return ((b.x_min + b.x_max) / 2.0, (b.y_min + b.y_max) / 2.0)


def intersection_area(a: BBox, b: BBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    return max(iw, 0.0) * max(ih, 0.0)


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union; 0 when the union has zero area."""
    inter = intersection_area(a, b)
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    # rounding can push identical boxes a hair above 1
    return min(inter / union, 1.0)


def centroid_distance(a: BBox, b: BBox) -> float:
    (ax, ay), (bx, by) = centroid(a), centroid(b)
    return math.hypot(ax - bx, ay - by)


def adjacent(a: BBox, b: BBox, cfg: GraphPriorConfig) -> bool:
    o = iou(a, b)
    overlap = o > cfg.tau_iou if cfg.iou_strict else o >= cfg.tau_iou
    return overlap or centroid_distance(a, b) <= cfg.tau_dist


def build_adjacency(boxes: Sequence[BBox], cfg: GraphPriorConfig = GraphPriorConfig()) -> np.ndarray:
    n = len(boxes)
    if n < 1:
        raise ValueError("need at least one box")
    a = np.zeros((n, n), dtype=np.int64)
    for i in range(n):
        for j in range(i + 1, n):
            if adjacent(boxes[i], boxes[j], cfg):
                a[i, j] = a[j, i] = 1
    return a


# ---------------------------------------------------------------------------
# template matching


def ncc_map(template: RasterImage, full: RasterImage) -> np.ndarray:
    """Zero-mean normalised cross-correlation at every unit-scale offset.

    Entry [y, x] scores the template with its top-left corner at (x, y).
    Offsets where the window or the template has zero variance score 0.
    """
    t = template.pixels
    img = full.pixels
    th, tw = t.shape
    if th > img.shape[0] or tw > img.shape[1]:
        raise ShapeError(f"template {t.shape} larger than image {img.shape}")
    tc = t - t.mean()
    tnorm = np.sqrt((tc * tc).sum())
    windows = sliding_window_view(img, (th, tw))
    wc = windows - windows.mean(axis=(2, 3), keepdims=True)
    wnorm = np.sqrt((wc * wc).sum(axis=(2, 3)))
    num = np.einsum("yxij,ij->yx", wc, tc)
    denom = wnorm * tnorm
    scores = np.zeros_like(num)
    ok = denom > 1e-12
    scores[ok] = num[ok] / denom[ok]
    return np.clip(scores, -1.0, 1.0)


def locate_part(template: RasterImage, full: RasterImage, part: int = 0) -> tuple[PartPlacement, float]:
    """Exhaustive NCC search; returns the best axis-aligned placement and its score.

    A constant template has no defined correlation and maps to (0, 0) with score 0.
    """
    scores = ncc_map(template, full)
    th, tw = template.pixels.shape
    if np.ptp(template.pixels) == 0:
        y, x, score = 0, 0, 0.0
    else:
        y, x = np.unravel_index(int(np.argmax(scores)), scores.shape)
        score = float(scores[y, x])
    corners = ((float(x), float(y)), (float(x + tw), float(y)),
               (float(x + tw), float(y + th)), (float(x), float(y + th)))
    return PartPlacement(part, corners), score


# ---------------------------------------------------------------------------
# PGM (P5) I/O


def write_pgm(path: str | Path, image: RasterImage) -> None:
    vals = np.clip(np.rint(image.pixels * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{image.width} {image.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + vals.tobytes())


def read_pgm(path: str | Path) -> RasterImage:
    buf = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        start = pos
        while not buf[pos:pos + 1].isspace():
            pos += 1
        fields.append(buf[start:pos])
    if fields[0] != b"P5":
        raise ValueError("only binary PGM (P5) is supported")
    w, h, maxval = (int(f) for f in fields[1:])
    pos += 1
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    data = np.frombuffer(buf, dtype=dtype, count=w * h, offset=pos)
    return RasterImage(data.reshape(h, w).astype(np.float64) / maxval)
