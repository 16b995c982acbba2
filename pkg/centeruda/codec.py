"""Conversion between box annotations and center-point training targets.

Targets live on the heatmap grid (input size / R). Sizes are regressed in grid
units and multiplied by R on decode, so all three heads share one coordinate
system.
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from centeruda.errors import ConfigError, DataError, ShapeError
from centeruda.tensor import Tensor, pool_argmax

logger = logging.getLogger(__name__)

# window position of the center cell in a row-major 3x3 neighborhood
_CENTER = 4


@dataclass(frozen=True)
class BoxAnnotation:
    x1: float
    y1: float
    x2: float
    y2: float
    class_id: int

    @property
    def width(self):
        return self.x2 - self.x1

    @property
    def height(self):
        return self.y2 - self.y1

    @property
    def area(self):
        return max(self.width, 0.0) * max(self.height, 0.0)

    @property
    def box(self):
        return (self.x1, self.y1, self.x2, self.y2)

    def clipped(self, width, height):
        return BoxAnnotation(
            min(max(self.x1, 0.0), width),
            min(max(self.y1, 0.0), height),
            min(max(self.x2, 0.0), width),
            min(max(self.y2, 0.0), height),
            self.class_id,
        )


@dataclass(frozen=True)
class Detection:
    x1: float
    y1: float
    x2: float
    y2: float
    class_id: int
    score: float

    @property
    def box(self):
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass
class TargetMaps:
    heatmap: np.ndarray
    offset: np.ndarray
    size: np.ndarray
    object_index: list = field(default_factory=list)
    skipped: int = 0

    @property
    def num_objects(self):
        return len(self.object_index)


@dataclass
class TargetBatch:
    heatmap: np.ndarray
    offset: np.ndarray
    size: np.ndarray
    mask: np.ndarray
    num_objects: np.ndarray

    def __len__(self):
        return self.heatmap.shape[0]


def gaussian_radius(width, height, min_overlap=0.7):
    """Largest corner displacement that keeps IoU >= min_overlap, clamped to >= 1.

    Minimum over three cases: both corners shifted the same way, both moved
    inward, both moved outward.
    """
    if width <= 0 or height <= 0:
        raise ConfigError(f"gaussian_radius needs a positive box, got {width}x{height}")
    if not 0.0 < min_overlap < 1.0:
        raise ConfigError(f"min_overlap must be in (0, 1), got {min_overlap}")
    w, h, m = float(width), float(height), float(min_overlap)

    b1 = w + h
    c1 = w * h * (1 - m) / (1 + m)
    r1 = (b1 - math.sqrt(b1 * b1 - 4 * c1)) / 2

    b2 = 2 * (w + h)
    c2 = (1 - m) * w * h
    r2 = (b2 - math.sqrt(b2 * b2 - 16 * c2)) / 8

    a3 = 4 * m
    b3 = 2 * m * (w + h)
    c3 = (m - 1) * w * h
    r3 = (-b3 + math.sqrt(b3 * b3 - 4 * a3 * c3)) / (2 * a3)

    return max(1.0, min(r1, r2, r3))


def encode_targets(boxes, image_size, R, C, min_overlap=0.7, dtype=np.float64):
    H, W = image_size
    if H % R or W % R:
        raise ConfigError(f"image size {H}x{W} is not divisible by R={R}")
    h, w = H // R, W // R
    heatmap = np.zeros((C, h, w), dtype=dtype)
    offset = np.zeros((2, h, w), dtype=dtype)
    size = np.zeros((2, h, w), dtype=dtype)
    ys = np.arange(h, dtype=np.float64)[:, None]
    xs = np.arange(w, dtype=np.float64)[None, :]
    index = []
    skipped = 0

    for box in boxes:
        if not 0 <= box.class_id < C:
            raise DataError(f"class_id {box.class_id} outside [0, {C})")
        box = box.clipped(W, H)
        if box.width <= 0 or box.height <= 0:
            skipped += 1
            continue
        cx = (box.x1 + box.x2) / 2 / R
        cy = (box.y1 + box.y2) / 2 / R
        ix = min(int(math.floor(cx)), w - 1)
        iy = min(int(math.floor(cy)), h - 1)
        sigma = gaussian_radius(box.width / R, box.height / R, min_overlap) / 3
        splat = np.exp(-((xs - ix) ** 2 + (ys - iy) ** 2) / (2 * sigma * sigma))
        np.maximum(heatmap[box.class_id], splat, out=heatmap[box.class_id])
        offset[:, iy, ix] = (cx - ix, cy - iy)
        size[:, iy, ix] = (box.width / R, box.height / R)
        index.append((ix, iy, box.class_id))

    if skipped:
        logger.warning(f"Skipped {skipped} degenerate box(es) while encoding targets")
    return TargetMaps(heatmap, offset, size, index, skipped)


def stack_targets(targets, dtype=np.float32):
    if not targets:
        raise ShapeError("stack_targets", "no targets to stack")
    heatmap = np.stack([t.heatmap for t in targets]).astype(dtype)
    b, _, h, w = heatmap.shape
    mask = np.zeros((b, 1, h, w), dtype=dtype)
    for i, t in enumerate(targets):
        for gx, gy, _ in t.object_index:
            mask[i, 0, gy, gx] = 1.0
    return TargetBatch(
        heatmap=heatmap,
        offset=np.stack([t.offset for t in targets]).astype(dtype),
        size=np.stack([t.size for t in targets]).astype(dtype),
        mask=mask,
        num_objects=np.array([t.num_objects for t in targets], dtype=np.int64),
    )


def _array(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def find_peaks(heatmap):
    """Cells that are the maximum of their 8-neighborhood (plateaus keep the lowest row-major cell)."""
    arr = _array(heatmap)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    _, arg, _ = pool_argmax(arr)
    peaks = arg == _CENTER
    return peaks[0] if single else peaks


def decode(heatmap, offset, size, R, top_k=100, score_threshold=0.1):
    heat = _array(heatmap)
    off = _array(offset)
    wh = _array(size)
    if heat.ndim != 3:
        raise ShapeError("decode", f"expected a C x h x w heatmap, got shape {heat.shape}")
    if off.shape != (2, *heat.shape[1:]) or wh.shape != off.shape:
        raise ShapeError("decode", f"offset {off.shape} / size {wh.shape} do not match heatmap {heat.shape}")
    if top_k < 1:
        raise ConfigError(f"top_k must be >= 1, got {top_k}")

    cs, ys, xs = np.nonzero(find_peaks(heat))
    scores = heat[cs, ys, xs]
    detections = []
    for i in np.argsort(-scores, kind="stable")[:top_k]:
        score = float(scores[i])
        if score < score_threshold:
            break
        c, y, x = int(cs[i]), int(ys[i]), int(xs[i])
        cx = (x + float(off[0, y, x])) * R
        cy = (y + float(off[1, y, x])) * R
        bw = max(float(wh[0, y, x]), 0.0) * R
        bh = max(float(wh[1, y, x]), 0.0) * R
        detections.append(Detection(cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2, c, score))
    return detections


def decode_batch(output, R, top_k=100, score_threshold=0.1):
    heat = _array(output.heatmap)
    return [
        decode(heat[i], _array(output.offset)[i], _array(output.size)[i], R, top_k, score_threshold)
        for i in range(heat.shape[0])
    ]


def roundtrip(boxes, image_size, R, C, min_overlap=0.7, top_k=100):
    """Encode boxes and decode the targets as if they were a perfect prediction."""
    targets = encode_targets(boxes, image_size, R, C, min_overlap)
    return decode(targets.heatmap, targets.offset, targets.size, R, top_k=top_k, score_threshold=0.1)
