"""Detection metrics, heatmap statistics, map exports and throughput timing."""
import json
import logging
import math
import os
import platform
import time
from dataclasses import asdict, dataclass, field
from itertools import groupby
from pathlib import Path

import numpy as np
import pandas as pd
from PIL import Image

from centeruda.codec import decode, decode_batch, encode_targets
from centeruda.data import load_image
from centeruda.errors import ConfigError, DataError
from centeruda.losses import entropy_map
from centeruda.model import forward
from centeruda.tensor import Tensor

logger = logging.getLogger(__name__)

MIN_TIMED_ITERATIONS = 10


def iou(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def match_detections(detections, ground_truth, iou_threshold=0.5):
    """Greedy matching in descending score order (ties keep input order).

    ``detections`` holds (image_id, score, box) triples; ``ground_truth`` maps
    image_id to a list of boxes. Returns the TP flags in ranked order.
    """
    order = sorted(range(len(detections)), key=lambda i: -detections[i][1])
    used = {image_id: [False] * len(boxes) for image_id, boxes in ground_truth.items()}
    flags = []
    for i in order:
        image_id, _, box = detections[i]
        best, best_iou = -1, iou_threshold
        for j, gt in enumerate(ground_truth.get(image_id, ())):
            if used[image_id][j]:
                continue
            overlap = iou(box, gt)
            if overlap >= best_iou and (best < 0 or overlap > best_iou):
                best, best_iou = j, overlap
        if best >= 0:
            used[image_id][best] = True
        flags.append(best >= 0)
    return np.array(flags, dtype=bool)


def average_precision(detections, ground_truth, iou_threshold=0.5):
    """All-point interpolated AP; NaN when there is no ground truth."""
    num_gt = sum(len(boxes) for boxes in ground_truth.values())
    if num_gt == 0:
        return float("nan")
    if not detections:
        return 0.0
    tp = match_detections(detections, ground_truth, iou_threshold)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / num_gt
    precision = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    changed = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[changed + 1] - mrec[changed]) * mpre[changed + 1]))


def heatmap_mean(heatmaps):
    total, count = 0.0, 0
    for h in heatmaps:
        arr = h.data if isinstance(h, Tensor) else np.asarray(h)
        total += float(arr.sum(dtype=np.float64))
        count += arr.size
    return total / count if count else float("nan")


@dataclass
class EvalReport:
    class_names: list
    ap: dict
    mAP: float
    num_detections: dict
    num_ground_truth: dict
    mean_heatmap_pred: float
    mean_heatmap_gt: float
    mean_entropy: float
    images_per_second: float
    num_images: int
    source_mean_entropy: float = float("nan")
    label: str = ""

    def to_dict(self):
        return _nan_to_none(asdict(self))

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, text):
        d = _none_to_nan(json.loads(text))
        return cls(**d)


def _nan_to_none(value):
    if isinstance(value, dict):
        return {k: _nan_to_none(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_nan_to_none(v) for v in value]
    if isinstance(value, float) and math.isnan(value):
        return None
    return value


def _none_to_nan(d):
    out = {}
    for key, value in d.items():
        if isinstance(value, dict):
            value = {k: float("nan") if v is None else v for k, v in value.items()}
        elif value is None:
            value = float("nan")
        out[key] = value
    return out


def _batches(entries, batch_size):
    """Chunks of at most ``batch_size`` consecutive entries whose images share one shape."""
    for i in range(0, len(entries), batch_size):
        chunk = entries[i:i + batch_size]
        images = [load_image(e.image_path) for e in chunk]
        for _, run in groupby(zip(chunk, images), key=lambda pair: pair[1].shape):
            run = list(run)
            yield [entry for entry, _ in run], np.stack([image for _, image in run])


def _mean_entropy(params, manifest, batch_size):
    if params.num_classes < 2:
        return float("nan")
    maps = []
    for _, images in _batches(manifest.entries, batch_size):
        images = images.astype(params.dtype)
        maps.append(entropy_map(forward(params, images, heads=("heatmap",)).heatmap).data)
    return heatmap_mean(maps)


def evaluate(params, testset, top_k=100, score_threshold=0.1, iou_threshold=0.5, min_overlap=0.7,
             batch_size=8, source_probe=None, label=""):
    """Forward and decode every test image, then aggregate AP and heatmap statistics."""
    if len(testset) == 0:
        raise DataError("test set is empty", path=testset.path)
    if not testset.labeled:
        raise DataError("test set has no labels", path=testset.path)
    C = params.num_classes
    R = params.output_stride
    names = list(testset.class_names[:C])
    names += [f"class{c}" for c in range(len(names), C)]

    detections = {c: [] for c in range(C)}
    ground_truth = {c: {} for c in range(C)}
    pred_maps, gt_maps, entropy_maps = [], [], []
    start = time.perf_counter()
    for chunk, images in _batches(testset.entries, batch_size):
        images = images.astype(params.dtype)
        output = forward(params, images)
        decoded = decode_batch(output, R, top_k=top_k, score_threshold=score_threshold)
        pred_maps.append(output.heatmap.data)
        if C >= 2:
            entropy_maps.append(entropy_map(output.heatmap).data)
        for entry, dets in zip(chunk, decoded):
            for det in dets:
                detections[det.class_id].append((entry.image_id, det.score, det.box))
            for c in range(C):
                ground_truth[c].setdefault(entry.image_id, [])
            for box in entry.annotations:
                if box.class_id >= C:
                    raise DataError(f"annotation class {box.class_id} outside [0, {C})", path=testset.path)
                ground_truth[box.class_id][entry.image_id].append(box.box)
            targets = encode_targets(entry.annotations, images.shape[2:], R, C, min_overlap)
            gt_maps.append(targets.heatmap)
    elapsed = time.perf_counter() - start

    ap = {names[c]: average_precision(detections[c], ground_truth[c], iou_threshold) for c in range(C)}
    present = [v for v in ap.values() if not math.isnan(v)]
    if not present:
        raise DataError("test set has no ground-truth boxes", path=testset.path)
    report = EvalReport(
        class_names=names,
        ap=ap,
        mAP=float(np.mean(present)),
        num_detections={names[c]: len(detections[c]) for c in range(C)},
        num_ground_truth={names[c]: sum(len(b) for b in ground_truth[c].values()) for c in range(C)},
        mean_heatmap_pred=heatmap_mean(pred_maps),
        mean_heatmap_gt=heatmap_mean(gt_maps),
        mean_entropy=heatmap_mean(entropy_maps),
        images_per_second=len(testset) / elapsed if elapsed > 0 else float("inf"),
        num_images=len(testset),
        label=label,
    )
    if source_probe is not None and len(source_probe):
        report.source_mean_entropy = _mean_entropy(params, source_probe, batch_size)
    logger.info(f"Evaluated {len(testset)} images{f' ({label})' if label else ''}: mAP={report.mAP:.4f}")
    return report


def comparison_frame(reports):
    """One row per report: AP per class, mAP, then heatmap statistics."""
    rows = {}
    for i, report in enumerate(reports):
        row = dict(report.ap)
        row["mAP"] = report.mAP
        row["GT heatmap mean"] = report.mean_heatmap_gt
        row["pred heatmap mean"] = report.mean_heatmap_pred
        row["target entropy"] = report.mean_entropy
        row["source entropy"] = report.source_mean_entropy
        rows[report.label or f"run{i}"] = row
    return pd.DataFrame.from_dict(rows, orient="index")


def format_table(reports):
    return comparison_frame(reports).to_string(float_format=lambda v: f"{v:.4f}", na_rep="-")


# renderings

def to_gray(values):
    """[0, 1] floats to uint8 with round-half-up: floor(v * 255 + 0.5)."""
    return np.floor(np.clip(values, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def _save_png(array, path):
    try:
        Image.fromarray(to_gray(array)).save(path, format="PNG")
    except OSError as e:
        raise DataError(f"cannot write map ({e})", path=path) from e


def export_maps(params, images, out_dir, stems=None):
    """Write per-class heatmaps and the entropy map of every image as grayscale PNGs."""
    if params.num_classes < 2:
        raise ConfigError("entropy maps need at least 2 classes")
    images = np.asarray(images, dtype=params.dtype)
    if images.ndim == 3:
        images = images[None]
    stems = stems or [f"image{i:03d}" for i in range(len(images))]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    written = []
    for stem, image in zip(stems, images):
        heatmap = forward(params, image[None], heads=("heatmap",)).heatmap
        for c, channel in enumerate(heatmap.data[0]):
            path = out_dir / f"{stem}_heatmap_c{c}.png"
            _save_png(channel, path)
            written.append(path)
        path = out_dir / f"{stem}_entropy.png"
        _save_png(entropy_map(heatmap).data[0], path)
        written.append(path)
    logger.info(f"Exported {len(written)} maps to {out_dir}")
    return written


def export_manifest_maps(params, manifest, out_dir, limit=8):
    entries = manifest.entries[:limit]
    if not entries:
        raise DataError("nothing to export", path=manifest.path)
    images = np.stack([load_image(e.image_path) for e in entries])
    return export_maps(params, images, out_dir, stems=[Path(e.image_path).stem for e in entries])


# timing

def environment_metadata():
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "platform": platform.platform(),
        "cpu_count": os.cpu_count(),
    }


@dataclass
class ThroughputReport:
    images_per_second: float
    median_forward_s: float
    median_decode_s: float
    median_total_s: float
    iterations: int
    image_size: int
    environment: dict = field(default_factory=environment_metadata)

    def to_dict(self):
        return asdict(self)


def throughput(params, image_size, iterations=20, warmup=3, top_k=100, score_threshold=0.1, seed=0):
    """Median single-image forward + decode time, reported as images per second."""
    if iterations < MIN_TIMED_ITERATIONS:
        raise ConfigError(f"throughput needs at least {MIN_TIMED_ITERATIONS} iterations, got {iterations}")
    rng = np.random.default_rng(seed)
    image = rng.random((1, 3, image_size, image_size)).astype(params.dtype)
    R = params.output_stride
    forward_times, decode_times = [], []
    for i in range(warmup + iterations):
        t0 = time.perf_counter()
        output = forward(params, image)
        t1 = time.perf_counter()
        decode(output.heatmap.data[0], output.offset.data[0], output.size.data[0], R, top_k, score_threshold)
        t2 = time.perf_counter()
        if i >= warmup:
            forward_times.append(t1 - t0)
            decode_times.append(t2 - t1)
    total = np.median(np.add(forward_times, decode_times))
    report = ThroughputReport(
        images_per_second=float(1.0 / total),
        median_forward_s=float(np.median(forward_times)),
        median_decode_s=float(np.median(decode_times)),
        median_total_s=float(total),
        iterations=iterations,
        image_size=image_size,
    )
    logger.info(f"Throughput {report.images_per_second:.2f} images/s at {image_size}x{image_size}")
    return report
