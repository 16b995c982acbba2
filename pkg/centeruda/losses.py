"""Training objectives: the detection loss and the two target-domain UDA losses.

Every loss takes a single image (C x h x w) or a batch (B x C x h x w). Per-image
values are averaged over the batch.
"""
import logging
import math
from dataclasses import dataclass

import numpy as np
import pandas as pd

from centeruda import tensor as T
from centeruda.codec import TargetBatch, TargetMaps, stack_targets
from centeruda.errors import ConfigError, NumericalError, ShapeError
from centeruda.tensor import Tensor

logger = logging.getLogger(__name__)

MODES = ("baseline", "em", "msl")


@dataclass(frozen=True)
class LossWeights:
    heatmap: float = 1.0
    size: float = 0.1
    offset: float = 1.0
    entropy: float = 1e-4
    max_squares: float = 0.3
    alpha: float = 2.0
    beta: float = 4.0
    softmax_on_logits: bool = False

    def __post_init__(self):
        for name in ("heatmap", "size", "offset", "entropy", "max_squares"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss weight {name} must be nonnegative, got {getattr(self, name)}")


@dataclass
class LossReport:
    heatmap: Tensor
    size: Tensor
    offset: Tensor
    detection: Tensor
    total: Tensor
    uda: Tensor = None
    mode: str = "baseline"
    target_mean_heatmap: float = float("nan")
    target_mean_entropy: float = float("nan")

    def scalars(self):
        uda = self.uda.item() if self.uda is not None else float("nan")
        return {
            "L_h": self.heatmap.item(),
            "L_off": self.offset.item(),
            "L_size": self.size.item(),
            "L_det": self.detection.item(),
            "L_uda": uda,
            "L_total": self.total.item(),
            "target_mean_heatmap": self.target_mean_heatmap,
            "target_mean_entropy": self.target_mean_entropy,
        }


def _batched(x, name):
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim == 3:
        return x.reshape((1, *x.shape))
    if x.ndim != 4:
        raise ShapeError(name, f"expected C x h x w or B x C x h x w, got shape {x.shape}")
    return x


def _per_image_norm(num_objects, batch, dtype):
    counts = np.broadcast_to(np.asarray(num_objects, dtype=np.float64).reshape(-1), (batch,))
    return (1.0 / np.maximum(counts, 1.0)).reshape(batch, 1, 1, 1).astype(dtype)


def focal_loss(heatmap, target, alpha=2.0, beta=4.0, num_objects=None):
    """Penalty-reduced pixel-wise focal loss, normalized by the object count of each image."""
    pred = _batched(heatmap, "focal_loss")
    y = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if y.ndim == 3:
        y = y[None]
    if y.shape != pred.shape:
        raise ShapeError("focal_loss", f"target shape {y.shape} does not match heatmap {pred.shape}")
    if num_objects is None:
        num_objects = (y == 1.0).sum(axis=(1, 2, 3))
    batch = pred.shape[0]

    positive = (y == 1.0).astype(pred.dtype)
    negative_weight = ((1.0 - y) ** beta * (y < 1.0)).astype(pred.dtype)
    pos_term = T.power(1.0 - pred, alpha) * T.log_clamped(pred) * positive
    neg_term = T.power(pred, alpha) * T.log_clamped(1.0 - pred) * negative_weight
    per_cell = (pos_term + neg_term) * _per_image_norm(num_objects, batch, pred.dtype)
    return T.sum(per_cell) * (-1.0 / batch)


def _object_mask(object_index, shape, dtype):
    mask = np.zeros(shape, dtype=dtype)
    for gx, gy, *_ in object_index:
        mask[0, 0, gy, gx] = 1.0
    return mask


def l1_at_objects(pred, target, object_index=None, mask=None, num_objects=None):
    """Absolute error at object cells, divided by 2 * max(N, 1) per image.

    Either ``object_index`` (single image) or ``mask``/``num_objects`` (batch) locate the cells.
    """
    pred = _batched(pred, "l1_at_objects")
    y = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if y.ndim == 3:
        y = y[None]
    if y.shape != pred.shape:
        raise ShapeError("l1_at_objects", f"target shape {y.shape} does not match prediction {pred.shape}")
    batch, _, h, w = pred.shape
    if mask is None:
        index = list(object_index or [])
        for gx, gy, *_ in index:
            if not (0 <= gx < w and 0 <= gy < h):
                raise ShapeError("l1_at_objects", f"object cell ({gx}, {gy}) outside {w}x{h} grid")
        mask = _object_mask(index, (1, 1, h, w), pred.dtype)
        num_objects = [len(index)]
    mask = np.asarray(mask, dtype=pred.dtype)
    norm = _per_image_norm(num_objects, batch, pred.dtype) / 2.0
    return T.sum(T.abs(pred - y) * (mask * norm)) * (1.0 / batch)


def _as_batch(targets, dtype):
    if isinstance(targets, TargetBatch):
        return targets
    if isinstance(targets, TargetMaps):
        targets = [targets]
    return stack_targets(list(targets), dtype=dtype)


def detection_loss(output, targets, weights):
    """L_det = λ_h·L_h + λ_size·L_size + λ_off·L_off on a labeled (source) batch."""
    heatmap = _batched(output.heatmap, "detection_loss")
    batch = _as_batch(targets, heatmap.dtype)
    if batch.heatmap.shape != heatmap.shape:
        raise ShapeError("detection_loss", f"targets {batch.heatmap.shape} do not match heatmap {heatmap.shape}")
    l_h = focal_loss(heatmap, batch.heatmap, weights.alpha, weights.beta, batch.num_objects)
    l_size = l1_at_objects(output.size, batch.size, mask=batch.mask, num_objects=batch.num_objects)
    l_off = l1_at_objects(output.offset, batch.offset, mask=batch.mask, num_objects=batch.num_objects)
    l_det = l_h * weights.heatmap + l_size * weights.size + l_off * weights.offset
    return LossReport(heatmap=l_h, size=l_size, offset=l_off, detection=l_det, total=l_det)


def _class_distribution(heatmap, name):
    return T.channel_softmax(_batched(heatmap, name), axis=1)


def entropy_map(heatmap):
    """Normalized per-pixel entropy of the class softmax of the heatmap, in [0, 1]."""
    x = _batched(heatmap, "entropy_map")
    C = x.shape[1]
    if C < 2:
        raise ConfigError("entropy_map needs at least 2 classes (log C normalizer)")
    p = T.channel_softmax(x, axis=1)
    e = T.sum(p * T.log_clamped(p), axis=1) * (-1.0 / math.log(C))
    return e if _array_ndim(heatmap) == 4 else e.reshape(e.shape[1:])


def _array_ndim(x):
    return x.ndim if isinstance(x, Tensor) else np.ndim(x)


def entropy_loss(heatmap):
    """Mean of the entropy map over the heatmap grid, averaged over the batch."""
    return T.mean(entropy_map(_batched(heatmap, "entropy_loss")))


def max_squares_loss(heatmap, R):
    """-(R / (h·w)) · Σ_c Σ_xy Y'², averaged over the batch."""
    p = _class_distribution(heatmap, "max_squares_loss")
    batch, _, h, w = p.shape
    return T.sum(T.square(p)) * (-float(R) / (batch * h * w))


def uda_loss(mode, heatmap, weights, R):
    """Unweighted target-domain term for ``mode`` (None in baseline mode)."""
    if mode == "baseline":
        return None
    if heatmap is None:
        raise ConfigError(f"mode {mode} needs a target-domain heatmap")
    if mode == "em":
        return entropy_loss(heatmap)
    if mode == "msl":
        return max_squares_loss(heatmap, R)
    raise ConfigError(f"unknown mode {mode!r}; expected one of {', '.join(MODES)}")


def uda_weight(mode, weights):
    return {"baseline": 0.0, "em": weights.entropy, "msl": weights.max_squares}[mode]


def combine(mode, detection, uda, weights):
    if mode == "baseline":
        return detection
    return detection + uda * uda_weight(mode, weights)


def combined_loss(mode, source_report, target_heatmap, weights, R):
    """L_det on the source batch plus the weighted UDA term on the target heatmap only."""
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {', '.join(MODES)}")
    if mode == "baseline":
        return source_report.detection
    return combine(mode, source_report.detection, uda_loss(mode, target_heatmap, weights, R), weights)


def heatmap_diagnostics(heatmap):
    """Detached mean heatmap value and mean normalized entropy of a batch."""
    data = heatmap.data if isinstance(heatmap, Tensor) else np.asarray(heatmap)
    mean_entropy = float("nan")
    if data.shape[-3] >= 2:
        mean_entropy = float(np.mean(entropy_map(Tensor(data)).data))
    return float(np.mean(data)), mean_entropy


# probability-imbalance analysis

GRADIENT_KINDS = ("entropy", "max_squares")


def _binary_loss(p, kind):
    q = 1.0 - p
    if kind == "entropy":
        return -(p * T.log_clamped(p) + q * T.log_clamped(q))
    return -(T.square(p) + T.square(q))


def closed_form_gradient(p, kind):
    if kind == "entropy":
        return abs(math.log((1.0 - p) / p))
    return abs(2.0 - 4.0 * p)


def _gradients(p, kind):
    x = T.parameter(np.array([p], dtype=np.float64))
    with T.GradientTape():
        loss = T.sum(_binary_loss(x, kind))
    T.backward(loss)
    autodiff = abs(float(x.grad[0]))

    def value(arr):
        return T.sum(_binary_loss(Tensor(arr), kind)).item()

    finite_diff = abs(float(T.numerical_gradient(value, np.array([p], dtype=np.float64))[0]))
    return autodiff, closed_form_gradient(p, kind), finite_diff


def gradient_profile(ps, loss_kind, rtol=1e-6, atol=1e-9):
    """|dL/dp| of the binary single-pixel loss over the grid ``ps``.

    Each value is computed by autodiff through the loss ops and cross-checked against
    the closed form and central finite differences.
    """
    if loss_kind not in GRADIENT_KINDS:
        raise ConfigError(f"loss_kind must be one of {GRADIENT_KINDS}, got {loss_kind!r}")
    rows = []
    for p in ps:
        p = float(p)
        if not 0.0 < p < 1.0:
            raise ConfigError(f"gradient_profile needs p in (0, 1), got {p}")
        autodiff, closed, finite_diff = _gradients(p, loss_kind)
        for name, other in (("closed form", closed), ("finite differences", finite_diff)):
            if not math.isclose(autodiff, other, rel_tol=rtol, abs_tol=atol):
                raise NumericalError(f"{loss_kind} gradient at p={p}: autodiff {autodiff} vs {name} {other}")
        rows.append((p, autodiff))
    return rows


def gradient_table(ps):
    records = []
    for p in ps:
        p = float(p)
        ent, ent_closed, ent_fd = _gradients(p, "entropy")
        msl, msl_closed, msl_fd = _gradients(p, "max_squares")
        records.append({
            "p": p,
            "grad_entropy": ent,
            "grad_msl": msl,
            "grad_entropy_closed_form": ent_closed,
            "grad_msl_closed_form": msl_closed,
            "grad_entropy_finite_diff": ent_fd,
            "grad_msl_finite_diff": msl_fd,
            "ratio": ent / msl if msl > 0 else float("nan"),
        })
    return pd.DataFrame.from_records(records)


def probability_grid(step=0.01):
    n = int(round(1.0 / step))
    return np.round(np.arange(1, n) * step, 10)


def write_gradient_profile(path, ps=None):
    ps = probability_grid() if ps is None else ps
    gradient_profile(ps, "entropy")
    gradient_profile(ps, "max_squares")
    df = gradient_table(ps)
    df.to_csv(path, index=False)
    logger.info(f"Wrote gradient profile ({len(df)} rows) to {path}")
    return df
