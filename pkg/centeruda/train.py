"""Dual-domain training loop.

Each step forwards a labeled source batch through all three heads and, in em/msl
mode, an unlabeled target batch through the heatmap head only. One backward pass
over the summed objective is followed by one Adam update.
"""
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from centeruda import tensor as T
from centeruda.checkpoint import SUFFIX, check_compatible, load_checkpoint, save_checkpoint
from centeruda.data import paired_batches, prepare_batch, steps_per_epoch
from centeruda.errors import ConfigError, DataError, NumericalError, OptimizerError
from centeruda.losses import combine, detection_loss, heatmap_diagnostics, uda_loss
from centeruda.model import build_model, forward

logger = logging.getLogger(__name__)

METRIC_COLUMNS = [
    "step", "epoch", "lr", "L_h", "L_off", "L_size", "L_det", "L_uda", "L_total",
    "target_mean_heatmap", "target_mean_entropy",
]
METRICS_FILE = "metrics.csv"
LAST_CHECKPOINT = f"last{SUFFIX}"
RESOLVED_CONFIG = "resolved_config.ini"


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros(cls, params):
        return cls(
            m={path: np.zeros_like(t.data) for path, t in params.items()},
            v={path: np.zeros_like(t.data) for path, t in params.items()},
        )

    def check(self, params):
        if self.step < 0:
            raise OptimizerError(f"optimizer step must be >= 0, got {self.step}")
        for path, t in params.items():
            if path not in self.m or path not in self.v:
                raise OptimizerError("no moment buffers", path=path)
            if self.m[path].shape != t.shape or self.v[path].shape != t.shape:
                raise OptimizerError(f"moment shape does not match parameter {t.shape}", path=path)


def adam_step(params, state, lr, weight_decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam with weight decay added to the gradient; clears gradients."""
    for path, t in params.items():
        if t.grad is None:
            raise OptimizerError("missing gradient", path=path)
    state.step += 1
    bias1 = 1.0 - beta1 ** state.step
    bias2 = 1.0 - beta2 ** state.step
    for path, t in params.items():
        g = t.grad + weight_decay * t.data
        m = state.m[path] = beta1 * state.m[path] + (1.0 - beta1) * g
        v = state.v[path] = beta2 * state.v[path] + (1.0 - beta2) * g * g
        update = lr * (m / bias1) / (np.sqrt(v / bias2) + eps)
        t.data = (t.data - update).astype(t.dtype)
        t.grad = None


def lr_at(config, epoch):
    """Single step decay: lr * gamma from ``lr_decay_epoch`` onward (0-based epochs)."""
    if epoch >= config.lr_decay_epoch:
        return config.learning_rate * config.lr_gamma
    return config.learning_rate


@dataclass
class TrainResult:
    params: object
    optimizer: OptimizerState
    metrics_path: Path
    checkpoint_path: Path
    epochs_completed: int
    steps: int


def train_step(params, optimizer, source_batch, target_batch, config, lr, step=0):
    """One combined forward/backward/update; returns the LossReport of the step."""
    weights = config.loss_weights
    mode = config.mode
    with T.GradientTape():
        report = detection_loss(forward(params, source_batch.images), source_batch.targets, weights)
        uda = None
        target_heatmap = None
        if mode != "baseline":
            if target_batch is None:
                raise ConfigError(f"mode {mode} needs a target batch")
            target_out = forward(params, target_batch.images, heads=("heatmap",))
            target_heatmap = target_out.heatmap
            uda_input = target_out.heatmap_logits if weights.softmax_on_logits else target_out.heatmap
            uda = uda_loss(mode, uda_input, weights, config.R)
        total = combine(mode, report.detection, uda, weights)

    value = total.item()
    if not math.isfinite(value):
        raise NumericalError(f"non-finite total loss {value}", step=step)
    T.backward(total)
    adam_step(params, optimizer, lr, config.weight_decay, config.adam_beta1, config.adam_beta2, config.adam_eps)

    report.uda = uda
    report.total = total
    report.mode = mode
    if target_heatmap is not None:
        report.target_mean_heatmap, report.target_mean_entropy = heatmap_diagnostics(target_heatmap)
    return report


class Trainer:
    """Runs the epoch loop, writes metrics.csv and checkpoints into ``config.output_dir``."""

    def __init__(self, config, source, target=None):
        self.config = config
        self.source = source
        self.target = target
        self.dtype = np.float64 if config.dtype == "float64" else np.float32
        self.jobs = 1 if config.deterministic else config.jobs
        self.output_dir = Path(config.output_dir)
        self.metrics_path = self.output_dir / METRICS_FILE
        self._check_inputs()

    def _check_inputs(self):
        if not self.source.labeled:
            raise DataError("source manifest has no labels", path=self.source.path)
        if len(self.source) == 0:
            raise DataError("source manifest is empty", path=self.source.path)
        if self.source.num_classes != self.config.num_classes:
            raise ConfigError(
                f"source manifest has {self.source.num_classes} classes but num_classes={self.config.num_classes}"
            )
        if self.config.mode != "baseline" and self.target is None:
            raise ConfigError(f"mode {self.config.mode} needs a target manifest")
        if self.target is not None and len(self.target) == 0:
            raise DataError("target manifest is empty", path=self.target.path)

    def _initial_state(self):
        config = self.config
        if config.resume:
            checkpoint = load_checkpoint(config.resume)
            check_compatible(checkpoint, config.architecture, config.num_classes)
            params = checkpoint.params
            if params.dtype != self.dtype:
                params = params.astype(self.dtype)
            if checkpoint.m:
                optimizer = OptimizerState(
                    m={p: a.astype(self.dtype) for p, a in checkpoint.m.items()},
                    v={p: a.astype(self.dtype) for p, a in checkpoint.v.items()},
                    step=checkpoint.optimizer_step,
                )
            else:
                optimizer = OptimizerState.zeros(params)
            optimizer.check(params)
            logger.info(
                f"Resuming from {config.resume} at epoch {checkpoint.epoch}, step {checkpoint.step} "
                f"(skipping {checkpoint.epoch_step} consumed batches)"
            )
            return params, optimizer, checkpoint.epoch, checkpoint.step, checkpoint.epoch_step
        params = build_model(config.architecture, config.num_classes, config.seed, dtype=self.dtype)
        return params, OptimizerState.zeros(params), 0, 0, 0

    def _append_metrics(self, row):
        header = not self.metrics_path.exists()
        pd.DataFrame([row], columns=METRIC_COLUMNS).to_csv(self.metrics_path, mode="a", header=header, index=False)

    def _prepare(self, manifest, indices, epoch, step, domain, encode):
        config = self.config
        return prepare_batch(
            manifest, indices, config.augment_config, config.seed, epoch, step, domain,
            R=config.R, num_classes=config.num_classes, min_overlap=config.min_overlap,
            encode=encode, dtype=self.dtype, jobs=self.jobs,
        )

    def run(self):
        config = self.config
        self.output_dir.mkdir(parents=True, exist_ok=True)
        config.save(self.output_dir / RESOLVED_CONFIG)
        if not config.resume and self.metrics_path.exists():
            self.metrics_path.unlink()

        params, optimizer, start_epoch, global_step, consumed = self._initial_state()
        per_epoch = steps_per_epoch(self.source, self.target, config.source_batch_size, config.target_batch_size)
        logger.info(
            f"Training mode={config.mode} epochs={config.epochs} steps/epoch={per_epoch} "
            f"params={params.num_parameters()} "
            f"source={len(self.source)} target={len(self.target) if self.target is not None else 0}"
        )
        epochs_completed = start_epoch
        stopped = False
        for epoch in range(start_epoch, config.epochs):
            lr = lr_at(config, epoch)
            rows = []
            batches = paired_batches(
                self.source, self.target, config.source_batch_size, config.target_batch_size, config.seed, epoch
            )
            for batch in batches:
                # consumed before a resume
                if batch.step < consumed:
                    continue
                if config.max_steps and global_step >= config.max_steps:
                    stopped = True
                    break
                source_batch = self._prepare(self.source, batch.source, epoch, batch.step, "source", encode=True)
                target_batch = None
                if config.mode != "baseline":
                    target_batch = self._prepare(self.target, batch.target, epoch, batch.step, "target", encode=False)
                report = train_step(params, optimizer, source_batch, target_batch, config, lr, step=global_step)
                row = {"step": global_step, "epoch": epoch, "lr": lr, **report.scalars()}
                logger.debug(f"step {global_step}: L_det={row['L_det']:.4f} L_uda={row['L_uda']:.6f}")
                self._append_metrics(row)
                rows.append(row)
                global_step += 1
                consumed = batch.step + 1
            if rows:
                summary = pd.DataFrame(rows)[["L_det", "L_uda", "L_total"]].mean()
                logger.info(
                    f"Epoch {epoch + 1}/{config.epochs} lr={lr:g} steps={len(rows)} "
                    f"L_det={summary['L_det']:.4f} L_uda={summary['L_uda']:.6f} L_total={summary['L_total']:.4f}"
                )
            if stopped:
                break
            consumed = 0
            epochs_completed = epoch + 1
            if config.checkpoint_every and epochs_completed % config.checkpoint_every == 0:
                save_checkpoint(
                    self.output_dir / f"checkpoint_epoch{epochs_completed:03d}{SUFFIX}",
                    params, config, epochs_completed, global_step, optimizer,
                )

        last = save_checkpoint(
            self.output_dir / LAST_CHECKPOINT, params, config, epochs_completed, global_step, optimizer,
            epoch_step=consumed,
        )
        return TrainResult(params, optimizer, self.metrics_path, last, epochs_completed, global_step)


def train(config, source, target=None):
    return Trainer(config, source, target).run()

