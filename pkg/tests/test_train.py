import math

import numpy as np
import pandas as pd
import pytest

from centeruda import tensor as T
from centeruda.checkpoint import load_checkpoint
from centeruda.data import AugmentConfig, prepare_batch, subset
from centeruda.errors import ConfigError, DataError, NumericalError, OptimizerError
from centeruda.evaluation import evaluate
from centeruda.losses import entropy_loss
from centeruda.model import DetectorParams, forward
from centeruda.train import (
    LAST_CHECKPOINT,
    METRIC_COLUMNS,
    RESOLVED_CONFIG,
    OptimizerState,
    Trainer,
    adam_step,
    lr_at,
    train,
    train_step,
)
from centeruda.utils.config import TrainConfig

from conftest import TINY_ARCH, TINY_CLASSES, tiny_config


def _single(value):
    return DetectorParams(TINY_ARCH, TINY_CLASSES, {"w": T.parameter(np.array([value]))})


def test_adam_first_step():
    params = _single(1.0)
    params["w"].grad = np.array([1.0])
    state = OptimizerState.zeros(params)
    adam_step(params, state, lr=1e-3)
    assert params["w"].data[0] == pytest.approx(0.999, abs=1e-9)
    assert state.step == 1
    assert params["w"].grad is None


def test_adam_with_zero_lr_keeps_parameters():
    params = _single(2.5)
    params["w"].grad = np.array([-4.0])
    adam_step(params, OptimizerState.zeros(params), lr=0.0, weight_decay=0.1)
    assert params["w"].data[0] == 2.5


def test_adam_requires_every_gradient():
    params = _single(1.0)
    with pytest.raises(OptimizerError, match="w"):
        adam_step(params, OptimizerState.zeros(params), lr=1e-3)


def test_learning_rate_step_decay():
    config = TrainConfig()
    assert lr_at(config, 0) == 1e-4
    assert lr_at(config, 29) == 1e-4
    assert lr_at(config, 30) == pytest.approx(1e-5)


def test_target_branch_only_reaches_heatmap_head(tiny_params, target_manifest):
    batch = prepare_batch(target_manifest, [0, 1], AugmentConfig.identity(), seed=0, epoch=0, step=0,
                          domain="target", dtype=np.float64)
    with T.GradientTape():
        loss = entropy_loss(forward(tiny_params, batch.images, heads=("heatmap",)).heatmap)
    T.backward(loss)
    for head in ("offset", "size"):
        assert all(tiny_params[p].grad is None for p in tiny_params.head_paths(head))
    assert np.any(tiny_params["head.heatmap.out.weight"].grad)


def test_non_finite_loss_stops_training(tmp_path, tiny_params, source_manifest):
    config = tiny_config(tmp_path)
    batch = prepare_batch(source_manifest, [0, 1], AugmentConfig.identity(), seed=0, epoch=0, step=0,
                          domain="source", num_classes=TINY_CLASSES, dtype=np.float64)
    tiny_params["head.heatmap.out.bias"].data[:] = np.nan
    with pytest.raises(NumericalError) as info:
        train_step(tiny_params, OptimizerState.zeros(tiny_params), batch, None, config, lr=1e-3, step=12)
    assert info.value.step == 12


def test_trainer_input_checks(tmp_path, source_manifest, target_manifest):
    with pytest.raises(DataError):
        Trainer(tiny_config(tmp_path), target_manifest)
    with pytest.raises(ConfigError):
        Trainer(tiny_config(tmp_path, mode="em"), source_manifest)
    with pytest.raises(ConfigError):
        Trainer(tiny_config(tmp_path, num_classes=TINY_CLASSES + 1), source_manifest)


def test_training_writes_metrics_and_checkpoint(tmp_path, source_manifest, target_manifest):
    config = tiny_config(tmp_path, mode="msl", epochs=2, checkpoint_every=1)
    result = train(config, source_manifest, target_manifest)
    out = tmp_path / "run"

    assert result.epochs_completed == 2
    assert result.steps == 6
    assert (out / LAST_CHECKPOINT).is_file()
    assert (out / "checkpoint_epoch001.auda").is_file()
    assert TrainConfig.load(out / RESOLVED_CONFIG, environ={}) == config

    metrics = pd.read_csv(out / "metrics.csv")
    assert list(metrics.columns) == METRIC_COLUMNS
    assert metrics["step"].tolist() == list(range(6))
    assert metrics["epoch"].tolist() == [0, 0, 0, 1, 1, 1]
    assert metrics["L_uda"].notna().all()
    assert (metrics["target_mean_entropy"].between(0.0, 1.0)).all()


def test_baseline_metrics_leave_uda_empty(tmp_path, source_manifest):
    train(tiny_config(tmp_path), source_manifest)
    metrics = pd.read_csv(tmp_path / "run" / "metrics.csv")
    assert len(metrics) == 2
    assert metrics["L_uda"].isna().all()
    np.testing.assert_allclose(metrics["L_total"], metrics["L_det"])


def test_zero_weight_entropy_matches_baseline(tmp_path, source_manifest, target_manifest):
    base = train(tiny_config(tmp_path, output_dir=str(tmp_path / "base")), source_manifest, target_manifest)
    em = train(
        tiny_config(tmp_path, mode="em", lambda_entropy=0.0, output_dir=str(tmp_path / "em")),
        source_manifest,
        target_manifest,
    )
    assert base.steps == em.steps == 3
    for path in base.params.paths():
        np.testing.assert_array_equal(base.params[path].data, em.params[path].data)


def test_zero_weight_max_squares_matches_baseline(tmp_path, source_manifest, target_manifest):
    base = train(tiny_config(tmp_path, output_dir=str(tmp_path / "base")), source_manifest, target_manifest)
    msl = train(
        tiny_config(tmp_path, mode="msl", lambda_max_squares=0.0, output_dir=str(tmp_path / "msl")),
        source_manifest,
        target_manifest,
    )
    assert base.steps == msl.steps
    for path in base.params.paths():
        np.testing.assert_array_equal(base.params[path].data, msl.params[path].data)


def test_repeated_deterministic_runs_are_byte_identical(tmp_path, source_manifest, target_manifest):
    config = tiny_config(tmp_path, mode="msl", epochs=2, checkpoint_every=1)
    train(config, source_manifest, target_manifest)
    first = (tmp_path / "run").rename(tmp_path / "first")
    train(config, source_manifest, target_manifest)

    names = sorted(p.name for p in first.iterdir())
    assert names == sorted(p.name for p in (tmp_path / "run").iterdir())
    assert {"metrics.csv", LAST_CHECKPOINT, "checkpoint_epoch002.auda"} <= set(names)
    for name in names:
        assert (first / name).read_bytes() == (tmp_path / "run" / name).read_bytes(), name


def test_resume_continues_exactly(tmp_path, source_manifest):
    straight = train(tiny_config(tmp_path, epochs=2, output_dir=str(tmp_path / "straight")), source_manifest)

    first = train(tiny_config(tmp_path, epochs=1, output_dir=str(tmp_path / "split")), source_manifest)
    resumed = train(
        tiny_config(tmp_path, epochs=2, output_dir=str(tmp_path / "split"), resume=str(first.checkpoint_path)),
        source_manifest,
    )
    assert resumed.epochs_completed == 2
    assert resumed.optimizer.step == straight.optimizer.step == 4
    for path in straight.params.paths():
        np.testing.assert_array_equal(straight.params[path].data, resumed.params[path].data)

    a = pd.read_csv(tmp_path / "straight" / "metrics.csv")
    b = pd.read_csv(tmp_path / "split" / "metrics.csv")
    pd.testing.assert_frame_equal(a, b)


def test_resume_after_mid_epoch_stop_continues_exactly(tmp_path, source_manifest):
    straight = train(tiny_config(tmp_path, epochs=2, output_dir=str(tmp_path / "straight")), source_manifest)

    stopped = train(tiny_config(tmp_path, epochs=2, max_steps=3, output_dir=str(tmp_path / "split")), source_manifest)
    assert stopped.steps == 3 and stopped.epochs_completed == 1
    assert load_checkpoint(stopped.checkpoint_path).epoch_step == 1
    resumed = train(
        tiny_config(tmp_path, epochs=2, output_dir=str(tmp_path / "split"), resume=str(stopped.checkpoint_path)),
        source_manifest,
    )
    assert resumed.steps == resumed.optimizer.step == straight.optimizer.step == 4
    for path in straight.params.paths():
        np.testing.assert_array_equal(straight.params[path].data, resumed.params[path].data)

    metrics = pd.read_csv(tmp_path / "split" / "metrics.csv")
    assert list(zip(metrics["step"], metrics["epoch"])) == [(0, 0), (1, 0), (2, 1), (3, 1)]
    pd.testing.assert_frame_equal(pd.read_csv(tmp_path / "straight" / "metrics.csv"), metrics)
    assert load_checkpoint(resumed.checkpoint_path).epoch_step == 0


def test_max_steps_stops_mid_epoch(tmp_path, source_manifest):
    result = train(tiny_config(tmp_path, epochs=3, max_steps=3), source_manifest)
    assert result.steps == 3
    assert result.epochs_completed == 1


@pytest.mark.slow
def test_overfits_a_single_image(tmp_path, source_manifest):
    one = subset(source_manifest, 1)
    config = tiny_config(tmp_path, epochs=200, source_batch_size=1, learning_rate=5e-3, lr_decay_epoch=150,
                         augment=False)
    result = train(config, one)
    metrics = pd.read_csv(tmp_path / "run" / "metrics.csv")
    assert len(metrics) == 200
    assert metrics["L_det"].min() < 0.1 * metrics["L_det"].iloc[0]
    assert evaluate(result.params, one).mAP == 1.0


@pytest.mark.slow
def test_entropy_minimization_lowers_target_entropy(tmp_path, source_manifest, target_manifest):
    common = dict(epochs=10, learning_rate=5e-3, augment=False)
    base = train(tiny_config(tmp_path, output_dir=str(tmp_path / "base"), **common), source_manifest, target_manifest)
    em = train(
        tiny_config(tmp_path, mode="em", lambda_entropy=1.0, output_dir=str(tmp_path / "em"), **common),
        source_manifest,
        target_manifest,
    )
    batch = prepare_batch(target_manifest, range(len(target_manifest)), AugmentConfig.identity(), seed=0,
                          epoch=0, step=0, domain="target", dtype=np.float64)

    def target_entropy(params):
        return entropy_loss(forward(params, batch.images, heads=("heatmap",)).heatmap).item()

    assert target_entropy(em.params) < target_entropy(base.params)
    assert not math.isnan(target_entropy(em.params))
