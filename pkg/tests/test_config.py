from pathlib import Path

import pytest

from centeruda.data import AugmentConfig
from centeruda.errors import ConfigError
from centeruda.utils.config import TrainConfig, coerce, env_overrides, format_value

DEFAULT_INI = Path(__file__).resolve().parents[1] / "configs" / "default.ini"


def test_defaults():
    config = TrainConfig()
    assert config.mode == "baseline"
    assert config.R == 4
    assert config.lambda_entropy == 1e-4
    assert config.lambda_max_squares == 0.3
    assert config.learning_rate == 1e-4


def test_shipped_default_file_matches_builtin_defaults():
    assert TrainConfig.load(DEFAULT_INI, environ={}) == TrainConfig()


def test_ini_roundtrip():
    config = TrainConfig(mode="msl", seed=7, deterministic=True, stage_channels=(8, 16, 32), output_stride=8,
                         lambda_max_squares=0.25, resume="runs/a/last.auda")
    assert TrainConfig.from_ini(config.to_ini()) == config


def test_unknown_and_misplaced_keys_are_rejected():
    with pytest.raises(ConfigError, match="unknown"):
        TrainConfig.from_ini("[loss]\nlambda_kl = 1\n")
    with pytest.raises(ConfigError, match=r"belongs in \[experiment\]"):
        TrainConfig.from_ini("[loss]\nseed = 3\n")
    with pytest.raises(ConfigError):
        TrainConfig.from_ini("seed = 3\n")


def test_resolution_order(tmp_path):
    path = tmp_path / "exp.ini"
    path.write_text("[experiment]\nseed = 5\nmode = em\n")
    assert TrainConfig.load(path, environ={}).seed == 5
    from_env = TrainConfig.load(path, environ={"CENTERUDA_SEED": "9"})
    assert (from_env.seed, from_env.mode) == (9, "em")
    assert TrainConfig.load(path, environ={"CENTERUDA_SEED": "9"}, overrides={"seed": 11}).seed == 11


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        TrainConfig.load(tmp_path / "nope.ini", environ={})


def test_stride_must_match_stages():
    with pytest.raises(ConfigError, match="output_stride"):
        TrainConfig(output_stride=8)


@pytest.mark.parametrize(
    "changes",
    [
        {"mode": "fda"},
        {"dtype": "float16"},
        {"min_overlap": 1.0},
        {"lambda_entropy": -1.0},
        {"max_object_size": 200},
        {"scale_min": 1.2, "scale_max": 1.1},
    ],
)
def test_invalid_values(changes):
    with pytest.raises(ConfigError):
        TrainConfig(**changes)


def test_string_coercion():
    config = TrainConfig().with_strings({"deterministic": "yes", "epochs": "3", "stage_channels": "8, 16",
                                         "learning_rate": "5e-3"})
    assert config.deterministic is True
    assert config.epochs == 3
    assert config.stage_channels == (8, 16)
    assert config.learning_rate == 5e-3
    with pytest.raises(ConfigError, match="epochs"):
        TrainConfig().with_strings({"epochs": "three"})
    with pytest.raises(ConfigError):
        coerce("augment", "maybe", True)


def test_env_overrides_only_reads_known_fields():
    environ = {"CENTERUDA_MODE": "em", "CENTERUDA_LOG_LEVEL": "DEBUG", "HOME": "/root"}
    assert env_overrides(environ) == {"mode": "em"}


def test_format_value():
    assert format_value(True) == "true"
    assert format_value((32, 64)) == "32,64"
    assert format_value(1e-08) == "1e-08"


def test_from_dict_rejects_unknown_keys():
    assert TrainConfig.from_dict({"stage_channels": [8, 16], "output_stride": 4}).stage_channels == (8, 16)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"lambda_kl": 1.0})


def test_derived_views():
    config = TrainConfig(stem_channels=4, stage_channels=(8, 8), head_channels=8, lambda_entropy=0.5,
                         softmax_on_logits=True, domain="target", min_objects=0)
    arch = config.architecture
    assert arch.stage_channels == (8, 8) and arch.output_stride == config.R
    weights = config.loss_weights
    assert weights.entropy == 0.5 and weights.softmax_on_logits
    assert config.augment_config.scale_range == (0.9, 1.1)
    assert config.replace(augment=False).augment_config == AugmentConfig.identity()
    spec = config.scene_spec
    assert spec.style.domain == "target"
    assert spec.object_count == (0, 5)
    assert spec.image_size == (128, 128)
