import configparser
import dataclasses
import os
from dataclasses import dataclass, field, fields

from dotenv import load_dotenv

from centeruda.errors import ConfigError

# Load .env from project root (two levels above this package directory)
current_dir = os.path.dirname(os.path.abspath(__file__))
project_root = os.path.dirname(os.path.dirname(current_dir))
load_dotenv(os.path.join(project_root, '.env'))

ENV_PREFIX = "CENTERUDA_"


class Config:
    LOG_LEVEL = os.getenv('CENTERUDA_LOG_LEVEL', 'INFO')
    DEBUG_CHECKS = os.getenv('CENTERUDA_DEBUG', '0').lower() in ('1', 'true', 'yes')
    OUTPUT_ROOT = os.getenv('CENTERUDA_OUTPUT_ROOT', 'runs')
    JOBS = int(os.getenv('CENTERUDA_JOBS', 1))


MODES = ("baseline", "em", "msl")


def _opt(section, default, help):
    return field(default=default, metadata={"section": section, "help": help})


@dataclass
class TrainConfig:
    """Every experiment knob, grouped into INI sections through field metadata."""

    # [experiment]
    mode: str = _opt("experiment", "baseline", "training objective: baseline, em or msl")
    seed: int = _opt("experiment", 1, "master seed for init, shuffling and augmentation")
    deterministic: bool = _opt("experiment", False, "single worker, reproducible outputs")
    dtype: str = _opt("experiment", "float32", "float32 for training, float64 for checks")
    num_classes: int = _opt("experiment", 6, "number of object classes C")
    jobs: int = _opt("experiment", Config.JOBS, "worker count for per-image data work")

    # [optimizer]
    epochs: int = _opt("optimizer", 40, "training epochs")
    learning_rate: float = _opt("optimizer", 1e-4, "Adam learning rate")
    weight_decay: float = _opt("optimizer", 1e-4, "L2 coefficient added to gradients")
    lr_decay_epoch: int = _opt("optimizer", 30, "epoch from which lr is multiplied by gamma")
    lr_gamma: float = _opt("optimizer", 0.1, "step decay factor")
    adam_beta1: float = _opt("optimizer", 0.9, "Adam first-moment decay")
    adam_beta2: float = _opt("optimizer", 0.999, "Adam second-moment decay")
    adam_eps: float = _opt("optimizer", 1e-8, "Adam denominator epsilon")
    source_batch_size: int = _opt("optimizer", 16, "labeled source images per step")
    target_batch_size: int = _opt("optimizer", 16, "unlabeled target images per step")
    checkpoint_every: int = _opt("optimizer", 5, "save a checkpoint every N epochs (0 = only last)")
    max_steps: int = _opt("optimizer", 0, "stop after N optimizer steps (0 = no limit)")

    # [loss]
    lambda_heatmap: float = _opt("loss", 1.0, "weight of the focal heatmap loss")
    lambda_size: float = _opt("loss", 0.1, "weight of the size L1 loss")
    lambda_offset: float = _opt("loss", 1.0, "weight of the offset L1 loss")
    lambda_entropy: float = _opt("loss", 1e-4, "weight of the entropy loss (em mode)")
    lambda_max_squares: float = _opt("loss", 0.3, "weight of the maximum squares loss (msl mode)")
    focal_alpha: float = _opt("loss", 2.0, "focal loss exponent alpha")
    focal_beta: float = _opt("loss", 4.0, "focal loss penalty-reduction exponent beta")
    softmax_on_logits: bool = _opt("loss", False, "apply the class softmax to logits instead of the sigmoid heatmap")

    # [model]
    stem_channels: int = _opt("model", 16, "stem convolution width")
    stage_channels: tuple = _opt("model", (32, 64), "widths of the stride-2 stages")
    residual_blocks: int = _opt("model", 2, "residual 3x3 blocks after the stages")
    head_channels: int = _opt("model", 64, "hidden width of each head")
    decoder_stages: int = _opt("model", 0, "extra down/up-sampling pairs after the residual blocks")
    output_stride: int = _opt("model", 4, "R, input size over heatmap size")

    # [decode]
    top_k: int = _opt("decode", 100, "peaks kept jointly across classes")
    score_threshold: float = _opt("decode", 0.1, "minimum heatmap score of a detection")
    min_overlap: float = _opt("decode", 0.7, "IoU the Gaussian radius must preserve")
    iou_threshold: float = _opt("decode", 0.5, "IoU for a true positive in AP")

    # [augment]
    augment: bool = _opt("augment", True, "enable training-time augmentation")
    hflip_prob: float = _opt("augment", 0.5, "probability of a horizontal flip")
    rot90_prob: float = _opt("augment", 0.25, "probability of a random 90-degree rotation")
    max_translate: int = _opt("augment", 8, "maximum translation in pixels")
    scale_min: float = _opt("augment", 0.9, "lower bound of the uniform scale factor")
    scale_max: float = _opt("augment", 1.1, "upper bound of the uniform scale factor")
    brightness: float = _opt("augment", 0.1, "maximum absolute brightness shift")
    noise_std: float = _opt("augment", 0.02, "maximum Gaussian noise sigma")

    # [data]
    image_size: int = _opt("data", 128, "square image side in pixels")
    count: int = _opt("data", 100, "images to generate")
    domain: str = _opt("data", "source", "generated domain style: source or target")
    labeled: bool = _opt("data", True, "write annotations for generated images")
    min_objects: int = _opt("data", 1, "minimum objects per generated image")
    max_objects: int = _opt("data", 5, "maximum objects per generated image")
    min_object_size: int = _opt("data", 12, "minimum object extent in pixels")
    max_object_size: int = _opt("data", 40, "maximum object extent in pixels")
    target_intensity_shift: float = _opt("data", 0.15, "maximum per-image intensity shift of the target style")
    target_noise_std: float = _opt("data", 0.06, "Gaussian noise sigma of the target style")
    target_blur_radius: float = _opt("data", 1.2, "Gaussian blur radius of the target style")
    target_texture: float = _opt("data", 0.25, "background texture amplitude of the target style")

    # [paths]
    source_manifest: str = _opt("paths", "", "labeled source annotations.json")
    target_manifest: str = _opt("paths", "", "unlabeled target annotations.json")
    test_manifest: str = _opt("paths", "", "labeled target test annotations.json")
    output_dir: str = _opt("paths", Config.OUTPUT_ROOT, "directory for outputs")
    checkpoint: str = _opt("paths", "", "checkpoint to evaluate or export from")
    resume: str = _opt("paths", "", "checkpoint to resume training from")

    # [eval]
    throughput_iterations: int = _opt("eval", 20, "timed iterations for throughput")
    warmup_iterations: int = _opt("eval", 3, "untimed warmup iterations for throughput")
    export_limit: int = _opt("eval", 8, "images rendered by export-maps")
    gradient_step: float = _opt("eval", 0.01, "probability grid step of analyze-gradients")

    def __post_init__(self):
        self.validate()

    @classmethod
    def section_of(cls, name):
        return _FIELDS[name].metadata["section"]

    @property
    def R(self):
        return self.output_stride

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {', '.join(MODES)}, got {self.mode!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.domain not in ("source", "target"):
            raise ConfigError(f"domain must be source or target, got {self.domain!r}")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        for name in ("epochs", "source_batch_size", "target_batch_size", "top_k", "image_size",
                     "stem_channels", "head_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.stage_channels or any(c < 1 for c in self.stage_channels):
            raise ConfigError(f"stage_channels must be positive, got {self.stage_channels}")
        if self.output_stride != 2 ** len(self.stage_channels):
            raise ConfigError(
                f"output_stride {self.output_stride} does not match "
                f"{len(self.stage_channels)} stride-2 stages (expected {2 ** len(self.stage_channels)})"
            )
        for name in ("lambda_heatmap", "lambda_size", "lambda_offset", "lambda_entropy",
                     "lambda_max_squares", "learning_rate", "weight_decay", "noise_std",
                     "brightness", "target_noise_std", "target_blur_radius"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative, got {getattr(self, name)}")
        if not 0.0 < self.min_overlap < 1.0:
            raise ConfigError(f"min_overlap must be in (0, 1), got {self.min_overlap}")
        if self.min_objects < 0 or self.max_objects < self.min_objects:
            raise ConfigError(f"invalid object count range [{self.min_objects}, {self.max_objects}]")
        if self.min_object_size < 2 or self.max_object_size < self.min_object_size:
            raise ConfigError(
                f"invalid object size range [{self.min_object_size}, {self.max_object_size}]"
            )
        if self.max_object_size >= self.image_size:
            raise ConfigError("max_object_size must be smaller than image_size")
        if not 0.0 < self.scale_min <= self.scale_max:
            raise ConfigError(f"invalid scale range [{self.scale_min}, {self.scale_max}]")

    # derived views

    @property
    def architecture(self):
        from centeruda.model import ArchitectureDescriptor

        return ArchitectureDescriptor(
            stem_channels=self.stem_channels,
            stage_channels=tuple(self.stage_channels),
            residual_blocks=self.residual_blocks,
            head_channels=self.head_channels,
            decoder_stages=self.decoder_stages,
        )

    @property
    def loss_weights(self):
        from centeruda.losses import LossWeights

        return LossWeights(
            heatmap=self.lambda_heatmap,
            size=self.lambda_size,
            offset=self.lambda_offset,
            entropy=self.lambda_entropy,
            max_squares=self.lambda_max_squares,
            alpha=self.focal_alpha,
            beta=self.focal_beta,
            softmax_on_logits=self.softmax_on_logits,
        )

    @property
    def augment_config(self):
        from centeruda.data import AugmentConfig

        if not self.augment:
            return AugmentConfig.identity()
        return AugmentConfig(
            hflip_prob=self.hflip_prob,
            rot90_prob=self.rot90_prob,
            max_translate=self.max_translate,
            scale_range=(self.scale_min, self.scale_max),
            brightness=self.brightness,
            noise_std=self.noise_std,
        )

    @property
    def scene_spec(self):
        from centeruda.data import SceneSpec, DomainStyle

        return SceneSpec(
            image_size=(self.image_size, self.image_size),
            num_classes=self.num_classes,
            object_count=(self.min_objects, self.max_objects),
            object_size=(self.min_object_size, self.max_object_size),
            style=DomainStyle(
                domain=self.domain,
                intensity_shift=self.target_intensity_shift,
                noise_std=self.target_noise_std,
                blur_radius=self.target_blur_radius,
                texture=self.target_texture,
            ),
            labeled=self.labeled,
        )

    # serialization

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values):
        unknown = sorted(set(values) - set(_FIELDS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        values = dict(values)
        if "stage_channels" in values:
            values["stage_channels"] = tuple(int(c) for c in values["stage_channels"])
        return cls(**values)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_ini(self):
        lines = []
        section = None
        for f in fields(self):
            if f.metadata["section"] != section:
                if section is not None:
                    lines.append("")
                section = f.metadata["section"]
                lines.append(f"[{section}]")
            lines.append(f"{f.name} = {format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_ini())

    @classmethod
    def from_ini(cls, text, base=None):
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(text)
        except configparser.Error as e:
            raise ConfigError(f"malformed config file: {e}") from e
        values = {}
        for section in parser.sections():
            for key, raw in parser.items(section):
                if key not in _FIELDS:
                    raise ConfigError(f"unknown config key [{section}] {key}")
                expected = _FIELDS[key].metadata["section"]
                if expected != section:
                    raise ConfigError(f"config key {key} belongs in [{expected}], found in [{section}]")
                values[key] = raw
        return (base or cls()).with_strings(values)

    @classmethod
    def load(cls, path=None, environ=None, overrides=None):
        """Resolve defaults < file < CENTERUDA_* environment < explicit overrides."""
        config = cls()
        if path:
            try:
                with open(path) as fh:
                    config = cls.from_ini(fh.read(), base=config)
            except OSError as e:
                raise ConfigError(f"cannot read config file {path}: {e.strerror}") from e
        config = config.with_strings(env_overrides(os.environ if environ is None else environ))
        if overrides:
            config = config.replace(**overrides)
        return config

    def with_strings(self, values):
        changes = {}
        for key, raw in values.items():
            if key not in _FIELDS:
                raise ConfigError(f"unknown config key {key}")
            changes[key] = coerce(key, raw, getattr(self, key))
        return self.replace(**changes) if changes else self


_FIELDS = {f.name: f for f in fields(TrainConfig)}


def env_overrides(environ):
    values = {}
    for name in _FIELDS:
        key = ENV_PREFIX + name.upper()
        if key in environ:
            values[name] = environ[key]
    return values


def format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def coerce(name, raw, default):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError as e:
        raise ConfigError(f"invalid value for {name}: {raw!r}") from e
    return text
