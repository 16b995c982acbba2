"""Toy anchorless detector: a small convolutional backbone followed by three heads.

The heatmap head predicts per-class center confidences, the offset head the
sub-cell discretization correction, and the size head box width and height in
heatmap-grid units.
"""
import logging
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from centeruda import tensor as T
from centeruda.errors import ConfigError, ShapeError
from centeruda.tensor import Tensor

logger = logging.getLogger(__name__)

HEADS = ("heatmap", "offset", "size")
HEATMAP_PRIOR = 0.01
# final 1x1 head layers start near zero so the initial heatmap sits at the prior
HEAD_OUTPUT_STD = 1e-3
# keeps the sigmoid strictly inside (0, 1) in float32
HEATMAP_CLAMP = 1e-4


@dataclass(frozen=True)
class ArchitectureDescriptor:
    stem_channels: int = 16
    stage_channels: tuple = (32, 64)
    residual_blocks: int = 2
    head_channels: int = 64
    decoder_stages: int = 0

    @property
    def output_stride(self):
        return 2 ** len(self.stage_channels)

    @property
    def input_multiple(self):
        return self.output_stride * 2 ** self.decoder_stages

    @property
    def feature_channels(self):
        return self.stage_channels[-1]

    def validate(self):
        if not self.stage_channels:
            raise ConfigError("architecture needs at least one stride-2 stage")
        widths = (self.stem_channels, self.head_channels, *self.stage_channels)
        if any(int(w) < 1 for w in widths):
            raise ConfigError(f"architecture has a zero-width layer: {self}")
        if self.residual_blocks < 0 or self.decoder_stages < 0:
            raise ConfigError(f"block counts must be nonnegative: {self}")

    def to_dict(self):
        d = asdict(self)
        d["stage_channels"] = [int(c) for c in self.stage_channels]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["stage_channels"] = tuple(int(c) for c in d["stage_channels"])
        return cls(**d)


@dataclass
class ModelOutput:
    heatmap_logits: Tensor
    heatmap: Tensor
    offset: Optional[Tensor] = None
    size: Optional[Tensor] = None


class DetectorParams:
    """Named parameter tensors plus the architecture that produced them."""

    def __init__(self, architecture, num_classes, tensors):
        self.architecture = architecture
        self.num_classes = num_classes
        self.tensors = dict(tensors)

    def __getitem__(self, path):
        return self.tensors[path]

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def paths(self):
        return list(self.tensors)

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    @property
    def output_stride(self):
        return self.architecture.output_stride

    def head_paths(self, head):
        return [p for p in self.tensors if p.startswith(f"head.{head}.")]

    def num_parameters(self):
        return int(sum(t.size for t in self.tensors.values()))

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def state_arrays(self):
        return {path: t.data.copy() for path, t in self.tensors.items()}

    def astype(self, dtype):
        return DetectorParams(
            self.architecture,
            self.num_classes,
            {path: T.parameter(t.data.astype(dtype)) for path, t in self.tensors.items()},
        )


def build_model(architecture, num_classes, seed, dtype=np.float32):
    architecture.validate()
    if num_classes < 1:
        raise ConfigError(f"num_classes must be >= 1, got {num_classes}")
    rng = np.random.default_rng(seed)
    tensors = {}

    def conv(name, cin, cout, k, bias_value=0.0, std=None):
        if std is None:
            std = np.sqrt(2.0 / (cin * k * k))
        tensors[f"{name}.weight"] = T.parameter(rng.normal(0.0, std, size=(cout, cin, k, k)).astype(dtype))
        tensors[f"{name}.bias"] = T.parameter(np.full(cout, bias_value, dtype=dtype))

    conv("backbone.stem", 3, architecture.stem_channels, 3)
    cin = architecture.stem_channels
    for i, cout in enumerate(architecture.stage_channels, start=1):
        conv(f"backbone.stage{i}", cin, cout, 3)
        cin = cout
    for b in range(1, architecture.residual_blocks + 1):
        conv(f"backbone.block{b}.conv1", cin, cin, 3)
        conv(f"backbone.block{b}.conv2", cin, cin, 3)
    for d in range(1, architecture.decoder_stages + 1):
        conv(f"backbone.down{d}", cin, cin, 3)
    for d in range(1, architecture.decoder_stages + 1):
        conv(f"backbone.up{d}", cin, cin, 3)

    prior_bias = -np.log((1.0 - HEATMAP_PRIOR) / HEATMAP_PRIOR)
    for head, out_channels in (("heatmap", num_classes), ("offset", 2), ("size", 2)):
        conv(f"head.{head}.conv", cin, architecture.head_channels, 3)
        conv(
            f"head.{head}.out",
            architecture.head_channels,
            out_channels,
            1,
            bias_value=prior_bias if head == "heatmap" else 0.0,
            std=HEAD_OUTPUT_STD,
        )

    params = DetectorParams(architecture, num_classes, tensors)
    logger.debug(f"Built detector with {params.num_parameters()} parameters (seed={seed})")
    return params


def _conv(params, name, x, stride=1):
    weight = params[f"{name}.weight"]
    return T.conv2d(x, weight, params[f"{name}.bias"], stride=stride, padding=weight.shape[2] // 2)


def _features(params, x):
    arch = params.architecture
    x = T.relu(_conv(params, "backbone.stem", x))
    for i in range(1, len(arch.stage_channels) + 1):
        x = T.relu(_conv(params, f"backbone.stage{i}", x, stride=2))
    for b in range(1, arch.residual_blocks + 1):
        y = T.relu(_conv(params, f"backbone.block{b}.conv1", x))
        y = _conv(params, f"backbone.block{b}.conv2", y)
        x = T.relu(x + y)
    skips = []
    for d in range(1, arch.decoder_stages + 1):
        skips.append(x)
        x = T.relu(_conv(params, f"backbone.down{d}", x, stride=2))
    for d in range(1, arch.decoder_stages + 1):
        x = T.relu(_conv(params, f"backbone.up{d}", T.upsample2x(x)) + skips.pop())
    return x


def _head(params, name, features):
    hidden = T.relu(_conv(params, f"head.{name}.conv", features))
    return _conv(params, f"head.{name}.out", hidden)


def forward(params, images, heads=HEADS):
    """Run the detector on an N x 3 x H x W batch.

    ``heads`` selects which of offset/size are computed; the heatmap head always runs.
    """
    unknown = set(heads) - set(HEADS)
    if unknown:
        raise ConfigError(f"unknown heads: {sorted(unknown)}")
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=params.dtype))
    if x.ndim == 3:
        x = x.reshape((1, *x.shape))
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeError("forward", f"expected N x 3 x H x W images, got shape {x.shape}", dim=1)
    multiple = params.architecture.input_multiple
    h, w = x.shape[2], x.shape[3]
    if h % multiple or w % multiple:
        raise ConfigError(f"input size {h}x{w} is not divisible by {multiple}")

    features = _features(params, x)
    logits = _head(params, "heatmap", features)
    heatmap = T.clamp(T.sigmoid(logits), HEATMAP_CLAMP, 1.0 - HEATMAP_CLAMP)
    return ModelOutput(
        heatmap_logits=logits,
        heatmap=heatmap,
        offset=_head(params, "offset", features) if "offset" in heads else None,
        size=_head(params, "size", features) if "size" in heads else None,
    )
