"""Binary checkpoint files (``.auda``).

Layout, all integers little-endian::

    b"AUDA" | u32 version | u32 header length | JSON header | u32 record count | records

Each record is ``u16 path length | path | u8 dtype code | u8 ndim | u32 dims | raw data``.
Parameter records use their model path; Adam moments are stored as
``adam.m.<path>`` and ``adam.v.<path>``.
"""
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from centeruda import tensor as T
from centeruda.errors import CheckpointError, ConfigError
from centeruda.model import ArchitectureDescriptor, DetectorParams
from centeruda.utils.config import TrainConfig

logger = logging.getLogger(__name__)

MAGIC = b"AUDA"
VERSION = 1
SUFFIX = ".auda"
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {code: dtype for dtype, code in _DTYPE_CODES.items()}
_MOMENT_PREFIX = ("adam.m.", "adam.v.")


@dataclass
class Checkpoint:
    params: DetectorParams
    config: Optional[TrainConfig] = None
    epoch: int = 0
    step: int = 0
    epoch_step: int = 0
    optimizer_step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @property
    def architecture(self):
        return self.params.architecture


def _record(path, array):
    array = np.ascontiguousarray(array)
    if array.dtype not in _DTYPE_CODES:
        raise CheckpointError(f"unsupported dtype {array.dtype} for {path}")
    name = path.encode("utf-8")
    parts = [
        struct.pack("<H", len(name)),
        name,
        struct.pack("<BB", _DTYPE_CODES[array.dtype], array.ndim),
        struct.pack(f"<{array.ndim}I", *array.shape),
        array.astype(array.dtype.newbyteorder("<"), copy=False).tobytes(),
    ]
    return b"".join(parts)


def encode_checkpoint(params, config=None, epoch=0, step=0, optimizer=None, epoch_step=0):
    """``epoch`` counts completed epochs; ``epoch_step`` batches already consumed from the next one."""
    header = {
        "architecture": params.architecture.to_dict(),
        "num_classes": int(params.num_classes),
        "config": config.to_dict() if config is not None else None,
        "epoch": int(epoch),
        "step": int(step),
        "epoch_step": int(epoch_step),
        "optimizer_step": int(optimizer.step) if optimizer is not None else 0,
    }
    records = [_record(path, t.data) for path, t in params.items()]
    if optimizer is not None:
        for path in params.paths():
            records.append(_record(f"adam.m.{path}", optimizer.m[path]))
            records.append(_record(f"adam.v.{path}", optimizer.v[path]))
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return b"".join([
        MAGIC,
        struct.pack("<II", VERSION, len(header_bytes)),
        header_bytes,
        struct.pack("<I", len(records)),
        *records,
    ])


def save_checkpoint(path, params, config=None, epoch=0, step=0, optimizer=None, epoch_step=0):
    path = Path(path)
    payload = encode_checkpoint(params, config, epoch, step, optimizer, epoch_step)
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp.write_bytes(payload)
        tmp.replace(path)
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint {path}: {e}") from e
    logger.info(f"Saved checkpoint {path} (epoch {epoch}, step {step}, {len(payload)} bytes)")
    return path


class _Reader:
    def __init__(self, data, source):
        self.data = data
        self.pos = 0
        self.source = source

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.source}: truncated at byte {self.pos} (needed {n} more)")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(data, source="<bytes>"):
    """Parse a whole checkpoint; nothing is returned unless every record is valid."""
    reader = _Reader(data, source)
    magic = reader.take(len(MAGIC))
    if magic != MAGIC:
        raise CheckpointError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    version, header_len = reader.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported format version {version}")
    try:
        header = json.loads(reader.take(header_len).decode("utf-8"))
        architecture = ArchitectureDescriptor.from_dict(header["architecture"])
        config = TrainConfig.from_dict(header["config"]) if header.get("config") else None
    except (ValueError, KeyError, TypeError, ConfigError) as e:
        raise CheckpointError(f"{source}: corrupt header ({e})") from e

    (count,) = reader.unpack("<I")
    arrays = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        path = reader.take(name_len).decode("utf-8")
        code, ndim = reader.unpack("<BB")
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"{source}: unknown dtype code {code} for {path}")
        shape = reader.unpack(f"<{ndim}I")
        dtype = _CODE_DTYPES[code].newbyteorder("<")
        raw = reader.take(int(np.prod(shape, dtype=np.int64)) * dtype.itemsize)
        if path in arrays:
            raise CheckpointError(f"{source}: duplicate record {path}")
        arrays[path] = np.frombuffer(raw, dtype=dtype).astype(_CODE_DTYPES[code]).reshape(shape)
    if reader.pos != len(data):
        raise CheckpointError(f"{source}: {len(data) - reader.pos} trailing bytes")

    tensors = {p: T.parameter(a) for p, a in arrays.items() if not p.startswith(_MOMENT_PREFIX)}
    m = {p[len("adam.m."):]: a for p, a in arrays.items() if p.startswith("adam.m.")}
    v = {p[len("adam.v."):]: a for p, a in arrays.items() if p.startswith("adam.v.")}
    if m and (set(m) != set(tensors) or set(v) != set(tensors)):
        raise CheckpointError(f"{source}: optimizer moments do not cover the parameters")
    params = DetectorParams(architecture, header["num_classes"], tensors)
    return Checkpoint(
        params=params,
        config=config,
        epoch=header["epoch"],
        step=header["step"],
        epoch_step=header.get("epoch_step", 0),
        optimizer_step=header["optimizer_step"],
        m=m,
        v=v,
    )


def load_checkpoint(path):
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    checkpoint = decode_checkpoint(data, source=str(path))
    logger.debug(f"Loaded checkpoint {path} (epoch {checkpoint.epoch}, {len(checkpoint.params)} tensors)")
    return checkpoint


def check_compatible(checkpoint, architecture, num_classes):
    """Refuse to resume into a model with a different shape."""
    if checkpoint.architecture != architecture or checkpoint.params.num_classes != num_classes:
        raise CheckpointError(
            "checkpoint architecture does not match the configured model: "
            f"checkpoint {checkpoint.architecture.to_dict()} with {checkpoint.params.num_classes} classes, "
            f"config {architecture.to_dict()} with {num_classes} classes"
        )
