"""
Checkpoints
Binary snapshot of config, step counter, named parameters and optimizer
buffers. Tensors reuse the PLKA blob format; everything is little-endian.
"""

import os
import struct
import tempfile
from dataclasses import dataclass, field

from config import ConfigError, RunConfig
from tensor_core import ShapeError, tensor_from_bytes, tensor_to_bytes

CHECKPOINT_MAGIC = b"PLKC"
CHECKPOINT_VERSION = 1
OPTIMIZER_PREFIX = "opt."


class CheckpointError(IOError):
    """Raised for unreadable or malformed checkpoint files"""


@dataclass
class Checkpoint:
    config: RunConfig
    step: int
    tensors: dict = field(default_factory=dict)
    optimizer: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION


def _pack_bytes(payload):
    return struct.pack("<I", len(payload)) + payload


def encode_checkpoint(ckpt):
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", ckpt.version)]
    parts.append(_pack_bytes(ckpt.config.to_json().encode("utf-8")))
    parts.append(struct.pack("<Q", ckpt.step))

    table = dict(sorted(ckpt.tensors.items()))
    table.update({OPTIMIZER_PREFIX + name: t for name, t in sorted(ckpt.optimizer.items())})
    parts.append(struct.pack("<I", len(table)))
    for name, tensor in table.items():
        parts.append(_pack_bytes(name.encode("utf-8")))
        parts.append(_pack_bytes(tensor_to_bytes(tensor)))
    return b"".join(parts)


def decode_checkpoint(blob):
    """Inverse of encode_checkpoint; parameters come back with requires_grad set"""
    offset = 0

    def take(count):
        nonlocal offset
        if offset + count > len(blob):
            raise CheckpointError("checkpoint is truncated")
        chunk = blob[offset:offset + count]
        offset += count
        return chunk

    def take_sized():
        (length,) = struct.unpack("<I", take(4))
        return take(length)

    if take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        config = RunConfig.from_json(take_sized().decode("utf-8"))
    except (ConfigError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"embedded config is unreadable: {exc}") from exc
    (step,) = struct.unpack("<Q", take(8))
    (count,) = struct.unpack("<I", take(4))

    tensors, optimizer = {}, {}
    for _ in range(count):
        name = take_sized().decode("utf-8")
        try:
            tensor = tensor_from_bytes(take_sized())
        except (ShapeError, ValueError) as exc:
            raise CheckpointError(f"tensor {name!r} is malformed: {exc}") from exc
        if name.startswith(OPTIMIZER_PREFIX):
            optimizer[name[len(OPTIMIZER_PREFIX):]] = tensor
        else:
            tensor.requires_grad = True
            tensors[name] = tensor
    return Checkpoint(config=config, step=step, tensors=tensors, optimizer=optimizer, version=version)


def save_checkpoint(path, ckpt):
    """Write to a sibling temp file, then rename over the target"""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(prefix=".ckpt-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(encode_checkpoint(ckpt))
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def load_checkpoint(path):
    with open(path, "rb") as handle:
        return decode_checkpoint(handle.read())
