"""Binary checkpoint format.

Layout::

    b"BPLCKPT1"                      8-byte magic
    uint64 little-endian            metadata length in bytes
    UTF-8 JSON metadata             config, names, shapes, trainable flags,
                                    dtype ("f32"), stage ("sft"|"rm"|"ppo"),
                                    free-form "extra" dict
    float32 little-endian payload   every tensor, flattened, in name order
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..errors import ConfigMismatchError, CorruptCheckpointError
from ..numerics import Parameter
from .model import ModelConfig, TransformerParams, param_shapes

MAGIC = b"BPLCKPT1"
STAGES = ("sft", "rm", "ppo")


@dataclass
class Checkpoint:
    params: TransformerParams
    stage: str
    extra: dict = field(default_factory=dict)

    @property
    def config(self) -> ModelConfig:
        return self.params.config


def save_checkpoint(params: TransformerParams, path: str | os.PathLike, stage: str = "sft", extra: dict | None = None) -> Path:
    if stage not in STAGES:
        raise ValueError(f"stage must be one of {STAGES}, got {stage!r}")
    names = params.names()
    arrays = [params[n].detach().to(torch.float32).contiguous().numpy() for n in names]
    meta = {
        "config": params.config.to_dict(),
        "names": names,
        "shapes": [list(a.shape) for a in arrays],
        "trainable": [params.parameter(n).trainable for n in names],
        "dtype": "f32",
        "stage": stage,
        "extra": extra or {},
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for a in arrays:
            f.write(a.astype("<f4", copy=False).tobytes())
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | os.PathLike, expected_config: ModelConfig | None = None) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 8 or raw[: len(MAGIC)] != MAGIC:
        raise CorruptCheckpointError(f"{path}: bad magic")
    (meta_len,) = struct.unpack("<Q", raw[len(MAGIC): len(MAGIC) + 8])
    start = len(MAGIC) + 8
    if start + meta_len > len(raw):
        raise CorruptCheckpointError(f"{path}: truncated metadata")
    try:
        meta = json.loads(raw[start: start + meta_len].decode("utf-8"))
        config = ModelConfig.from_dict(meta["config"])
        names, shapes, trainable = meta["names"], meta["shapes"], meta["trainable"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable metadata ({exc})") from exc
    if meta.get("dtype") != "f32" or not (len(names) == len(shapes) == len(trainable)):
        raise CorruptCheckpointError(f"{path}: inconsistent metadata")
    if expected_config is not None and expected_config != config:
        raise ConfigMismatchError(f"{path}: checkpoint config {config} != expected {expected_config}")
    for name, shape in param_shapes(config).items():
        try:
            idx = names.index(name)
        except ValueError:
            raise CorruptCheckpointError(f"{path}: missing tensor {name}") from None
        if tuple(shapes[idx]) != shape:
            raise CorruptCheckpointError(f"{path}: {name} has shape {shapes[idx]}, config implies {shape}")

    payload = memoryview(raw)[start + meta_len:]
    expected_bytes = 4 * sum(int(np.prod(s)) for s in shapes)
    if len(payload) != expected_bytes:
        raise CorruptCheckpointError(f"{path}: payload has {len(payload)} bytes, expected {expected_bytes}")
    flat = np.frombuffer(payload, dtype="<f4")
    params: OrderedDict[str, Parameter] = OrderedDict()
    offset = 0
    for name, shape, flag in zip(names, shapes, trainable):
        n = int(np.prod(shape))
        t = torch.from_numpy(flat[offset: offset + n].astype(np.float32).reshape(shape))
        params[name] = Parameter(name, t, bool(flag))
        offset += n
    return Checkpoint(TransformerParams(config, params), meta["stage"], meta.get("extra", {}))


def params_digest(params: TransformerParams, names: list[str] | None = None) -> str:
    """SHA-256 over the raw bytes of the selected tensors, in order."""
    h = hashlib.sha256()
    for n in names if names is not None else params.names():
        h.update(n.encode())
        h.update(params[n].detach().contiguous().numpy().tobytes())
    return h.hexdigest()
