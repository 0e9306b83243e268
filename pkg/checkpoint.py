"""
checkpoint.py — STRN model checkpoints.

Layout (little-endian):
    b"STRN" | u32 version | u32 config_len | config JSON (utf-8) | u32 n_tensors |
    n_tensors × ( u16 name_len | name | u8 rank | rank × u32 dims | f64 data )
The JSON block carries the ModelConfig, the normalisation statistics and free-form
metadata (external schema, validation RMSE, training split).
"""
import hashlib
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from config import STRN_MAGIC, STRN_VERSION
from stresnet import ModelConfig, ParameterSet
from trainer import NormStats

logger = logging.getLogger(__name__)


class CheckpointError(ValueError):
    """Unreadable or incompatible checkpoint."""


@dataclass
class Checkpoint:
    params: ParameterSet
    config: ModelConfig
    stats: NormStats
    metadata: dict[str, Any] = field(default_factory=dict)
    checkpoint_id: str = ""


# ── Codec ──────────────────────────────────────────────────────────────────────

def encode_checkpoint(
    params: ParameterSet,
    stats: NormStats,
    config: ModelConfig,
    metadata: dict[str, Any] | None = None,
) -> bytes:
    block = json.dumps(
        {
            "model": config.model_dump(),
            "stats": {"min": stats.min, "max": stats.max},
            "metadata": metadata or {},
        },
        sort_keys=True,
    ).encode("utf-8")
    parts = [STRN_MAGIC, struct.pack("<II", STRN_VERSION, len(block)), block,
             struct.pack("<I", len(params.tensors))]
    for name, arr in params.tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype=np.float64)
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f8").tobytes(order="C"))
    return b"".join(parts)


def decode_checkpoint(data: bytes) -> Checkpoint:
    if data[:4] != STRN_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {data[:4]!r}, expected {STRN_MAGIC!r}")
    try:
        version, block_len = struct.unpack_from("<II", data, 4)
        if version != STRN_VERSION:
            raise CheckpointError(
                f"checkpoint version {version} is not supported (this build reads version {STRN_VERSION})"
            )
        offset = 12
        block = json.loads(data[offset:offset + block_len].decode("utf-8"))
        offset += block_len
        (count,) = struct.unpack_from("<I", data, offset)
        offset += 4
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", data, offset)
            offset += 2
            name = data[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<B", data, offset)
            offset += 1
            dims = struct.unpack_from(f"<{rank}I", data, offset)
            offset += 4 * rank
            n = int(np.prod(dims, dtype=np.int64))
            arr = np.frombuffer(data, dtype="<f8", count=n, offset=offset)
            offset += 8 * n
            tensors[name] = arr.astype(np.float64).reshape(dims)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"truncated or corrupt checkpoint: {exc}") from exc

    return Checkpoint(
        params=ParameterSet(tensors),
        config=ModelConfig.model_validate(block["model"]),
        stats=NormStats(min=float(block["stats"]["min"]), max=float(block["stats"]["max"])),
        metadata=block.get("metadata", {}),
        checkpoint_id=checkpoint_id(data),
    )


def checkpoint_id(data: bytes) -> str:
    """Short content hash identifying a checkpoint."""
    return hashlib.sha256(data).hexdigest()[:12]


# ── Files ──────────────────────────────────────────────────────────────────────

def save_checkpoint(
    params: ParameterSet,
    stats: NormStats,
    config: ModelConfig,
    path: str,
    metadata: dict[str, Any] | None = None,
) -> str:
    data = encode_checkpoint(params, stats, config, metadata)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(data)
    logger.info("Saved checkpoint %s (%d tensors) to %s",
                checkpoint_id(data), len(params.tensors), path)
    return path


def load_checkpoint(path: str) -> Checkpoint:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"No checkpoint at {path}.")
    with open(path, "rb") as fh:
        ckpt = decode_checkpoint(fh.read())
    logger.info("Loaded checkpoint %s from %s", ckpt.checkpoint_id, path)
    return ckpt
