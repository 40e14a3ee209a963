"""Versioned binary checkpoints: parameters + norm stats + model config.

Layout: 8-byte magic, u32 version, u64 JSON header length, JSON header,
then raw little-endian float64 buffers. The header records each array's
name, shape and byte offset into the buffer section, the model config and
its hash. Save/load round-trips bit-exactly.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .mesh import NormStats
from .models import CrashSurrogate, ModelConfig

MAGIC = b"MCCKPT01"
FORMAT_VERSION = 1
_STATS_PREFIX = "__stats__."


def _array_entries(named_arrays: dict) -> tuple[list, bytes]:
    entries = []
    chunks = []
    offset = 0
    for name in sorted(named_arrays):
        arr = np.ascontiguousarray(named_arrays[name], dtype="<f8")
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    return entries, b"".join(chunks)


def save_checkpoint(path: str | Path, model: CrashSurrogate, stats: NormStats,
                    extra: dict | None = None) -> None:
    arrays = model.state_dict()
    arrays[_STATS_PREFIX + "accel_mean"] = stats.accel_mean
    arrays[_STATS_PREFIX + "accel_std"] = stats.accel_std
    arrays[_STATS_PREFIX + "feature_mean"] = stats.feature_mean
    arrays[_STATS_PREFIX + "feature_std"] = stats.feature_std
    entries, payload = _array_entries(arrays)
    header = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "config_hash": model.config.hash(),
        "seed": model.seed,
        "arrays": entries,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", FORMAT_VERSION, len(blob)))
        f.write(blob)
        f.write(payload)


def load_checkpoint(path: str | Path) -> tuple[CrashSurrogate, NormStats, dict]:
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MAGIC:
            raise ConfigError(f"{path}: not a checkpoint (magic {magic!r})")
        version, header_len = struct.unpack("<IQ", f.read(12))
        if version != FORMAT_VERSION:
            raise ConfigError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(f.read(header_len).decode("utf-8"))
        payload = f.read()

    arrays = {}
    for entry in header["arrays"]:
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(entry["shape"])

    config = ModelConfig.from_dict(header["config"])
    if config.hash() != header["config_hash"]:
        raise ConfigError(f"{path}: config hash mismatch")
    stats = NormStats(
        accel_mean=arrays.pop(_STATS_PREFIX + "accel_mean"),
        accel_std=arrays.pop(_STATS_PREFIX + "accel_std"),
        feature_mean=arrays.pop(_STATS_PREFIX + "feature_mean"),
        feature_std=arrays.pop(_STATS_PREFIX + "feature_std"),
    )
    model = CrashSurrogate(config, seed=header["seed"])
    model.load_state_dict(arrays)
    return model, stats, header.get("extra", {})
