"""Hashing, config-file parsing and run manifests."""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError


def canonical_json(obj) -> str:
    """Serialize with sorted keys and no whitespace so equal dicts hash equal."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(obj) -> str:
    return sha256_bytes(canonical_json(obj).encode("utf-8"))[:16]


def derive_seed(base_seed: int, name: str) -> int:
    """Stable per-name seed so identically named modules init identically."""
    digest = hashlib.sha256(f"{base_seed}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def _parse_value(raw: str):
    text = raw.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null"):
        return None
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    if "," in text:
        return [_parse_value(part) for part in text.split(",")]
    return text


def load_kv_config(path: str | Path) -> dict:
    """Parse a flat ``key = value`` config file.

    Blank lines and ``#`` comments are ignored. Values are coerced to
    bool/int/float/None when they look like one, comma lists to lists.
    """
    out: dict = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, _, raw = stripped.partition("=")
            out[key.strip()] = _parse_value(raw)
    return out


def worker_count() -> int:
    """Thread count for sample-parallel work, from MESHCRASH_THREADS (default 1)."""
    raw = os.environ.get("MESHCRASH_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"MESHCRASH_THREADS must be an integer, got {raw!r}") from exc
    return max(1, n)


TOOL_VERSION = "0.1.0"


@dataclass
class RunManifest:
    """Record of one CLI run: inputs, outputs and their hashes."""

    command: str
    config_hash: str = ""
    seeds: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    tool_version: str = TOOL_VERSION
    wall_time: float = 0.0
    _started: float = field(default_factory=time.perf_counter, repr=False)

    def add_input(self, path: str | Path):
        self.inputs[str(path)] = sha256_file(path)

    def add_output(self, path: str | Path):
        self.outputs[str(path)] = sha256_file(path)

    def write(self, path: str | Path):
        self.wall_time = time.perf_counter() - self._started
        payload = {
            "command": self.command,
            "config_hash": self.config_hash,
            "seeds": self.seeds,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "tool_version": self.tool_version,
            "wall_time_s": self.wall_time,
        }
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")
