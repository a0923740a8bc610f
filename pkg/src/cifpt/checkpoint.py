"""Versioned checkpoint archive.

Layout (all integers little-endian u32)::

    b"CIFC" | version | meta_len | meta (canonical JSON, UTF-8)
    | tensor_count | per tensor: name_len | name (UTF-8) | ndim | dims... | float64 LE payload

``meta`` holds ``step``, ``fingerprint`` and the resolved ``config``. JSON is
written with sorted keys and fixed separators, so load-then-save reproduces
the bytes exactly.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"CIFC"
VERSION = 1


class CheckpointError(ValueError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def fingerprint(*configs: dict) -> str:
    return hashlib.sha256(canonical_json(list(configs)).encode()).hexdigest()[:16]


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    step: int
    fingerprint: str
    config: dict = field(default_factory=dict)
    version: int = VERSION

    def to_bytes(self) -> bytes:
        meta = canonical_json({"config": self.config, "fingerprint": self.fingerprint, "step": self.step}).encode()
        parts = [MAGIC, struct.pack("<II", self.version, len(meta)), meta, struct.pack("<I", len(self.tensors))]
        for name, arr in self.tensors.items():
            raw = name.encode()
            arr = np.asarray(arr, dtype="<f8")
            parts.append(struct.pack("<I", len(raw)))
            parts.append(raw)
            parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
            parts.append(np.ascontiguousarray(arr).tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        if raw[:4] != MAGIC:
            raise CheckpointError("not a checkpoint archive")
        version, meta_len = struct.unpack_from("<II", raw, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 12
        meta = json.loads(raw[pos: pos + meta_len].decode())
        pos += meta_len
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos: pos + n].decode()
            pos += n
            (ndim,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            tensors[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * size
        if pos != len(raw):
            raise CheckpointError("trailing bytes after tensor table")
        return cls(tensors, int(meta["step"]), meta["fingerprint"], meta.get("config", {}), version)


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.write_bytes(ckpt.to_bytes())
    return path


def load_checkpoint(path, expected_fingerprint: str | None = None, allow_mismatch: bool = False) -> Checkpoint:
    ckpt = Checkpoint.from_bytes(Path(path).read_bytes())
    if expected_fingerprint is not None and ckpt.fingerprint != expected_fingerprint and not allow_mismatch:
        raise CheckpointError(
            f"{path}: fingerprint {ckpt.fingerprint} does not match expected {expected_fingerprint}"
        )
    return ckpt


def average_checkpoints(ckpts, k: int = 10) -> Checkpoint:
    """Elementwise mean of the last ``k`` checkpoints (paths or objects).

    Uses a running mean, so averaging identical checkpoints returns them
    bit for bit.
    """
    items = [c if isinstance(c, Checkpoint) else load_checkpoint(c) for c in list(ckpts)[-k:]]
    if not items:
        raise CheckpointError("no checkpoints to average")
    first = items[0]
    for other in items[1:]:
        if other.fingerprint != first.fingerprint:
            raise CheckpointError("cannot average checkpoints with different fingerprints")
        if list(other.tensors) != list(first.tensors):
            raise CheckpointError("cannot average checkpoints with different tensor names")
        for name, arr in other.tensors.items():
            if arr.shape != first.tensors[name].shape:
                raise CheckpointError(f"shape mismatch for {name}")
    avg = {name: np.array(arr, dtype=np.float64) for name, arr in first.tensors.items()}
    for i, other in enumerate(items[1:], start=2):
        for name, arr in other.tensors.items():
            avg[name] = avg[name] + (arr - avg[name]) / i
    return Checkpoint(avg, max(c.step for c in items), first.fingerprint, first.config, first.version)
