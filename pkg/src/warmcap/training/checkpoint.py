"""Binary checkpoint files.

Layout (all integers little-endian)::

    8 bytes   magic b"WCAPCKPT"
    u32       format version (1)
    u32 + n   fingerprint, UTF-8
    u32 + n   metadata, UTF-8 JSON with sorted keys
    u32       number of entries
    per entry, in sorted name order:
        u16 + n   parameter name, UTF-8
        u8        rank r
        r x u32   dimensions
        payload   prod(dims) float32 values, C order

Saving casts parameters to float32, so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from ..nn import Module

MAGIC = b"WCAPCKPT"
FORMAT_VERSION = 1
TASKS = ("none", "classification", "lm", "mlm", "captioning")


class CheckpointError(ValueError):
    """Malformed checkpoint file."""


class FingerprintMismatch(CheckpointError):
    """A checkpoint was produced for a different architecture."""

    def __init__(self, expected: str, found: str, config_diff=(), missing=(), unexpected=(), mismatched=()):
        self.expected, self.found = expected, found
        self.config_diff = list(config_diff)
        self.missing, self.unexpected, self.mismatched = sorted(missing), sorted(unexpected), sorted(mismatched)
        lines = [f"checkpoint fingerprint {found} does not match model fingerprint {expected}"]
        for key, want, got in self.config_diff:
            lines.append(f"  config {key}: model {want!r}, checkpoint {got!r}")
        for label, names in (("missing", self.missing), ("unexpected", self.unexpected), ("shape mismatch", self.mismatched)):
            if names:
                lines.append(f"  {label}: {', '.join(names)}")
        super().__init__("\n".join(lines))


@dataclass
class Checkpoint:
    fingerprint: str
    params: Dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)

    @property
    def task(self) -> str:
        return self.metadata.get("task", "none")

    @classmethod
    def from_module(cls, module: Module, fingerprint: str, metadata: Optional[dict] = None, exclude=()) -> "Checkpoint":
        params = {
            name: p.data.astype("<f4")
            for name, p in module.named_parameters()
            if not any(name == e or name.startswith(e + ".") for e in exclude)
        }
        meta = dict(metadata or {})
        if meta.get("task", "none") not in TASKS:
            raise CheckpointError(f"unknown pretraining task {meta['task']!r}")
        return cls(fingerprint, params, meta)

    def to_bytes(self) -> bytes:
        out = bytearray(MAGIC)
        out += struct.pack("<I", FORMAT_VERSION)
        for text in (self.fingerprint, json.dumps(self.metadata, sort_keys=True, separators=(",", ":"))):
            blob = text.encode("utf-8")
            out += struct.pack("<I", len(blob)) + blob
        out += struct.pack("<I", len(self.params))
        for name in sorted(self.params):
            arr = np.ascontiguousarray(self.params[name], dtype="<f4")
            blob = name.encode("utf-8")
            out += struct.pack("<H", len(blob)) + blob
            out += struct.pack("<B", arr.ndim)
            out += struct.pack(f"<{arr.ndim}I", *arr.shape)
            out += arr.tobytes(order="C")
        return bytes(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        view = memoryview(data)
        pos = 0

        def take(n):
            nonlocal pos
            if pos + n > len(view):
                raise CheckpointError("checkpoint is truncated")
            chunk = view[pos : pos + n]
            pos += n
            return chunk

        if bytes(take(8)) != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic bytes)")
        (version,) = struct.unpack("<I", take(4))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint format version {version}")
        (n,) = struct.unpack("<I", take(4))
        fingerprint = bytes(take(n)).decode("utf-8")
        (n,) = struct.unpack("<I", take(4))
        metadata = json.loads(bytes(take(n)).decode("utf-8"))
        (count,) = struct.unpack("<I", take(4))
        params = {}
        for _ in range(count):
            (n,) = struct.unpack("<H", take(2))
            name = bytes(take(n)).decode("utf-8")
            (rank,) = struct.unpack("<B", take(1))
            dims = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
            size = int(np.prod(dims)) if dims else 1
            params[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims).copy()
        if pos != len(view):
            raise CheckpointError(f"{len(view) - pos} trailing bytes after the last entry")
        return cls(fingerprint, params, metadata)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"no checkpoint at {path}")
        return cls.from_bytes(path.read_bytes())


def config_diff(model_cfg: dict, ckpt_cfg: Optional[dict], prefix: str = ""):
    """Flattened (key, model value, checkpoint value) triples that differ."""
    if ckpt_cfg is None:
        return []
    out = []
    for key in sorted(set(model_cfg) | set(ckpt_cfg)):
        a, b = model_cfg.get(key), ckpt_cfg.get(key)
        if isinstance(a, dict) and isinstance(b, dict):
            out.extend(config_diff(a, b, f"{prefix}{key}."))
        elif a != b and not (isinstance(a, (list, tuple)) and isinstance(b, (list, tuple)) and list(a) == list(b)):
            out.append((prefix + key, a, b))
    return out


def load_into(
    module: Module,
    ckpt: Checkpoint,
    fingerprint: str,
    model_config: Optional[dict] = None,
    allow_missing=(),
) -> list:
    """Copy checkpoint parameters into ``module``.

    Refuses on a fingerprint mismatch, on unexpected or shape-mismatched names,
    and on missing names other than those under an ``allow_missing`` prefix
    (these keep their fresh initialisation). Returns the loaded names.
    """
    own = {name: p for name, p in module.named_parameters()}
    missing = [n for n in own if n not in ckpt.params and not any(n.startswith(a) for a in allow_missing)]
    unexpected = [n for n in ckpt.params if n not in own]
    mismatched = [n for n in ckpt.params if n in own and tuple(own[n].shape) != ckpt.params[n].shape]
    if ckpt.fingerprint != fingerprint or missing or unexpected or mismatched:
        diff = config_diff(model_config or {}, ckpt.metadata.get("config")) if model_config is not None else []
        raise FingerprintMismatch(fingerprint, ckpt.fingerprint, diff, missing, unexpected, mismatched)
    for name, arr in ckpt.params.items():
        own[name].data = arr.astype(np.float64)
    return sorted(ckpt.params)
