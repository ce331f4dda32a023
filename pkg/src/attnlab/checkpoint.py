"""Binary checkpoint files.

Layout (little-endian)::

    b"GSAT" | u32 version | u32 d | u32 D | u32 j_star
    | (d+D) float64 v | (d+D)^2 float64 W, row-major

A sibling ``.json`` file carries the run configuration and ``v_star``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelParams

MAGIC = b"GSAT"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    def __init__(self, expected, actual):
        super().__init__(f"checkpoint truncated: expected {expected} bytes, found {actual}")
        self.expected = expected
        self.actual = actual


@dataclass
class Checkpoint:
    d: int
    D: int
    j_star: int
    v: np.ndarray
    W: np.ndarray
    provenance: dict = field(default_factory=dict)
    version: int = VERSION

    @classmethod
    def from_params(cls, params: ModelParams, j_star, provenance=None):
        return cls(params.d, params.D, int(j_star), params.v.copy(), params.W.copy(), dict(provenance or {}))

    def params(self) -> ModelParams:
        return ModelParams(self.v.copy(), self.W.copy(), self.d)

    @property
    def v_star(self):
        vs = self.provenance.get("v_star")
        return None if vs is None else np.array(vs, dtype=np.float64)

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return ((self.version, self.d, self.D, self.j_star) == (other.version, other.d, other.D, other.j_star)
                and self.v.tobytes() == other.v.tobytes() and self.W.tobytes() == other.W.tobytes()
                and self.provenance == other.provenance)


def sidecar(path) -> Path:
    return Path(path).with_suffix(".json")


def to_bytes(c: Checkpoint) -> bytes:
    m = c.d + c.D
    v = np.ascontiguousarray(c.v, dtype="<f8")
    W = np.ascontiguousarray(c.W, dtype="<f8")
    if v.shape != (m,) or W.shape != (m, m):
        raise CheckpointError(f"array shapes do not match d={c.d}, D={c.D}")
    return _HEADER.pack(MAGIC, c.version, c.d, c.D, c.j_star) + v.tobytes() + W.tobytes()


def from_bytes(buf: bytes) -> Checkpoint:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedCheckpointError(_HEADER.size, len(buf))
    _, version, d, D, j_star = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {VERSION}")
    m = d + D
    expected = _HEADER.size + 8 * (m + m * m)
    if len(buf) < expected:
        raise TruncatedCheckpointError(expected, len(buf))
    if len(buf) > expected:
        raise CheckpointError(f"{len(buf) - expected} trailing bytes after W")
    body = np.frombuffer(buf, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    return Checkpoint(d, D, j_star, body[:m].copy(), body[m:].reshape(m, m).copy(), version=version)


def save_checkpoint(c: Checkpoint, path) -> None:
    path = Path(path)
    path.write_bytes(to_bytes(c))
    meta = {"format_version": c.version, "d": c.d, "D": c.D, "j_star": c.j_star, **c.provenance}
    sidecar(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    c = from_bytes(path.read_bytes())
    meta_path = sidecar(path)
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        for k in ("format_version", "d", "D", "j_star"):
            meta.pop(k, None)
        c.provenance = meta
    return c
