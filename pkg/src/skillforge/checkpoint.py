"""Self-describing binary container for model checkpoints.

Layout (all integers little-endian):

    magic "SFCK" | format version u32 | header length u32 | header JSON
    | tensor count u32 | per tensor: name length u16, name UTF-8,
      ndim u8, each dim u32, float32 row-major data

The header holds ``{"kind": ..., "config": {...}}`` with sorted keys and
tensors are written in sorted name order, so identical models serialize to
identical bytes — reproducibility checks compare files directly.
"""

from __future__ import annotations

import hashlib
import json
import struct
from io import BytesIO
from pathlib import Path

import numpy as np

MAGIC = b"SFCK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable or corrupted checkpoint file."""


def serialize_checkpoint(kind: str, config: dict, tensors: dict[str, np.ndarray]) -> bytes:
    header = json.dumps({"kind": kind, "config": config}, sort_keys=True, ensure_ascii=False).encode(
        "utf-8"
    )
    out = BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<I", FORMAT_VERSION))
    out.write(struct.pack("<I", len(header)))
    out.write(header)
    out.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        data = np.asarray(tensors[name], dtype=np.float32)
        if not data.flags["C_CONTIGUOUS"]:
            data = np.ascontiguousarray(data)  # 0-d is always contiguous, so ndim survives
        encoded = name.encode("utf-8")
        out.write(struct.pack("<H", len(encoded)))
        out.write(encoded)
        out.write(struct.pack("<B", data.ndim))
        for dim in data.shape:
            out.write(struct.pack("<I", dim))
        out.write(data.astype("<f4").tobytes())
    return out.getvalue()


def save_checkpoint(path: str | Path, kind: str, config: dict, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(serialize_checkpoint(kind, config, tensors))


def _read_exact(buf: BytesIO, n: int, what: str) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def deserialize_checkpoint(blob: bytes) -> tuple[str, dict, dict[str, np.ndarray]]:
    buf = BytesIO(blob)
    if _read_exact(buf, 4, "magic") != MAGIC:
        raise CheckpointError("bad magic bytes: not a checkpoint file")
    (version,) = struct.unpack("<I", _read_exact(buf, 4, "version"))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version}")
    (header_len,) = struct.unpack("<I", _read_exact(buf, 4, "header length"))
    try:
        header = json.loads(_read_exact(buf, header_len, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from exc
    if not isinstance(header, dict) or "kind" not in header or "config" not in header:
        raise CheckpointError("checkpoint header missing 'kind'/'config'")
    (count,) = struct.unpack("<I", _read_exact(buf, 4, "tensor count"))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", _read_exact(buf, 2, "tensor name length"))
        name = _read_exact(buf, name_len, "tensor name").decode("utf-8")
        (ndim,) = struct.unpack("<B", _read_exact(buf, 1, f"ndim of {name}"))
        shape = tuple(
            struct.unpack("<I", _read_exact(buf, 4, f"shape of {name}"))[0] for _ in range(ndim)
        )
        numel = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = _read_exact(buf, numel * 4, f"data of {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    if buf.read(1):
        raise CheckpointError("trailing bytes after last tensor")
    return header["kind"], header["config"], tensors


def load_checkpoint(path: str | Path) -> tuple[str, dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return deserialize_checkpoint(path.read_bytes())


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str | Path) -> str:
    digest = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()
