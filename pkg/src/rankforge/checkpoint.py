"""Binary checkpoints: float32 payload, float64 in memory.

Layout (little-endian)::

    b"TRMD" | u32 version | u32 len + JSON config | u32 n_params
    n x (u16 len + name | u8 ndim | ndim x u32 dims)
    float32 payload in manifest order | u64 FNV-1a of everything before it
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import InputError, ValidationError
from .model import ModelConfig, RankingModel

MAGIC = b"TRMD"
VERSION = 1

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes, h: int = _FNV_OFFSET) -> int:
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


def dumps(model: RankingModel) -> bytes:
    cfg = json.dumps(model.config.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    params = model.parameters()
    out = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg, struct.pack("<I", len(params))]
    for name, t in params.items():
        raw = name.encode()
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", t.ndim))
        out.append(struct.pack(f"<{t.ndim}I", *t.shape))
    for t in params.values():
        out.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    body = b"".join(out)
    return body + struct.pack("<Q", fnv1a64(body))


def loads(blob: bytes) -> RankingModel:
    if len(blob) < 20 or blob[:4] != MAGIC:
        raise InputError("not a TRMD checkpoint (bad magic)")
    body, (stored,) = blob[:-8], struct.unpack("<Q", blob[-8:])
    if fnv1a64(body) != stored:
        raise ValidationError("checkpoint checksum mismatch")
    version, cfg_len = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise InputError(f"unsupported checkpoint version {version}")
    pos = 12
    config = ModelConfig(**json.loads(body[pos : pos + cfg_len]))
    pos += cfg_len
    (n,) = struct.unpack_from("<I", body, pos)
    pos += 4
    manifest = []
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", body, pos)
        name = body[pos + 2 : pos + 2 + ln].decode()
        pos += 2 + ln
        (ndim,) = struct.unpack_from("<B", body, pos)
        shape = struct.unpack_from(f"<{ndim}I", body, pos + 1)
        pos += 1 + 4 * ndim
        manifest.append((name, tuple(shape)))
    model = RankingModel(config)
    expected = {name: t.shape for name, t in model.parameters().items()}
    if dict(manifest) != expected or len(manifest) != len(expected):
        raise ValidationError("checkpoint manifest does not match its config")
    snap = {}
    for name, shape in manifest:
        count = int(np.prod(shape))
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=pos)
        snap[name] = arr.astype(np.float64).reshape(shape)
        pos += 4 * count
    if pos != len(body):
        raise ValidationError("trailing bytes in checkpoint payload")
    model.restore(snap)
    return model


def save(model: RankingModel, path) -> bytes:
    blob = dumps(model)
    Path(path).write_bytes(blob)
    return blob


def load(path) -> RankingModel:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(blob)


def quantize(model: RankingModel) -> RankingModel:
    """Round-trip through the checkpoint format (fp32-derived fp64 values)."""
    return loads(dumps(model))
