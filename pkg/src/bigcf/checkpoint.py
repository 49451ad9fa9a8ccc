"""Binary checkpoint format.

Layout (little-endian): 8-byte magic, u32 version, u32 M, N, d, K, L,
u32 config length + UTF-8 key=value block, then float32 arrays E0
((M+N) x d), C_user (K x d), C_item (K x d), row-major.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .config import TrainConfig, parse_config_text
from .errors import ConfigError, DataError, PersistenceError
from .training import Checkpoint, ModelParams

MAGIC = b"BIGCFCKP"
VERSION = 1
_HEADER = struct.Struct("<8s6I")
_LEN = struct.Struct("<I")
_F32 = np.dtype("<f4")


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    p, cfg = ckpt.params, ckpt.config
    m, n = ckpt.num_users, ckpt.num_items
    d, k = p.E0.shape[1], p.C_user.shape[0]
    if p.E0.shape != (m + n, d) or p.C_user.shape != (k, d) or p.C_item.shape != (k, d):
        raise PersistenceError("parameter shapes disagree with checkpoint header")
    text = cfg.echo().encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, m, n, d, k, cfg.layers))
        fh.write(_LEN.pack(len(text)))
        fh.write(text)
        for arr in (p.E0, p.C_user, p.C_item):
            fh.write(np.ascontiguousarray(arr, dtype=_F32).tobytes())


def load_checkpoint(path, expect_users: int | None = None,
                    expect_items: int | None = None) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise PersistenceError(f"cannot read checkpoint {path}: {exc}") from None
    if len(raw) < _HEADER.size or raw[:8] != MAGIC:
        raise PersistenceError(f"{path}: bad magic, not a checkpoint")
    _, version, m, n, d, k, layers = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise PersistenceError(f"{path}: unsupported checkpoint version {version}")
    off = _HEADER.size
    if len(raw) < off + _LEN.size:
        raise PersistenceError(f"{path}: truncated header")
    (clen,) = _LEN.unpack_from(raw, off)
    off += _LEN.size
    sizes = [(m + n) * d, k * d, k * d]
    if len(raw) != off + clen + 4 * sum(sizes):
        raise PersistenceError(f"{path}: truncated or oversized "
                               f"({len(raw)} bytes, expected {off + clen + 4 * sum(sizes)})")
    try:
        cfg = TrainConfig(**parse_config_text(raw[off:off + clen].decode("utf-8")))
    except (UnicodeDecodeError, ConfigError) as exc:
        raise PersistenceError(f"{path}: bad config block: {exc}") from None
    off += clen
    arrays = []
    for size, shape in zip(sizes, [(m + n, d), (k, d), (k, d)]):
        arrays.append(np.frombuffer(raw, dtype=_F32, count=size, offset=off).reshape(shape).copy())
        off += 4 * size
    if expect_users is not None and (m, n) != (expect_users, expect_items):
        raise DataError(f"checkpoint is for {m} users x {n} items, "
                        f"dataset has {expect_users} x {expect_items}")
    dtype = np.dtype(cfg.dtype)
    params = ModelParams(*(a.astype(dtype) for a in arrays))
    return Checkpoint(m, n, params, cfg)
