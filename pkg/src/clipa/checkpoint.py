"""Binary checkpoint format (little-endian).

Layout::

    magic        8 bytes   b"CLIPACKP"
    version      u32       1
    config_len   u32
    config       bytes     canonical JSON of {"image": ..., "text": ...}
    digest       32 bytes  SHA-256 of the config bytes
    n_params     u32
    n_params x record:
        name_len u16, name (UTF-8)
        dtype    u8        1 = float32, 2 = float64
        ndim     u8
        shape    u32 * ndim
        data     raw little-endian values, C order

Round trips are bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .models import ClipModel, ModelConfig

MAGIC = b"CLIPACKP"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}


class CheckpointError(ValueError):
    pass


def _config_bytes(model: ClipModel) -> bytes:
    return json.dumps(model.config_dict(), sort_keys=True, separators=(",", ":")).encode()


def save_checkpoint(model: ClipModel, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cfg = _config_bytes(model)
    parts = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg,
             hashlib.sha256(cfg).digest(), struct.pack("<I", len(model.params))]
    for name, t in model.params.items():
        raw = name.encode()
        code = _CODES.get(t.data.dtype)
        if code is None:
            raise CheckpointError(f"unsupported dtype {t.data.dtype} for {name}")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", code, t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype=_DTYPES[code]).tobytes())
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> ClipModel:
    buf = Path(path).read_bytes()
    try:
        return _parse(buf, path)
    except (struct.error, KeyError, TypeError, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: truncated or malformed checkpoint ({exc})") from exc


def _parse(buf: bytes, path) -> ClipModel:
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    off = 8
    version, cfg_len = struct.unpack_from("<II", buf, off)
    off += 8
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    cfg = buf[off:off + cfg_len]
    off += cfg_len
    if hashlib.sha256(cfg).digest() != buf[off:off + 32]:
        raise CheckpointError(f"{path}: config digest mismatch")
    off += 32
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    params = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + nlen].decode()
        off += nlen
        code, ndim = struct.unpack_from("<BB", buf, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        dt = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        data = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=off).reshape(shape)
        off += nbytes
        t = Tensor(0.0, requires_grad=True, name=name)
        t.data = data.astype(dt.newbyteorder("="), copy=True)
        params[name] = t
    if off != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - off} trailing bytes")
    conf = json.loads(cfg)
    return ClipModel(ModelConfig(**conf["image"]), ModelConfig(**conf["text"]), params)
