"""Binary parameter checkpoints (``GSCKPT1``).

Layout, all little-endian::

    b"GSCKPT1"  uint32 n_params
    per parameter:
        uint16 name_len, name (utf-8), uint8 dtype code (0 = float32),
        uint8 rank, uint32 dims[rank], uint8 flags (1 trainable, 2 exempt),
        float32 lr_mult, raw data
    uint32 meta_len, meta (utf-8 JSON)
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .optim import ParamStore

MAGIC = b"GSCKPT1"
_DTYPES = {0: np.dtype("<f4")}


def dumps(params: ParamStore, meta: dict | None = None) -> bytes:
    out = [MAGIC, struct.pack("<I", len(params))]
    for name, p in params.items():
        raw = name.encode("utf-8")
        data = np.asarray(p.tensor.data, dtype="<f4", order="C")
        flags = (1 if p.trainable else 0) | (2 if p.weight_decay_exempt else 0)
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<BB", 0, data.ndim))
        out.append(struct.pack(f"<{data.ndim}I", *data.shape))
        out.append(struct.pack("<Bf", flags, p.lr_mult))
        out.append(data.tobytes())
    blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    out.append(struct.pack("<I", len(blob)))
    out.append(blob)
    return b"".join(out)


def loads(buf: bytes) -> tuple[ParamStore, dict]:
    if buf[: len(MAGIC)] != MAGIC:
        raise ValueError("not a GSCKPT1 checkpoint")
    pos = len(MAGIC)

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, buf, pos)
        pos += struct.calcsize(fmt)
        return vals

    (count,) = take("<I")
    params = ParamStore()
    for _ in range(count):
        (nlen,) = take("<H")
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        code, rank = take("<BB")
        if code not in _DTYPES:
            raise ValueError(f"unknown dtype code {code} for {name!r}")
        shape = take(f"<{rank}I") if rank else ()
        flags, lr_mult = take("<Bf")
        dt = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        data = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape)
        pos += nbytes
        params.add(
            name, data.astype(np.float32),
            trainable=bool(flags & 1), exempt=bool(flags & 2), lr_mult=float(lr_mult),
        )
    (mlen,) = take("<I")
    meta = json.loads(buf[pos:pos + mlen].decode("utf-8"))
    pos += mlen
    if pos != len(buf):
        raise ValueError(f"{len(buf) - pos} trailing bytes in checkpoint")
    return params, meta


def save_checkpoint(params: ParamStore, path, meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps(params, meta))


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    return loads(Path(path).read_bytes())
