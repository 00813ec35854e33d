"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic    8 bytes  b"TSDKDCKP"
    version  u32
    V, N, n_layers, d_model, n_heads   5 x u32
    count    u32
    repeated count times:
        name_len u32, name utf-8
        ndim u32, shape ndim x u64
        data  little-endian float64, C order
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import InvalidInputError
from .model import ModelDims, TinyLMParams, param_shapes

MAGIC = b"TSDKDCKP"
FORMAT_VERSION = 1


def dumps(params: TinyLMParams) -> bytes:
    d = params.dims
    parts = [MAGIC, struct.pack("<6I", FORMAT_VERSION, d.vocab_size, d.context,
                                d.n_layers, d.d_model, d.n_heads),
             struct.pack("<I", len(params.arrays))]
    for name, arr in params.arrays.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def loads(blob: bytes) -> TinyLMParams:
    try:
        return _loads(blob)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise InvalidInputError(f"truncated or corrupt checkpoint ({exc})") from None


def _loads(blob: bytes) -> TinyLMParams:
    if blob[:8] != MAGIC:
        raise InvalidInputError("not a checkpoint (bad magic)")
    off = 8
    version, V, N, L, dm, H = struct.unpack_from("<6I", blob, off)
    off += 24
    if version != FORMAT_VERSION:
        raise InvalidInputError(f"unsupported checkpoint version {version}")
    dims = ModelDims(V, N, L, dm, H)
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    arrays = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + n].decode("utf-8")
        off += n
        (ndim,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}Q", blob, off)
        off += 8 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        if off + 8 * size > len(blob):
            raise InvalidInputError(f"checkpoint truncated inside array {name!r}")
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=off).reshape(shape).astype(float)
        off += 8 * size
    if off != len(blob):
        raise InvalidInputError("trailing bytes after the last array")
    expected = param_shapes(dims)
    if {k: v.shape for k, v in arrays.items()} != expected:
        raise InvalidInputError("checkpoint arrays do not match the recorded dimensions")
    return TinyLMParams(dims, arrays)


def save_params(path, params: TinyLMParams) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(params))
    return path


def load_params(path) -> TinyLMParams:
    try:
        return loads(Path(path).read_bytes())
    except InvalidInputError as exc:
        raise InvalidInputError(f"{path}: {exc}") from None
