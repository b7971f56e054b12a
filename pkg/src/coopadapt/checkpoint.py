"""Flat named-tensor checkpoint format.

Layout (all little-endian): magic ``COAD``, format version (u16), entry
count (u32), then per entry a length-prefixed UTF-8 name, rank (u8), dims
(u32 each), and the raw float64 payload.  Entry order is preserved, so a
save/load round trip is byte-stable.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import ContractError

_MAGIC = b"COAD"
_FORMAT_VERSION = 1


def dump_named_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    chunks = [_MAGIC + struct.pack("<HI", _FORMAT_VERSION, len(tensors))]
    for name, array in tensors.items():
        arr = np.ascontiguousarray(array, dtype="<f8")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def parse_named_tensors(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != _MAGIC:
        raise ContractError("checkpoint blob does not start with the COAD magic")
    version, count = struct.unpack_from("<HI", blob, 4)
    if version != _FORMAT_VERSION:
        raise ContractError(f"unsupported checkpoint format version {version}")
    off = 4 + struct.calcsize("<HI")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        raw = blob[off : off + 8 * size]
        if len(raw) != 8 * size:
            raise ContractError(f"checkpoint truncated inside tensor {name!r}")
        off += 8 * size
        out[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    if off != len(blob):
        raise ContractError(f"checkpoint has {len(blob) - off} trailing bytes")
    return out


def save_named_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_named_tensors(tensors))


def load_named_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return parse_named_tensors(fh.read())
