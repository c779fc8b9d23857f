"""Binary containers.

VOX1 (one volume)::

    b"VOX1" | u8 dtype code (0 = f32) | u8 rank | rank x u64 dims | f32 payload

NTC1 (named tensor checkpoint)::

    b"NTC1" | u32 count | count x (u16 len, utf-8 name, u8 rank, rank x u64 dims, f32 data) | u32 crc32

All integers and floats are little-endian; the CRC covers every preceding byte.
"""
from __future__ import annotations

import os
import struct
import tempfile
import zlib
from collections import OrderedDict

import numpy as np

from .errors import FormatError

VOX_MAGIC = b"VOX1"
NTC_MAGIC = b"NTC1"
DTYPE_F32 = 0
_F32 = np.dtype("<f4")


def _atomic_write(path, payload: bytes):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def vox_to_bytes(vol) -> bytes:
    arr = np.asarray(vol, dtype=_F32)
    head = VOX_MAGIC + struct.pack("<BB", DTYPE_F32, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


def vox_from_bytes(buf: bytes) -> np.ndarray:
    if buf[:4] != VOX_MAGIC:
        raise FormatError("not a VOX1 file (bad magic)")
    if len(buf) < 6:
        raise FormatError("truncated VOX1 header")
    code, rank = struct.unpack_from("<BB", buf, 4)
    if code != DTYPE_F32:
        raise FormatError(f"unsupported VOX1 dtype code {code}")
    off = 6
    if len(buf) < off + 8 * rank:
        raise FormatError("truncated VOX1 header")
    dims = struct.unpack_from(f"<{rank}Q", buf, off)
    off += 8 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(buf) - off != 4 * count:
        raise FormatError(f"VOX1 payload has {len(buf) - off} bytes, expected {4 * count}")
    return np.frombuffer(buf, dtype=_F32, count=count, offset=off).reshape(dims).astype(np.float32)


def save_vox(path, vol):
    _atomic_write(path, vox_to_bytes(vol))


def load_vox(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return vox_from_bytes(fh.read())


def ntc_to_bytes(entries) -> bytes:
    parts = [NTC_MAGIC, struct.pack("<I", len(entries))]
    for name, value in entries.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"entry name too long: {name[:40]}...")
        arr = np.asarray(value, dtype=_F32)
        if arr.ndim > 255:
            raise FormatError(f"rank too large for {name}")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def ntc_from_bytes(buf: bytes) -> "OrderedDict[str, np.ndarray]":
    if buf[:4] != NTC_MAGIC:
        raise FormatError("not an NTC1 file (bad magic)")
    if len(buf) < 12:
        raise FormatError("truncated NTC1 file")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise FormatError("NTC1 checksum mismatch")
    (count,) = struct.unpack_from("<I", body, 4)
    off = 8
    entries = OrderedDict()
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off:off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<B", body, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}Q", body, off)
            off += 8 * rank
            size = int(np.prod(dims, dtype=np.int64)) if rank else 1
            if off + 4 * size > len(body):
                raise FormatError(f"truncated data for entry {name}")
            if name in entries:
                raise FormatError(f"duplicate entry {name}")
            entries[name] = np.frombuffer(body, dtype=_F32, count=size, offset=off).reshape(dims).astype(np.float32)
            off += 4 * size
    except struct.error as exc:
        raise FormatError(f"truncated NTC1 file: {exc}") from None
    if off != len(body):
        raise FormatError(f"{len(body) - off} trailing bytes after last entry")
    return entries


def save_ntc(path, entries):
    _atomic_write(path, ntc_to_bytes(entries))


def load_ntc(path):
    with open(path, "rb") as fh:
        return ntc_from_bytes(fh.read())
