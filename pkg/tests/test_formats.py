import struct
import zlib

import numpy as np
import pytest

from ct3d.errors import FormatError
from ct3d.formats import load_ntc, load_vox, ntc_from_bytes, ntc_to_bytes, save_ntc, save_vox, vox_from_bytes, vox_to_bytes


def test_vox_layout():
    raw = vox_to_bytes(np.arange(6, dtype=np.float32).reshape(1, 2, 3))
    assert raw[:4] == b"VOX1"
    assert raw[4:6] == bytes([0, 3])
    assert struct.unpack("<3Q", raw[6:30]) == (1, 2, 3)
    assert np.frombuffer(raw[30:], "<f4").tolist() == [0, 1, 2, 3, 4, 5]


def test_vox_roundtrip_file(tmp_path):
    vol = np.random.default_rng(0).standard_normal((4, 5, 6)).astype(np.float32)
    save_vox(tmp_path / "v.vox", vol)
    back = load_vox(tmp_path / "v.vox")
    assert back.dtype == np.float32
    np.testing.assert_array_equal(back, vol)
    assert not [p for p in tmp_path.iterdir() if p.name.startswith(".tmp")]


@pytest.mark.parametrize("mutate", [
    lambda b: b"VOX2" + b[4:],
    lambda b: b[:-1],
    lambda b: b[:4] + bytes([1]) + b[5:],
    lambda b: b[:8],
])
def test_vox_rejects_corruption(mutate):
    raw = vox_to_bytes(np.zeros((2, 2, 2), np.float32))
    with pytest.raises(FormatError):
        vox_from_bytes(mutate(raw))


def test_ntc_layout_and_crc():
    raw = ntc_to_bytes({"ab": np.array([1.0, 2.0], np.float32)})
    assert raw[:4] == b"NTC1"
    assert struct.unpack("<I", raw[4:8]) == (1,)
    assert struct.unpack("<H", raw[8:10]) == (2,) and raw[10:12] == b"ab"
    assert raw[12] == 1 and struct.unpack("<Q", raw[13:21]) == (2,)
    assert struct.unpack("<I", raw[-4:])[0] == zlib.crc32(raw[:-4])


def test_ntc_roundtrip_preserves_order(tmp_path):
    rng = np.random.default_rng(1)
    entries = {"z.weight": rng.standard_normal((2, 3)).astype(np.float32), "a.bias": rng.standard_normal(4).astype(np.float32),
               "scalar": np.float32(3.5)}
    save_ntc(tmp_path / "c.ntc", entries)
    back = load_ntc(tmp_path / "c.ntc")
    assert list(back) == list(entries)
    assert back["scalar"].shape == ()
    assert ntc_to_bytes(back) == (tmp_path / "c.ntc").read_bytes()


def test_ntc_detects_bitflip():
    raw = bytearray(ntc_to_bytes({"w": np.ones(5, np.float32)}))
    raw[20] ^= 0x01
    with pytest.raises(FormatError, match="checksum"):
        ntc_from_bytes(bytes(raw))


def test_ntc_duplicate_and_trailing():
    body = b"NTC1" + struct.pack("<I", 2)
    entry = struct.pack("<H", 1) + b"w" + struct.pack("<B", 1) + struct.pack("<Q", 1) + np.float32(1).tobytes()
    dup = body + entry + entry
    with pytest.raises(FormatError, match="duplicate"):
        ntc_from_bytes(dup + struct.pack("<I", zlib.crc32(dup)))
    trailing = b"NTC1" + struct.pack("<I", 1) + entry + b"xx"
    with pytest.raises(FormatError, match="trailing"):
        ntc_from_bytes(trailing + struct.pack("<I", zlib.crc32(trailing)))
