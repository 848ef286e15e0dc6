import struct

import numpy as np
import pytest

from freqkv.cache import KvDump
from freqkv.fkv import (
    HEADER,
    BadHeaderError,
    BadMagicError,
    SizeMismatchError,
    TruncatedPayloadError,
    VersionMismatchError,
    decode,
    encode,
    read_dump,
    write_dump,
)
from freqkv.synth import SynthSpec, generate


@pytest.fixture
def dump():
    d, _ = generate(SynthSpec(num_layers=2, kv_heads=3, head_dim=4, seq_len=10, base_modes=3,
                              outliers_per_layer=2, text_prefix=2, noise_sigma=0.3, seed=1))
    return d


def test_header_layout(dump):
    buf = encode(dump)
    assert HEADER.size == 36
    assert buf[:4] == b"FKV1"
    assert struct.unpack_from("<IIIIQB", buf, 4) == (1, 2, 3, 4, 10, 0)
    assert buf[29:36] == bytes(7)
    assert list(buf[36:46]) == dump.token_tags.tolist()
    assert len(buf) == 36 + 10 + 2 * 2 * 3 * 10 * 4 * 4
    # first key element of layer 0 sits right after the tags
    assert struct.unpack_from("<f", buf, 46)[0] == dump.layers[0].keys[0, 0, 0]
    # values of layer 0 follow its keys; row-major [head][position][channel]
    off = 46 + 3 * 10 * 4 * 4 + 4 * (1 * 40 + 2 * 4 + 3)
    assert struct.unpack_from("<f", buf, off)[0] == dump.layers[0].values[1, 2, 3]


def test_round_trip_bit_exact(dump, tmp_path):
    path = tmp_path / "a.fkv"
    write_dump(dump, path)
    raw = path.read_bytes()
    again = read_dump(path)
    for a, b in zip(dump.layers, again.layers):
        assert a.keys.tobytes() == b.keys.tobytes()
    write_dump(again, tmp_path / "b.fkv")
    assert (tmp_path / "b.fkv").read_bytes() == raw


def test_f16_round_trip(tmp_path):
    d, _ = generate(SynthSpec(num_layers=1, seq_len=12, dtype="f16", outliers_per_layer=1))
    buf = encode(d)
    assert buf[28] == 1
    assert len(buf) == 36 + 12 + 2 * 2 * 12 * 32 * 2
    again = decode(buf)
    assert again.dtype == "f16"
    assert again.layers[0].keys.dtype == np.float32
    assert encode(again) == buf


def test_f16_decoding_follows_ieee_binary16():
    k = np.array([1.0, -2.0, 65504.0, 6.103515625e-05], dtype=np.float32).reshape(1, 1, 4, 1)
    d = KvDump.from_arrays(k, k, dtype="f16")
    buf = bytearray(encode(d))
    # 0x3C00 = 1.0, 0xC000 = -2.0, 0x7BFF = 65504, 0x0400 = 2**-14
    assert bytes(buf[40:48]) == bytes.fromhex("003c00c0ff7b0004")
    buf[40:42] = bytes.fromhex("0100")  # smallest subnormal 2**-24
    assert decode(bytes(buf)).layers[0].keys[0, 0, 0] == np.float32(2.0 ** -24)


def test_bad_magic(dump):
    buf = b"XKV1" + encode(dump)[4:]
    with pytest.raises(BadMagicError):
        decode(buf)


def test_version_mismatch(dump):
    buf = bytearray(encode(dump))
    buf[4:8] = struct.pack("<I", 2)
    with pytest.raises(VersionMismatchError):
        decode(bytes(buf))


def test_truncated(dump):
    buf = encode(dump)
    with pytest.raises(TruncatedPayloadError, match=f"expected {len(buf)} bytes, got {len(buf) - 1}"):
        decode(buf[:-1])
    with pytest.raises(TruncatedPayloadError):
        decode(buf[:20])


def test_trailing_bytes(dump):
    with pytest.raises(SizeMismatchError):
        decode(encode(dump) + b"\0")


def test_reserved_dtype_and_tags(dump):
    buf = bytearray(encode(dump))
    bad = bytearray(buf)
    bad[30] = 1
    with pytest.raises(BadHeaderError, match="reserved"):
        decode(bytes(bad))
    bad = bytearray(buf)
    bad[28] = 7
    with pytest.raises(BadHeaderError, match="dtype"):
        decode(bytes(bad))
    bad = bytearray(buf)
    bad[36 + 3] = 5
    with pytest.raises(BadHeaderError, match="position 3"):
        decode(bytes(bad))


def test_error_codes_are_distinct():
    codes = {e.code for e in (BadMagicError, VersionMismatchError, TruncatedPayloadError, SizeMismatchError,
                              BadHeaderError)}
    assert len(codes) == 5
