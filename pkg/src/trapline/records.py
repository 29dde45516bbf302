"""Binary record container for training-data handoff.

File layout, per record:

    8 bytes   little-endian unsigned payload length L
    4 bytes   masked CRC32C of the 8 length bytes (little-endian)
    L bytes   payload
    4 bytes   masked CRC32C of the payload (little-endian)

CRC32C uses the Castagnoli polynomial (reflected 0x82F63B78). The mask is
``mask(c) = ((c >> 15) | (c << 17)) + 0xa282ead8`` with all arithmetic
modulo 2**32.

The payload written by the dataset exporter is a key-value message in
protocol-buffer wire format; the encode/decode helpers for that message
live here as well.
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Iterable, Iterator, Mapping, Sequence

from trapline.core import TraplineError

_POLY = 0x82F63B78
_MASK_DELTA = 0xA282EAD8
_U32 = 0xFFFFFFFF

_CRC_TABLE: list[int] = []
for _i in range(256):
    _c = _i
    for _ in range(8):
        _c = (_c >> 1) ^ _POLY if _c & 1 else _c >> 1
    _CRC_TABLE.append(_c)


class RecordError(TraplineError):
    """A record failed its integrity checks."""

    def __init__(self, message: str, index: int):
        super().__init__(f"record {index}: {message}")
        self.index = index


class TruncatedRecordError(RecordError):
    """The file ended in the middle of a record."""


def crc32c(data: bytes) -> int:
    """CRC32C (Castagnoli) of ``data``."""
    crc = _U32
    for byte in data:
        crc = _CRC_TABLE[(crc ^ byte) & 0xFF] ^ (crc >> 8)
    return crc ^ _U32


def masked_crc32c(data: bytes) -> int:
    c = crc32c(data)
    return (((c >> 15) | ((c << 17) & _U32)) + _MASK_DELTA) & _U32


class RecordWriter:
    """Single-writer, append-only writer for the record container."""

    def __init__(self, path):
        self._file: BinaryIO = open(path, "wb")
        self.count = 0

    def write(self, payload: bytes) -> None:
        length_bytes = struct.pack("<Q", len(payload))
        self._file.write(length_bytes)
        self._file.write(struct.pack("<I", masked_crc32c(length_bytes)))
        self._file.write(payload)
        self._file.write(struct.pack("<I", masked_crc32c(payload)))
        self.count += 1

    def close(self) -> None:
        self._file.close()

    def __enter__(self) -> "RecordWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def write_records(path, payloads: Iterable[bytes]) -> int:
    """Write ``payloads`` to ``path``; returns the number of records written."""
    with RecordWriter(path) as writer:
        for payload in payloads:
            writer.write(payload)
        return writer.count


def iter_records(path) -> Iterator[bytes]:
    """Yield payloads from ``path``, verifying both CRCs before surfacing each."""
    with open(path, "rb") as f:
        index = 0
        while True:
            header = f.read(12)
            if not header:
                return
            if len(header) < 12:
                raise TruncatedRecordError("file ends inside the record header", index)
            length_bytes, length_crc = header[:8], header[8:]
            if struct.unpack("<I", length_crc)[0] != masked_crc32c(length_bytes):
                raise RecordError("length checksum mismatch", index)
            (length,) = struct.unpack("<Q", length_bytes)
            payload = f.read(length)
            if len(payload) < length:
                raise TruncatedRecordError("file ends inside the payload", index)
            footer = f.read(4)
            if len(footer) < 4:
                raise TruncatedRecordError("file ends inside the payload checksum", index)
            if struct.unpack("<I", footer)[0] != masked_crc32c(payload):
                raise RecordError("payload checksum mismatch", index)
            yield payload
            index += 1


def read_records(path) -> list[bytes]:
    return list(iter_records(path))


# --- key-value payload message (protocol-buffer wire format) ---------------
#
# Example { Features features = 1; }
# Features { map<string, Feature> feature = 1; }
# Feature  { oneof kind { BytesList=1; FloatList=2; Int64List=3; } }
# each list holds `repeated value = 1` (floats and ints packed).

def _varint(n: int) -> bytes:
    out = bytearray()
    while True:
        b = n & 0x7F
        n >>= 7
        if n:
            out.append(b | 0x80)
        else:
            out.append(b)
            return bytes(out)


def _delimited(tag: int, body: bytes) -> bytes:
    return _varint(tag << 3 | 2) + _varint(len(body)) + body


def bytes_feature(values: Sequence[bytes]) -> bytes:
    body = b"".join(_delimited(1, v) for v in values)
    return _delimited(1, body)


def float_feature(values: Sequence[float]) -> bytes:
    packed = b"".join(struct.pack("<f", v) for v in values)
    return _delimited(2, _delimited(1, packed))


def int64_feature(values: Sequence[int]) -> bytes:
    packed = b"".join(_varint(v & (2**64 - 1)) for v in values)
    return _delimited(3, _delimited(1, packed))


def encode_example(features: Mapping[str, bytes]) -> bytes:
    """Encode a key -> feature mapping; keys are emitted in sorted order."""
    entries = bytearray()
    for key in sorted(features):
        entry = _delimited(1, key.encode("utf-8")) + _delimited(2, features[key])
        entries += _delimited(1, entry)
    return _delimited(1, bytes(entries))


class PayloadError(TraplineError):
    """A payload is not a well-formed key-value message."""


def _read_varint(data: bytes, pos: int) -> tuple[int, int]:
    value = 0
    shift = 0
    while True:
        if pos >= len(data):
            raise PayloadError("truncated varint")
        b = data[pos]
        pos += 1
        value |= (b & 0x7F) << shift
        if not b & 0x80:
            return value, pos
        shift += 7


def _read_chunk(data: bytes, pos: int) -> tuple[bytes, int]:
    length, pos = _read_varint(data, pos)
    if pos + length > len(data):
        raise PayloadError("truncated field")
    return data[pos : pos + length], pos + length


def _decode_feature(data: bytes) -> list:
    if not data:
        return []
    tag, pos = _read_varint(data, 0)
    kind = tag >> 3
    body, _ = _read_chunk(data, pos)
    if kind == 1:  # bytes list
        values: list = []
        p = 0
        while p < len(body):
            _, p = _read_varint(body, p)  # tag, always field 1
            chunk, p = _read_chunk(body, p)
            values.append(chunk)
        return values
    packed, _ = _read_chunk(body, _read_varint(body, 0)[1])
    if kind == 2:  # packed floats
        return [struct.unpack_from("<f", packed, i)[0] for i in range(0, len(packed), 4)]
    if kind == 3:  # packed int64 varints
        out = []
        p = 0
        while p < len(packed):
            v, p = _read_varint(packed, p)
            if v >= 2**63:
                v -= 2**64
            out.append(v)
        return out
    raise PayloadError(f"unknown feature kind {kind}")


def decode_example(data: bytes) -> dict[str, list]:
    """Decode a payload produced by :func:`encode_example`."""
    try:
        tag, pos = _read_varint(data, 0)
        if tag >> 3 != 1:
            raise PayloadError("missing features field")
        features_body, _ = _read_chunk(data, pos)
        out: dict[str, list] = {}
        pos = 0
        while pos < len(features_body):
            _, pos = _read_varint(features_body, pos)  # map entry tag
            entry, pos = _read_chunk(features_body, pos)
            _, p = _read_varint(entry, 0)
            key_bytes, p = _read_chunk(entry, p)
            _, p = _read_varint(entry, p)
            feature, p = _read_chunk(entry, p)
            out[key_bytes.decode("utf-8")] = _decode_feature(feature)
        return out
    except (struct.error, IndexError) as exc:
        raise PayloadError(str(exc)) from exc
