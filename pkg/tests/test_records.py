import random
import struct

import pytest

from trapline.records import (
    RecordError,
    RecordWriter,
    TruncatedRecordError,
    bytes_feature,
    crc32c,
    decode_example,
    encode_example,
    float_feature,
    int64_feature,
    masked_crc32c,
    read_records,
    write_records,
)
from oracles import crc32c_bitwise, mask_crc

# Frozen with the bitwise oracle: an empty-payload record is exactly these 16 bytes.
EMPTY_RECORD_HEX = "000000000000000029039807d8ea82a2"


class TestCrc32c:
    def test_rfc3720_vectors(self):
        assert crc32c(b"123456789") == 0xE3069283
        assert crc32c(b"") == 0x00000000
        assert crc32c(b"\x00" * 32) == 0x8A9136AA

    def test_matches_bitwise_oracle(self, rng):
        for _ in range(50):
            data = rng.randbytes(rng.randint(0, 64))
            assert crc32c(data) == crc32c_bitwise(data)

    def test_mask(self):
        for data in (b"", b"abc", struct.pack("<Q", 0)):
            assert masked_crc32c(data) == mask_crc(crc32c_bitwise(data))


class TestContainer:
    def test_empty_file_reads_empty(self, tmp_path):
        path = tmp_path / "r.records"
        assert write_records(path, []) == 0
        assert path.stat().st_size == 0
        assert read_records(path) == []

    def test_empty_payload_record_is_16_bytes(self, tmp_path):
        path = tmp_path / "r.records"
        assert write_records(path, [b""]) == 1
        data = path.read_bytes()
        assert len(data) == 16
        assert data.hex() == EMPTY_RECORD_HEX
        # both CRC fields equal the oracle values
        assert struct.unpack("<I", data[8:12])[0] == mask_crc(crc32c_bitwise(data[:8]))
        assert struct.unpack("<I", data[12:16])[0] == mask_crc(crc32c_bitwise(b""))

    def test_round_trip_five_payloads(self, tmp_path):
        payloads = [b"a", b"", b"hello world", bytes(range(256)), b"\x00\xff" * 7]
        path = tmp_path / "five.records"
        assert write_records(path, payloads) == 5
        assert read_records(path) == payloads

    def test_round_trip_randomized(self, tmp_path, rng):
        for trial in range(25):
            payloads = [rng.randbytes(rng.randint(0, 200)) for _ in range(rng.randint(0, 8))]
            path = tmp_path / f"t{trial}.records"
            write_records(path, payloads)
            assert read_records(path) == payloads

    def test_single_corrupted_byte_detected(self, tmp_path):
        payloads = [b"first", b"second-record", b"third"]
        path = tmp_path / "c.records"
        write_records(path, payloads)
        original = path.read_bytes()
        for pos in range(len(original)):
            corrupted = bytearray(original)
            corrupted[pos] ^= 0x5A
            path.write_bytes(bytes(corrupted))
            with pytest.raises(RecordError):
                read_records(path)
        path.write_bytes(original)
        assert read_records(path) == payloads

    def test_corruption_error_names_record_index(self, tmp_path):
        payloads = [b"first", b"second-record", b"third"]
        path = tmp_path / "c.records"
        write_records(path, payloads)
        data = bytearray(path.read_bytes())
        # flip a byte inside the second record's payload
        offset = (16 + len(b"first")) + 12 + 3
        data[offset] ^= 0xFF
        path.write_bytes(bytes(data))
        with pytest.raises(RecordError) as excinfo:
            read_records(path)
        assert excinfo.value.index == 1

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "t.records"
        write_records(path, [b"payload"])
        data = path.read_bytes()
        path.write_bytes(data[:-2])
        with pytest.raises(TruncatedRecordError):
            read_records(path)

    def test_writer_is_incremental(self, tmp_path):
        path = tmp_path / "w.records"
        with RecordWriter(path) as writer:
            writer.write(b"one")
            writer.write(b"two")
            assert writer.count == 2
        assert read_records(path) == [b"one", b"two"]


class TestExamplePayload:
    def test_round_trip(self):
        payload = encode_example({
            "image/encoded": bytes_feature([b"\xff\xd8jpegdata"]),
            "image/width": int64_feature([1024]),
            "image/height": int64_feature([768]),
            "image/object/class/text": bytes_feature([b"Pica pica", b"Erithacus rubecula"]),
            "image/object/bbox/xmin": float_feature([0.125, 0.5]),
        })
        decoded = decode_example(payload)
        assert decoded["image/encoded"] == [b"\xff\xd8jpegdata"]
        assert decoded["image/width"] == [1024]
        assert decoded["image/height"] == [768]
        assert decoded["image/object/class/text"] == [b"Pica pica", b"Erithacus rubecula"]
        assert decoded["image/object/bbox/xmin"] == pytest.approx([0.125, 0.5], abs=1e-7)

    def test_empty_lists(self):
        decoded = decode_example(encode_example({
            "image/object/class/text": bytes_feature([]),
            "image/object/bbox/xmin": float_feature([]),
            "image/width": int64_feature([]),
        }))
        assert decoded == {
            "image/object/class/text": [],
            "image/object/bbox/xmin": [],
            "image/width": [],
        }

    def test_deterministic_encoding(self):
        features = {"b": int64_feature([2]), "a": int64_feature([1])}
        assert encode_example(features) == encode_example(dict(reversed(features.items())))

    def test_large_and_negative_ints(self):
        decoded = decode_example(encode_example({"v": int64_feature([0, 1, -1, 2**40, -(2**40)])}))
        assert decoded["v"] == [0, 1, -1, 2**40, -(2**40)]
