import numpy as np
import pytest

from rankuap.container import MAGIC, load_container, save_container
from rankuap.errors import FormatError


class TestRoundTrip:
    def test_header_and_arrays(self, tmp_path):
        path = tmp_path / "c.bin"
        arrays = [np.arange(6.0).reshape(2, 3), np.array([[1.5]])]
        save_container(path, {"kind": "demo", "note": "x"}, arrays)
        header, back = load_container(path)
        assert header["kind"] == "demo"
        assert header["note"] == "x"
        for a, b in zip(arrays, back):
            np.testing.assert_array_equal(a, b)

    def test_empty_array_list(self, tmp_path):
        path = tmp_path / "c.bin"
        save_container(path, {"kind": "empty"}, [])
        header, arrays = load_container(path)
        assert arrays == []

    def test_dtype_normalized_to_float64(self, tmp_path):
        path = tmp_path / "c.bin"
        save_container(path, {"kind": "demo"}, [np.array([1, 2], dtype=np.int32)])
        _, arrays = load_container(path)
        assert arrays[0].dtype == np.float64


class TestCorruption:
    def test_missing_file(self, tmp_path):
        with pytest.raises(FormatError):
            load_container(tmp_path / "absent.bin")

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "c.bin"
        path.write_bytes(b"NOT-A-CONTAINER" + b"\x00" * 32)
        with pytest.raises(FormatError):
            load_container(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "c.bin"
        save_container(path, {"kind": "demo"}, [np.zeros((4, 4))])
        raw = path.read_bytes()
        path.write_bytes(raw[:-16])
        with pytest.raises(FormatError):
            load_container(path)

    def test_corrupt_header_json(self, tmp_path):
        path = tmp_path / "c.bin"
        save_container(path, {"kind": "demo"}, [])
        raw = bytearray(path.read_bytes())
        raw[len(MAGIC) + 8] = ord("X")
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            load_container(path)
