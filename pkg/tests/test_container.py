"""Binary container format: round-trips, magic/version checks, truncation offsets."""

import numpy as np
import pytest

from synmesh.container import (MAGIC_CHECKPOINT, MAGIC_DATASET, MAGIC_TEMPLATE,
                               read_container, write_container)
from synmesh.errors import ContainerError


def _roundtrip(tmp_path, records, magic=MAGIC_DATASET):
    path = tmp_path / "blob.bin"
    write_container(path, magic, records)
    return read_container(path, magic)


def test_roundtrip_all_dtypes(tmp_path):
    rec = {
        "f4": np.arange(6, dtype=np.float32).reshape(2, 3),
        "f8": np.linspace(0, 1, 5),
        "i4": np.array([[1, -2], [3, -4]], dtype=np.int32),
        "i8": np.array([2**40, -7], dtype=np.int64),
        "u1": np.array([0, 255, 17], dtype=np.uint8),
        "flags": np.array([True, False, True]),
        "meta": {"nested": {"a": 1}, "text": "hello", "pi": 3.5},
    }
    out = _roundtrip(tmp_path, [rec])
    assert len(out) == 1
    got = out[0]
    for key in ("f4", "f8", "i4", "i8", "u1", "flags"):
        assert got[key].dtype == rec[key].dtype
        np.testing.assert_array_equal(got[key], rec[key])
    assert got["meta"] == rec["meta"]


def test_multiple_records_preserve_order(tmp_path):
    records = [{"idx": np.array([i])} for i in range(7)]
    out = _roundtrip(tmp_path, records)
    assert [int(r["idx"][0]) for r in out] == list(range(7))


def test_zero_length_array(tmp_path):
    out = _roundtrip(tmp_path, [{"empty": np.zeros((0, 3), dtype=np.float32)}])
    assert out[0]["empty"].shape == (0, 3)


def test_wrong_magic_rejected(tmp_path):
    path = tmp_path / "blob.bin"
    write_container(path, MAGIC_DATASET, [{"x": np.zeros(1)}])
    with pytest.raises(ContainerError) as err:
        read_container(path, MAGIC_TEMPLATE)
    assert "magic" in str(err.value).lower()


def test_version_mismatch_distinct_message(tmp_path):
    """Same family, bumped version -> a version error, not a generic bad magic."""
    path = tmp_path / "blob.bin"
    future = MAGIC_DATASET.replace(b"-v1", b"-v2")
    write_container(path, future, [{"x": np.zeros(1)}])
    with pytest.raises(ContainerError) as err:
        read_container(path, MAGIC_DATASET)
    assert "version" in str(err.value).lower()


def test_garbage_file_rejected(tmp_path):
    path = tmp_path / "blob.bin"
    path.write_bytes(b"not a container at all, definitely long enough\n")
    with pytest.raises(ContainerError):
        read_container(path, MAGIC_DATASET)


def test_truncation_reports_offset(tmp_path):
    path = tmp_path / "blob.bin"
    write_container(path, MAGIC_CHECKPOINT,
                    [{"w": np.arange(100, dtype=np.float64)}])
    blob = path.read_bytes()
    cut = len(blob) - 37
    path.write_bytes(blob[:cut])
    with pytest.raises(ContainerError) as err:
        read_container(path, MAGIC_CHECKPOINT)
    assert err.value.offset is not None
    assert 0 < err.value.offset <= cut


def test_truncated_header(tmp_path):
    path = tmp_path / "blob.bin"
    write_container(path, MAGIC_DATASET, [{"x": np.zeros(4)}])
    path.write_bytes(path.read_bytes()[:8])
    with pytest.raises(ContainerError):
        read_container(path, MAGIC_DATASET)
