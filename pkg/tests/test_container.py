"""Binary array container: round-trips, layout guarantees, corruption checks."""

import numpy as np
import pytest

from fusetrack import container


def _mixed_arrays(rng):
    return {
        "rasters": rng.standard_normal((3, 4, 5)).astype(np.float32),
        "timestamps": np.cumsum(rng.random(7)),
        "counts": rng.integers(0, 100, (2, 3)),
        "flags": (rng.random(9) > 0.5).astype(np.uint8),
        "empty_ok": np.zeros((0, 3), dtype=np.float64),
        "scalar_ish": np.array(3.25),
    }


def test_round_trip_preserves_values_dtypes_order(tmp_path):
    rng = np.random.default_rng(0)
    arrays = _mixed_arrays(rng)
    path = tmp_path / "blob.avht"
    container.write_arrays(path, arrays)
    back = container.read_arrays(path)
    assert list(back.keys()) == list(arrays.keys())
    for name, arr in arrays.items():
        assert back[name].dtype == np.asarray(arr).dtype
        assert back[name].shape == np.asarray(arr).shape
        np.testing.assert_array_equal(back[name], arr)


def test_write_is_byte_deterministic(tmp_path):
    arrays = _mixed_arrays(np.random.default_rng(1))
    p1, p2 = tmp_path / "a.avht", tmp_path / "b.avht"
    container.write_arrays(p1, arrays)
    container.write_arrays(p2, arrays)
    assert p1.read_bytes() == p2.read_bytes()


def test_payloads_eight_byte_aligned(tmp_path):
    arrays = {"a": np.arange(3, dtype=np.uint8), "b": np.arange(5, dtype=np.float64)}
    path = tmp_path / "aligned.avht"
    container.write_arrays(path, arrays)
    raw = path.read_bytes()
    # locate the f64 payload and check its offset
    payload = np.arange(5, dtype=np.float64).tobytes()
    off = raw.find(payload)
    assert off > 0 and off % 8 == 0
    assert raw[:4] == container.MAGIC


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.avht"
    container.write_arrays(path, {"x": np.zeros(2)})
    raw = bytearray(path.read_bytes())
    raw[:4] = b"NOPE"
    path.write_bytes(bytes(raw))
    with pytest.raises(container.ContainerError, match="magic"):
        container.read_arrays(path)


def test_unsupported_version_rejected(tmp_path):
    path = tmp_path / "v99.avht"
    container.write_arrays(path, {"x": np.zeros(2)})
    raw = bytearray(path.read_bytes())
    raw[4:8] = (99).to_bytes(4, "little")
    path.write_bytes(bytes(raw))
    with pytest.raises(container.ContainerError, match="version"):
        container.read_arrays(path)


def test_truncated_file_rejected(tmp_path):
    path = tmp_path / "trunc.avht"
    container.write_arrays(path, {"x": np.arange(100, dtype=np.float64)})
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(container.ContainerError):
        container.read_arrays(path)


def test_unsupported_dtype_raises_on_write(tmp_path):
    with pytest.raises(container.ContainerError, match="dtype"):
        container.write_arrays(tmp_path / "c.avht", {"c": np.zeros(2, dtype=np.complex128)})


def test_text_block_round_trip(tmp_path):
    arrays = {"x": np.zeros(3)}
    container.write_text_block(arrays, "meta", '{"seed": 7, "note": "caf\\u00e9"}')
    path = tmp_path / "t.avht"
    container.write_arrays(path, arrays)
    back = container.read_arrays(path)
    assert container.read_text_block(back, "meta") == '{"seed": 7, "note": "caf\\u00e9"}'
