import struct

import numpy as np
import pytest

from absorber.checkpoint import MAGIC, VERSION, CheckpointError, load_checkpoint, read_header, save_checkpoint
from absorber.model import ModelConfig, init_model, tensor_shapes

SMALL = ModelConfig(num_layers=2, hidden_dim=16, num_heads=2, mlp_dim=24, max_positions=128)


@pytest.fixture
def saved(tmp_path):
    w = init_model(SMALL, 4)
    path = tmp_path / "m.absb"
    save_checkpoint(w, path, {"steps": 7})
    return w, path


def test_round_trip_bitwise(saved):
    w, path = saved
    loaded, config, provenance = load_checkpoint(path)
    assert config == SMALL and provenance == {"steps": 7}
    assert all(loaded.tensors[k].tobytes() == w.tensors[k].tobytes() for k in w.tensors)


def test_header_lists_every_tensor(saved):
    _, path = saved
    header, start = read_header(path)
    assert list(header["tensors"]) == list(tensor_shapes(SMALL))
    total = sum(e["length"] for e in header["tensors"].values())
    assert path.stat().st_size == start + total


def test_magic_and_version_prefix(saved):
    _, path = saved
    magic, version, _ = struct.unpack("<4sIQ", path.read_bytes()[:16])
    assert magic == MAGIC and version == VERSION


def test_truncated_payload(saved):
    _, path = saved
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_truncated_prefix(tmp_path):
    path = tmp_path / "x.absb"
    path.write_bytes(b"ABS")
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_bad_magic(saved):
    _, path = saved
    data = bytearray(path.read_bytes())
    data[:4] = b"NOPE"
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_wrong_version(saved):
    _, path = saved
    data = bytearray(path.read_bytes())
    data[4:8] = struct.pack("<I", VERSION + 1)
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_trailing_bytes(saved):
    _, path = saved
    path.write_bytes(path.read_bytes() + b"\0\0\0\0")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(path)


def test_corrupt_header(saved):
    _, path = saved
    data = bytearray(path.read_bytes())
    data[16] = ord("#")
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="header"):
        load_checkpoint(path)


def test_overwrite_is_atomic(saved, tmp_path):
    w, path = saved
    other = init_model(SMALL, 5)
    save_checkpoint(other, path)
    assert load_checkpoint(path)[0].equals(other)
    assert [p.name for p in tmp_path.iterdir()] == ["m.absb"]


def test_float64_weights_stored_as_f32(tmp_path):
    w = init_model(SMALL, 6, dtype=np.float64)
    save_checkpoint(w, tmp_path / "d.absb")
    loaded = load_checkpoint(tmp_path / "d.absb")[0]
    assert loaded.tensors["unembedding"].dtype == np.float32
    np.testing.assert_array_equal(loaded.tensors["unembedding"], w.tensors["unembedding"].astype(np.float32))
