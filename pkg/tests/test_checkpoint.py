import json
import struct

import numpy as np
import pytest

from factories import tiny_model
from ssmprune.checkpoint import CheckpointError, load_model, load_tensors, read_header, save_model, save_tensors


def write_raw(path, header: dict, payload: bytes) -> None:
    blob = json.dumps(header).encode()
    path.write_bytes(struct.pack("<Q", len(blob)) + blob + payload)


def test_round_trip_is_bit_exact(tmp_path):
    model = tiny_model(seed=3)
    save_model(model, tmp_path / "m.st")
    loaded = load_model(tmp_path / "m.st")
    assert loaded.config == model.config
    for name, arr in model.tensors().items():
        got = loaded.tensors()[name]
        assert got.dtype == np.float32 and got.tobytes() == arr.tobytes()


def test_saving_is_deterministic(tmp_path):
    save_model(tiny_model(seed=1), tmp_path / "a.st")
    save_model(tiny_model(seed=1), tmp_path / "b.st")
    assert (tmp_path / "a.st").read_bytes() == (tmp_path / "b.st").read_bytes()


def test_hand_written_file(tmp_path):
    # header length, JSON header, then four little-endian float32 values
    values = [1.5, -2.0, 0.25, 3.0]
    header = b'{"w":{"dtype":"F32","shape":[2,2],"data_offsets":[0,16]}}'
    raw = struct.pack("<Q", len(header)) + header + struct.pack("<4f", *values)
    path = tmp_path / "hand.st"
    path.write_bytes(raw)
    tensors, meta = load_tensors(path)
    assert meta == {}
    assert tensors["w"].shape == (2, 2)
    assert tensors["w"].ravel().tolist() == values


def test_layout_of_written_file(tmp_path):
    path = tmp_path / "t.st"
    save_tensors({"b": np.ones(3), "a": np.zeros((1, 2))}, path, {"k": "v"})
    raw = path.read_bytes()
    (n,) = struct.unpack("<Q", raw[:8])
    assert n % 8 == 0
    header = json.loads(raw[8 : 8 + n])
    assert header["__metadata__"] == {"k": "v"}
    assert header["a"] == {"dtype": "F32", "shape": [1, 2], "data_offsets": [0, 8]}
    assert header["b"] == {"dtype": "F32", "shape": [3], "data_offsets": [8, 20]}
    assert len(raw) == 8 + n + 20


@pytest.mark.parametrize(
    "header, payload, message",
    [
        ({"a": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]},
          "b": {"dtype": "F32", "shape": [2], "data_offsets": [4, 12]}}, bytes(12), "overlap"),
        ({"a": {"dtype": "F16", "shape": [2], "data_offsets": [0, 4]}}, bytes(4), "dtype"),
        ({"a": {"dtype": "F32", "shape": [3], "data_offsets": [0, 8]}}, bytes(8), "shape"),
        ({"a": {"dtype": "F32", "shape": [4], "data_offsets": [0, 16]}}, bytes(8), "truncated"),
        ({"a": {"dtype": "F32", "shape": [2], "data_offsets": [4, 12]}}, bytes(12), "gap"),
        ({"a": {"dtype": "F32", "shape": [1], "data_offsets": [0, 4]}}, bytes(8), "cover"),
        ({"a": {"dtype": "F32", "shape": [1]}}, bytes(4), "malformed"),
        ({"__metadata__": {"x": 1}}, b"", "metadata"),
    ],
)
def test_bad_headers_rejected(tmp_path, header, payload, message):
    path = tmp_path / "bad.st"
    write_raw(path, header, payload)
    with pytest.raises(CheckpointError, match=message):
        read_header(path)


def test_garbage_rejected(tmp_path):
    path = tmp_path / "g.st"
    path.write_bytes(b"\x01\x02")
    with pytest.raises(CheckpointError):
        load_tensors(path)
    path.write_bytes(struct.pack("<Q", 10**12) + b"{}")
    with pytest.raises(CheckpointError, match="exceeds"):
        load_tensors(path)
    path.write_bytes(struct.pack("<Q", 3) + b"{x}")
    with pytest.raises(CheckpointError, match="malformed"):
        load_tensors(path)


def test_model_shape_mismatch_rejected(tmp_path):
    model = tiny_model()
    tensors = model.tensors()
    tensors["layers.0.a_log"] = tensors["layers.0.a_log"][:, :2]
    save_tensors(tensors, tmp_path / "m.st", model.config.to_strings())
    with pytest.raises(CheckpointError, match="a_log"):
        load_model(tmp_path / "m.st")


def test_missing_config_or_tensor_rejected(tmp_path):
    model = tiny_model()
    save_tensors(model.tensors(), tmp_path / "noconf.st")
    with pytest.raises(CheckpointError, match="config"):
        load_model(tmp_path / "noconf.st")
    tensors = dict(model.tensors())
    del tensors["norm_f"]
    save_tensors(tensors, tmp_path / "missing.st", model.config.to_strings())
    with pytest.raises(CheckpointError, match="norm_f"):
        load_model(tmp_path / "missing.st")
