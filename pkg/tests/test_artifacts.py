import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from egosync import artifacts
from egosync.exceptions import CorruptCheckpoint, IoError, MissingArtifact


@settings(max_examples=30, deadline=None)
@given(arrays(st.sampled_from([np.float32, np.float64, np.int64]),
              st.tuples(st.integers(0, 4), st.integers(1, 5))))
def test_tensor_round_trip_is_bit_exact(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("t") / "x.npy"
    artifacts.save_tensor(path, arr)
    back = artifacts.load_tensor(path)
    assert back.dtype == arr.dtype and back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()


def test_tensor_errors(tmp_path):
    with pytest.raises(MissingArtifact):
        artifacts.load_tensor(tmp_path / "none.npy")
    (tmp_path / "bad.npy").write_bytes(b"garbage")
    with pytest.raises(IoError):
        artifacts.load_tensor(tmp_path / "bad.npy")
    with pytest.raises(TypeError):
        artifacts.save_tensor(tmp_path / "o.npy", np.array([object()]))


def test_checkpoint_round_trip_and_layout(tmp_path, rng):
    tensors = {"w": rng.normal(size=(3, 4)).astype(np.float32), "n": np.arange(5)}
    path = tmp_path / "c.ckpt"
    artifacts.write_checkpoint(path, "demo", tensors, {"epoch": 2})
    raw = path.read_bytes()
    assert raw[:8] == artifacts.MAGIC
    assert struct.unpack_from("<I", raw, 8)[0] == artifacts.CHECKPOINT_VERSION
    back, meta = artifacts.read_checkpoint(path, kind="demo")
    assert meta == {"epoch": 2} and list(back) == ["w", "n"]
    for k in tensors:
        assert back[k].tobytes() == tensors[k].tobytes() and back[k].dtype == tensors[k].dtype
    artifacts.write_checkpoint(tmp_path / "d.ckpt", "demo", tensors, {"epoch": 2})
    assert (tmp_path / "d.ckpt").read_bytes() == raw
    with pytest.raises(CorruptCheckpoint):
        artifacts.read_checkpoint(path, kind="model")
    with pytest.raises(MissingArtifact):
        artifacts.read_checkpoint(tmp_path / "missing.ckpt")


def test_records_round_trip(tmp_path):
    rows = [["a", 1, 0.1], ["b", -2, 1 / 3], ["c", 0, 1e-300]]
    path = tmp_path / "r.tsv"
    artifacts.write_records(path, ["name", "k", "x"], rows)
    header, back = artifacts.read_records(path)
    assert header == ["name", "k", "x"] and back == rows
    (tmp_path / "empty.tsv").write_text("")
    assert artifacts.read_records(tmp_path / "empty.tsv") == ([], [])
    with pytest.raises(IoError):
        artifacts.write_records(tmp_path / "no" / "dir.tsv", ["a"], [])
