import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pushfuse.checkpoint import checkpoint_exists, load_checkpoint, save_checkpoint
from pushfuse.errors import MissingArtifact, NumericalError, ShapeError


def test_round_trip_is_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "w0": rng.standard_normal((4, 3)),
        "b0": rng.standard_normal(3) * 1e-17,
        "scalar": np.array(np.pi),
        "tiny": np.array([5e-324, -5e-324, 0.0]),  # subnormals survive too
    }
    path = tmp_path / "ck.json"
    save_checkpoint(path, tensors, "abc123", {"phase": "test", "seed": 7})
    loaded, header = load_checkpoint(path)
    assert set(loaded) == set(tensors)
    for name, arr in tensors.items():
        assert loaded[name].shape == np.asarray(arr).shape
        assert np.array_equal(loaded[name], np.asarray(arr, dtype=np.float64))
    assert header["config_hash"] == "abc123"
    assert header["metadata"] == {"phase": "test", "seed": 7}


def test_resave_is_byte_identical(tmp_path):
    rng = np.random.default_rng(1)
    tensors = {"a": rng.standard_normal((5, 5)), "b": rng.standard_normal(2)}
    p1 = tmp_path / "one.json"
    p2 = tmp_path / "two.json"
    save_checkpoint(p1, tensors, "h", {"k": 1})
    loaded, header = load_checkpoint(p1)
    save_checkpoint(p2, loaded, header["config_hash"], header["metadata"], created=header["created"])
    assert p1.read_bytes() == p2.read_bytes()


@given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=1, max_size=30))
@settings(deadline=None, max_examples=50)
def test_any_finite_double_round_trips(tmp_path_factory, values):
    path = tmp_path_factory.mktemp("ck") / "vals.json"
    arr = np.array(values)
    save_checkpoint(path, {"v": arr}, "h")
    loaded, _ = load_checkpoint(path)
    assert np.array_equal(loaded["v"], arr)


def test_nonfinite_tensor_rejected(tmp_path):
    with pytest.raises(NumericalError):
        save_checkpoint(tmp_path / "bad.json", {"x": np.array([1.0, np.nan])}, "h")
    with pytest.raises(NumericalError):
        save_checkpoint(tmp_path / "bad.json", {"x": np.array([np.inf])}, "h")


def test_missing_file_raises(tmp_path):
    assert not checkpoint_exists(tmp_path / "nope.json")
    with pytest.raises(MissingArtifact):
        load_checkpoint(tmp_path / "nope.json")


def test_unsupported_format_version_rejected(tmp_path):
    path = tmp_path / "old.json"
    path.write_text('{"format_version": 99, "tensors": {}}\n')
    with pytest.raises(ShapeError):
        load_checkpoint(path)


def test_shapes_preserved(tmp_path):
    tensors = {"m": np.arange(24, dtype=np.float64).reshape(2, 3, 4)}
    path = tmp_path / "shape.json"
    save_checkpoint(path, tensors, "h")
    loaded, _ = load_checkpoint(path)
    assert loaded["m"].shape == (2, 3, 4)
    assert np.array_equal(loaded["m"], tensors["m"])
