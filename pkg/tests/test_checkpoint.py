"""Checkpoint container: framing, round trips, and rejection paths."""

import struct

import numpy as np
import pytest

from seqstack import DataError
from seqstack.checkpoint import (
    FORMAT_VERSION,
    MAGIC,
    load_checkpoint,
    restore_parameters,
    save_checkpoint,
)
from seqstack.tensor import parameter


def small_params(rng):
    return {
        "layer.w": parameter(rng.standard_normal((3, 4)).astype(np.float32)),
        "layer.b": parameter(rng.standard_normal(4).astype(np.float64)),
        "scalarish": parameter(rng.standard_normal((1,)).astype(np.float32)),
    }


class TestRoundTrip:
    def test_arrays_and_config_survive_exactly(self, tmp_path, rng):
        params = small_params(rng)
        config = {"train": {"lr": 1e-4, "epochs": 3}, "note": "round trip"}
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, config, params)
        loaded_config, arrays = load_checkpoint(path)
        assert loaded_config == config
        assert set(arrays) == set(params)
        for name, tensor in params.items():
            assert arrays[name].dtype == tensor.data.dtype
            np.testing.assert_array_equal(arrays[name], tensor.data)

    def test_restore_overwrites_live_parameters(self, tmp_path, rng):
        params = small_params(rng)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, {}, params)
        fresh = small_params(np.random.default_rng(999))
        _, arrays = load_checkpoint(path)
        restore_parameters(fresh, arrays)
        for name in params:
            np.testing.assert_array_equal(fresh[name].data, params[name].data)

    def test_restore_casts_to_live_dtype(self, tmp_path):
        stored = {"w": parameter(np.array([1.5, -2.25], dtype=np.float64))}
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, {}, stored)
        live = {"w": parameter(np.zeros(2, dtype=np.float32))}
        _, arrays = load_checkpoint(path)
        restore_parameters(live, arrays)
        assert live["w"].data.dtype == np.float32
        np.testing.assert_array_equal(live["w"].data, np.array([1.5, -2.25], np.float32))

    def test_on_disk_floats_are_little_endian(self, tmp_path):
        # [TRIVIAL] the single stored value must appear as its LE byte string.
        params = {"x": parameter(np.array([1.0], dtype=np.float32))}
        path = tmp_path / "one.ckpt"
        save_checkpoint(path, {}, params)
        blob = path.read_bytes()
        assert blob.startswith(MAGIC)
        assert struct.pack("<f", 1.0) == blob[-4:]


class TestRejection:
    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bogus.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 32)
        with pytest.raises(DataError, match="not a checkpoint"):
            load_checkpoint(path)

    def test_version_mismatch(self, tmp_path, rng):
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, {}, small_params(rng))
        blob = bytearray(path.read_bytes())
        blob[len(MAGIC) : len(MAGIC) + 4] = struct.pack("<I", FORMAT_VERSION + 1)
        path.write_bytes(bytes(blob))
        with pytest.raises(DataError, match="version"):
            load_checkpoint(path)

    def test_truncated_file(self, tmp_path, rng):
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, {"k": 1}, small_params(rng))
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) - 7])
        with pytest.raises(DataError, match="truncated"):
            load_checkpoint(path)

    def test_trailing_bytes(self, tmp_path, rng):
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, {}, small_params(rng))
        path.write_bytes(path.read_bytes() + b"junk")
        with pytest.raises(DataError, match="trailing"):
            load_checkpoint(path)

    def test_restore_rejects_shape_mismatch(self, tmp_path, rng):
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, {}, {"w": parameter(np.zeros((2, 3)))})
        _, arrays = load_checkpoint(path)
        live = {"w": parameter(np.zeros((3, 2)))}
        with pytest.raises(DataError, match="shape"):
            restore_parameters(live, arrays)

    def test_restore_rejects_name_set_mismatch(self, tmp_path, rng):
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, {}, {"w": parameter(np.zeros(2))})
        _, arrays = load_checkpoint(path)
        with pytest.raises(DataError, match="missing"):
            restore_parameters({"w2": parameter(np.zeros(2))}, arrays)

    def test_unsupported_param_dtype(self, tmp_path):
        bad = {"ids": parameter(np.zeros(3))}
        bad["ids"].data = np.zeros(3, dtype=np.int64)
        with pytest.raises(DataError, match="dtype"):
            save_checkpoint(tmp_path / "x.ckpt", {}, bad)
