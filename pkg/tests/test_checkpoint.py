import json
import zipfile

import numpy as np
import pytest

from helpers import random_model
from sfosda import checkpoint
from sfosda.engine import load_model, save_model
from sfosda.errors import IntegrityError


def sample_arrays(rng):
    return {
        "W0": rng.normal(size=(3, 2)),
        "b0": rng.normal(size=3),
        "mask": rng.random((3, 2)) > 0.5,
        "counts": np.arange(5, dtype=np.int64),
    }


class TestFormat:
    def test_round_trip_bit_exact(self, tmp_path, nprng):
        arrays = sample_arrays(nprng)
        checkpoint.save(tmp_path / "c.npz", arrays, "model", 7, {"note": "x"})
        back, header = checkpoint.load(tmp_path / "c.npz", kind="model")
        assert set(back) == set(arrays)
        for k in arrays:
            assert back[k].dtype == arrays[k].dtype and back[k].shape == arrays[k].shape
            assert back[k].tobytes() == arrays[k].tobytes()
        assert header["seed"] == 7 and header["meta"] == {"note": "x"}
        assert header["format"] == checkpoint.FORMAT and header["version"] == checkpoint.VERSION

    def test_layout_is_plain_npz(self, tmp_path, nprng):
        checkpoint.save(tmp_path / "c.npz", sample_arrays(nprng), "model", 0)
        with zipfile.ZipFile(tmp_path / "c.npz") as zf:
            assert sorted(zf.namelist()) == sorted(["W0.npy", "b0.npy", "mask.npy", "counts.npy", "__meta__.npy"])
        with np.load(tmp_path / "c.npz") as npz:
            meta = json.loads(npz["__meta__"].tobytes())
        assert meta["kind"] == "model" and len(meta["sha256"]) == 64

    def test_no_temp_files_left(self, tmp_path, nprng):
        checkpoint.save(tmp_path / "c.npz", sample_arrays(nprng), "model", 0)
        assert [p.name for p in tmp_path.iterdir()] == ["c.npz"]

    def test_model_round_trip(self, tmp_path, nprng):
        params = random_model(nprng, 3, 4)
        params.weight_masks[-1][0] = False
        save_model(tmp_path / "m.npz", params, 11)
        back, header = load_model(tmp_path / "m.npz")
        assert back.same_as(params) and back.activations == params.activations
        assert all(np.array_equal(a, b) for a, b in zip(back.weight_masks, params.weight_masks))
        assert header["seed"] == 11


class TestIntegrity:
    def test_corrupt_bytes(self, tmp_path, nprng):
        p = tmp_path / "c.npz"
        checkpoint.save(p, sample_arrays(nprng), "model", 0)
        blob = bytearray(p.read_bytes())
        blob[len(blob) // 3] ^= 0xFF
        p.write_bytes(bytes(blob))
        with pytest.raises(IntegrityError):
            checkpoint.load(p)

    def test_truncated(self, tmp_path, nprng):
        p = tmp_path / "c.npz"
        checkpoint.save(p, sample_arrays(nprng), "model", 0)
        p.write_bytes(p.read_bytes()[:100])
        with pytest.raises(IntegrityError):
            checkpoint.load(p)

    def test_tampered_tensor(self, tmp_path, nprng):
        # a well-formed archive whose tensors no longer match the stored digest
        p = tmp_path / "c.npz"
        arrays = sample_arrays(nprng)
        checkpoint.save(p, arrays, "model", 0)
        with np.load(p) as npz:
            contents = {k: npz[k] for k in npz.files}
        contents["W0"] = contents["W0"] + 1e-12
        np.savez(p, **contents)
        with pytest.raises(IntegrityError, match="checksum"):
            checkpoint.load(p)

    def test_version_mismatch(self, tmp_path, nprng):
        p = tmp_path / "c.npz"
        checkpoint.save(p, sample_arrays(nprng), "model", 0)
        with np.load(p) as npz:
            contents = {k: npz[k] for k in npz.files}
        meta = json.loads(contents["__meta__"].tobytes())
        meta["version"] = 99
        contents["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
        np.savez(p, **contents)
        with pytest.raises(IntegrityError, match="version 99"):
            checkpoint.load(p)

    def test_wrong_kind(self, tmp_path, nprng):
        p = tmp_path / "c.npz"
        checkpoint.save(p, sample_arrays(nprng), "adapt-state", 0)
        with pytest.raises(IntegrityError, match="expected a 'model'"):
            checkpoint.load(p, kind="model")

    def test_foreign_npz(self, tmp_path):
        p = tmp_path / "c.npz"
        np.savez(p, a=np.zeros(2))
        with pytest.raises(IntegrityError, match="metadata"):
            checkpoint.load(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(IntegrityError):
            checkpoint.load(tmp_path / "none.npz")
