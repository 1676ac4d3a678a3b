import numpy as np
import pytest
import torch

from distilseg import io
from distilseg.volume import LabelMap, Volume


class TestRawContainer:
    def test_volume_round_trip(self, tmp_path, rng):
        v = Volume(rng.uniform(0, 1, size=(6, 7, 8)), spacing=(1.0, 1.5, 2.0))
        path = tmp_path / "v.npz"
        io.save_raw_volume(path, v)
        back = io.load_raw_volume(path)
        np.testing.assert_array_equal(back.data, v.data)
        assert back.spacing == v.spacing

    def test_labels_round_trip(self, tmp_path, rng):
        lab = LabelMap(rng.integers(0, 5, size=(6, 6, 6)), num_classes=5)
        path = tmp_path / "l.npz"
        io.save_raw_labels(path, lab)
        back = io.load_raw_labels(path)
        np.testing.assert_array_equal(back.data, lab.data)
        assert back.num_classes == 5

    def test_volume_container_is_not_labels(self, tmp_path, rng):
        v = Volume(rng.uniform(size=(4, 4, 4)))
        path = tmp_path / "v.npz"
        io.save_raw_volume(path, v)
        with pytest.raises(ValueError):
            io.load_raw_labels(path)


class TestNifti:
    @pytest.mark.parametrize("suffix", [".nii", ".nii.gz"])
    def test_float_round_trip(self, tmp_path, rng, suffix):
        data = rng.uniform(0, 1, size=(5, 6, 7)).astype(np.float32)
        path = tmp_path / f"vol{suffix}"
        io.write_nifti(path, data, spacing=(1.0, 2.0, 3.0))
        arr, spacing = io.read_nifti(path)
        np.testing.assert_array_equal(arr, data)
        assert spacing == (1.0, 2.0, 3.0)

    def test_integer_labels_round_trip(self, tmp_path, rng):
        data = rng.integers(0, 4, size=(4, 5, 6)).astype(np.int16)
        path = tmp_path / "labels.nii.gz"
        io.write_nifti(path, data)
        lab = io.load_labels(path, num_classes=4)
        np.testing.assert_array_equal(lab.data, data)

    def test_load_volume_dispatch(self, tmp_path, rng):
        data = rng.uniform(0, 1, size=(4, 4, 4)).astype(np.float32)
        nifti = tmp_path / "v.nii"
        io.write_nifti(nifti, data)
        v = io.load_volume(nifti)
        np.testing.assert_allclose(v.data, data, atol=0)
        raw = tmp_path / "v.npz"
        io.save_raw_volume(raw, v)
        np.testing.assert_array_equal(io.load_volume(raw).data, v.data)

    def test_rejects_garbage(self, tmp_path):
        path = tmp_path / "bad.nii"
        path.write_bytes(b"\x00" * 400)
        with pytest.raises(ValueError):
            io.read_nifti(path)

    def test_unknown_extension_raises(self, tmp_path):
        with pytest.raises(ValueError):
            io.load_volume(tmp_path / "volume.dcm")


class TestCheckpoints:
    def test_bit_exact_round_trip(self, tmp_path, rng):
        state = {
            "w": torch.tensor(rng.standard_normal((3, 4)).astype(np.float32)),
            "b": torch.tensor(rng.standard_normal(4).astype(np.float32)),
        }
        history = [{"total": 1.0}, {"total": 0.5}]
        path = tmp_path / "ckpt.pt"
        io.save_checkpoint(path, kind="registration", config={"lr": 1e-4},
                           state=state, epoch=2, history=history)
        back = io.load_checkpoint(path, expected_kind="registration")
        assert back["epoch"] == 2
        assert back["history"] == history
        assert back["config"] == {"lr": 1e-4}
        for key in state:
            assert torch.equal(back["state"][key], state[key])
            assert back["state"][key].dtype == state[key].dtype

    def test_kind_mismatch_raises(self, tmp_path):
        path = tmp_path / "ckpt.pt"
        io.save_checkpoint(path, kind="distill", config={}, state={})
        with pytest.raises(ValueError):
            io.load_checkpoint(path, expected_kind="student")

    def test_student_loader_rejects_foreign_weights(self, tmp_path):
        path = tmp_path / "bad_student.pt"
        io.save_checkpoint(path, kind="student", config={},
                           state={"teacher.conv.weight": torch.zeros(1)})
        with pytest.raises(ValueError):
            io.load_student_checkpoint(path)


class TestManifest:
    def test_round_trip_and_validation(self, tmp_path):
        manifest = {"atlas": {"image": "a.npz", "labels": "al.npz"},
                    "train": [], "test": [], "num_classes": 4}
        path = tmp_path / "manifest.json"
        io.save_manifest(path, manifest)
        assert io.load_manifest(path) == manifest
        io.save_manifest(path, {"atlas": {}})
        with pytest.raises(ValueError):
            io.load_manifest(path)

    def test_resolve_relative_paths(self, tmp_path):
        path = tmp_path / "manifest.json"
        resolved = io.resolve_manifest_path(path, "sub/vol.npz")
        assert resolved == str(tmp_path / "sub" / "vol.npz")
