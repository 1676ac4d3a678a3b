import numpy as np
import pytest
import torch

import oracles
from conftest import random_field, random_volume
from distilseg.volume import (
    AtlasPair,
    DisplacementField,
    LabelMap,
    SyntheticPair,
    Volume,
)
from distilseg.warp import ncc_score, warp_labels, warp_tensor, warp_volume


class TestTypes:
    def test_volume_rejects_nan(self):
        data = np.zeros((4, 4, 4))
        data[0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            Volume(data)

    def test_volume_rejects_wrong_ndim(self):
        with pytest.raises(ValueError):
            Volume(np.zeros((4, 4)))

    def test_labelmap_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            LabelMap(np.full((4, 4, 4), 5, dtype=np.int64), num_classes=4)

    def test_labelmap_rejects_single_class(self):
        with pytest.raises(ValueError):
            LabelMap(np.zeros((4, 4, 4), dtype=np.int64), num_classes=1)

    def test_field_requires_three_components(self):
        with pytest.raises(ValueError):
            DisplacementField(np.zeros((2, 4, 4, 4)))

    def test_atlas_pair_shape_check(self):
        img = Volume(np.zeros((4, 4, 4)))
        lab = LabelMap(np.zeros((5, 4, 4), dtype=np.int64), num_classes=2)
        with pytest.raises(ValueError):
            AtlasPair(img, lab)

    def test_synthetic_pair_holds_source_id(self):
        img = Volume(np.zeros((4, 4, 4)))
        lab = LabelMap(np.zeros((4, 4, 4), dtype=np.int64), num_classes=2)
        pair = SyntheticPair(img, lab, source_id=3)
        assert pair.source_id == 3

    def test_spacing_broadcast_and_validation(self):
        v = Volume(np.zeros((4, 4, 4)), spacing=2.0)
        assert v.spacing == (2.0, 2.0, 2.0)
        with pytest.raises(ValueError):
            Volume(np.zeros((4, 4, 4)), spacing=(1.0, -1.0, 1.0))


class TestWarpVolume:
    def test_zero_field_is_identity(self, rng):
        v = random_volume(rng)
        zero = DisplacementField(np.zeros((3,) + v.shape))
        out = warp_volume(v, zero)
        np.testing.assert_array_equal(out.data, v.data)

    def test_unit_shift_on_linear_ramp(self):
        # v(z,y,x) = x shifted by +1 along x: interior voxels read x+1
        shape = (4, 4, 6)
        v = Volume(np.broadcast_to(
            np.arange(shape[2], dtype=float), shape).copy())
        field = np.zeros((3,) + shape)
        field[2] = 1.0
        out = warp_volume(v, DisplacementField(field))
        assert np.allclose(out.data[:, :, :-1],
                           v.data[:, :, :-1] + 1.0)
        # border clamps to the last voxel
        assert np.allclose(out.data[:, :, -1], shape[2] - 1)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_trilinear_oracle(self, seed):
        rng = np.random.default_rng(seed)
        v = random_volume(rng)
        f = random_field(rng, magnitude=2.0)
        out = warp_volume(v, f, mode="trilinear")
        expected = oracles.warp_trilinear(v.data, f.data)
        np.testing.assert_allclose(out.data, expected, atol=1e-6)

    def test_linearity_in_volume(self, rng):
        v1 = random_volume(rng)
        v2 = random_volume(rng)
        f = random_field(rng)
        a, b = 0.7, -1.3
        combo = Volume(a * v1.data + b * v2.data)
        lhs = warp_volume(combo, f).data
        rhs = a * warp_volume(v1, f).data + b * warp_volume(v2, f).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-6)

    def test_shape_mismatch_raises(self, rng):
        v = random_volume(rng, shape=(8, 8, 8))
        f = random_field(rng, shape=(6, 6, 6))
        with pytest.raises(ValueError):
            warp_volume(v, f)

    def test_invalid_mode_raises(self, rng):
        v = random_volume(rng)
        f = random_field(rng)
        with pytest.raises(ValueError):
            warp_tensor(torch.as_tensor(v.data)[None, None],
                        torch.as_tensor(f.data)[None], mode="cubic")

    def test_differentiable_wrt_field(self, rng):
        # analytic gradient vs central differences, away from cell boundaries
        v = torch.tensor(random_volume(rng, shape=(6, 6, 6)).data)
        whole = rng.integers(-2, 2, size=(3, 6, 6, 6)).astype(float)
        base = whole + rng.uniform(0.25, 0.75, size=(3, 6, 6, 6))
        field = torch.tensor(base, requires_grad=True)
        weights = torch.tensor(rng.standard_normal((6, 6, 6)))

        out = (warp_tensor(v[None, None], field[None])[0, 0] * weights).sum()
        (grad,) = torch.autograd.grad(out, field)

        h = 1e-6
        idx = [(int(a), int(z), int(y), int(x))
               for a, z, y, x in rng.integers(0, [3, 6, 6, 6], size=(20, 4))]
        for pos in idx:
            fp = field.detach().clone()
            fm = field.detach().clone()
            fp[pos] += h
            fm[pos] -= h
            op = (warp_tensor(v[None, None], fp[None])[0, 0] * weights).sum()
            om = (warp_tensor(v[None, None], fm[None])[0, 0] * weights).sum()
            fd = float((op - om) / (2 * h))
            an = float(grad[pos])
            assert an == pytest.approx(fd, rel=1e-4, abs=1e-7)


class TestWarpLabels:
    def test_zero_field_identity(self, rng):
        lab = LabelMap(rng.integers(0, 4, size=(8, 8, 8)), num_classes=4)
        zero = DisplacementField(np.zeros((3, 8, 8, 8)))
        out = warp_labels(lab, zero)
        np.testing.assert_array_equal(out.data, lab.data)

    def test_single_voxel_moves(self):
        lab_data = np.zeros((5, 5, 5), dtype=np.int64)
        lab_data[3, 3, 3] = 1
        lab = LabelMap(lab_data, num_classes=2)
        field = np.zeros((3, 5, 5, 5))
        # the sample point of voxel (1,1,1) lands on the labeled voxel
        field[:, 1, 1, 1] = 2.0
        out = warp_labels(lab, DisplacementField(field))
        assert out.data[1, 1, 1] == 1
        assert out.data[3, 3, 3] == 1  # zero displacement there keeps the label

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_nearest_oracle(self, seed):
        rng = np.random.default_rng(seed + 100)
        lab = LabelMap(rng.integers(0, 5, size=(8, 8, 8)), num_classes=5)
        f = random_field(rng, magnitude=2.5)
        out = warp_labels(lab, f)
        expected = oracles.warp_nearest(lab.data, f.data)
        np.testing.assert_array_equal(out.data, expected)

    def test_class_subset_property(self, rng):
        lab = LabelMap(rng.integers(0, 3, size=(8, 8, 8)), num_classes=6)
        f = random_field(rng, magnitude=3.0)
        out = warp_labels(lab, f)
        assert set(np.unique(out.data)) <= set(np.unique(lab.data))
        assert out.num_classes == lab.num_classes


class TestNcc:
    def test_self_correlation(self, rng):
        v = random_volume(rng)
        assert ncc_score(v, v) == pytest.approx(1.0, abs=1e-12)

    def test_sign_flip(self, rng):
        v = random_volume(rng)
        neg = Volume(-v.data)
        assert ncc_score(v, neg) == pytest.approx(-1.0, abs=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_formula_oracle(self, seed):
        rng = np.random.default_rng(seed + 7)
        a = random_volume(rng)
        b = random_volume(rng)
        assert ncc_score(a, b) == pytest.approx(oracles.ncc(a.data, b.data), abs=1e-10)

    def test_affine_rescale_invariance(self, rng):
        a = random_volume(rng)
        b = random_volume(rng)
        scaled = Volume(3.7 * b.data + 0.4)
        assert ncc_score(a, scaled) == pytest.approx(ncc_score(a, b), abs=1e-10)

    def test_constant_volume_raises(self, rng):
        v = random_volume(rng)
        const = Volume(np.full(v.shape, 0.5))
        with pytest.raises(ValueError):
            ncc_score(const, const)
