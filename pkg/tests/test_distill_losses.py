import math

import numpy as np
import pytest
import torch

import oracles
from conftest import random_volume
from distilseg.losses import (
    distillation_loss,
    hint_loss,
    reconstruction_loss,
    segmentation_loss,
)
from distilseg.volume import Volume
from gradcheck import fd_gradient_check


def random_stack(rng, shapes=((4, 6, 6, 6), (8, 3, 3, 3))):
    return [torch.tensor(rng.standard_normal(s)) for s in shapes]


class TestHintLoss:
    def test_identical_stacks_zero(self, rng):
        feats = random_stack(rng)
        assert float(hint_loss(feats, feats, 2)) == pytest.approx(0.0, abs=1e-12)

    def test_opposite_stacks_reach_four(self, rng):
        feats = random_stack(rng)
        flipped = [-f for f in feats]
        assert float(hint_loss(feats, flipped, 2)) == pytest.approx(4.0, abs=1e-10)

    @pytest.mark.parametrize("metric", ["cosine", "l2"])
    @pytest.mark.parametrize("seed", range(3))
    def test_random_matches_oracle(self, metric, seed):
        rng = np.random.default_rng(seed + 60)
        a = random_stack(rng)
        b = random_stack(rng)
        expected = oracles.hint([x.numpy() for x in a], [x.numpy() for x in b],
                                2, metric)
        assert float(hint_loss(a, b, 2, metric)) == pytest.approx(expected, abs=1e-8)

    def test_cosine_scale_invariant_l2_not(self, rng):
        a = random_stack(rng)
        b = random_stack(rng)
        scaled = [3.0 * x for x in b]
        cos_base = float(hint_loss(a, b, 2, "cosine"))
        cos_scaled = float(hint_loss(a, scaled, 2, "cosine"))
        assert cos_scaled == pytest.approx(cos_base, abs=1e-10)
        l2_base = float(hint_loss(a, b, 2, "l2"))
        l2_scaled = float(hint_loss(a, scaled, 2, "l2"))
        assert abs(l2_scaled - l2_base) > 1e-3

    def test_too_few_layers_raises(self, rng):
        feats = random_stack(rng)
        with pytest.raises(ValueError):
            hint_loss(feats, feats, 3)

    def test_layer_shape_mismatch_raises(self, rng):
        a = random_stack(rng)
        b = random_stack(rng, shapes=((4, 6, 6, 6), (8, 4, 3, 3)))
        with pytest.raises(ValueError):
            hint_loss(a, b, 2)

    def test_zero_norm_raises_in_cosine(self, rng):
        a = random_stack(rng)
        b = [torch.zeros_like(a[0]), a[1].clone()]
        with pytest.raises(ValueError):
            hint_loss(a, b, 2, "cosine")

    @pytest.mark.parametrize("metric", ["cosine", "l2"])
    def test_gradient(self, metric, rng):
        teacher = random_stack(rng)

        def fn(flat):
            s0 = flat[: teacher[0].numel()].reshape(teacher[0].shape)
            s1 = flat[teacher[0].numel():].reshape(teacher[1].shape)
            return hint_loss([s0, s1], teacher, 2, metric)

        x0 = torch.cat([t.reshape(-1) for t in random_stack(rng)])
        fd_gradient_check(fn, x0, rng)


class TestReconstructionLoss:
    def test_identity_zero(self, rng):
        v = random_volume(rng)
        assert float(reconstruction_loss(v, v)) == 0.0

    def test_constant_offset_is_one(self, rng):
        v = random_volume(rng)
        shifted = Volume(v.data + 1.0)
        assert float(reconstruction_loss(v, shifted)) == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_random_matches_loop_oracle(self, seed):
        rng = np.random.default_rng(seed + 80)
        a = random_volume(rng, shape=(5, 5, 5))
        b = random_volume(rng, shape=(5, 5, 5))
        expected = float(np.mean([(x - y) ** 2 for x, y
                                  in zip(a.data.ravel(), b.data.ravel())]))
        assert float(reconstruction_loss(a, b)) == pytest.approx(expected, abs=1e-10)

    def test_shape_mismatch_raises(self, rng):
        with pytest.raises(ValueError):
            reconstruction_loss(random_volume(rng, shape=(5, 5, 5)),
                                random_volume(rng, shape=(6, 6, 6)))

    def test_gradient(self, rng):
        real = torch.tensor(random_volume(rng, shape=(5, 5, 5)).data)
        r0 = torch.tensor(random_volume(rng, shape=(5, 5, 5)).data)
        fd_gradient_check(lambda r: reconstruction_loss(real, r), r0, rng)


class TestSegmentationLoss:
    def test_peaked_logits_near_zero(self, rng):
        labels = rng.integers(0, 3, size=(6, 6, 6))
        logits = np.full((3, 6, 6, 6), -50.0)
        for c in range(3):
            logits[c][labels == c] = 50.0
        assert float(segmentation_loss(logits, labels)) == pytest.approx(0.0, abs=1e-3)

    def test_uniform_logits_give_log_c(self, rng):
        for c in (2, 4, 7):
            labels = rng.integers(0, c, size=(5, 5, 5))
            logits = np.zeros((c, 5, 5, 5))
            assert float(segmentation_loss(logits, labels)) == pytest.approx(
                math.log(c), abs=1e-6)

    @pytest.mark.parametrize("seed", range(3))
    def test_random_matches_onehot_oracle(self, seed):
        rng = np.random.default_rng(seed + 90)
        labels = rng.integers(0, 4, size=(5, 5, 5))
        logits = rng.standard_normal((4, 5, 5, 5))
        assert float(segmentation_loss(logits, labels)) == pytest.approx(
            oracles.cross_entropy(logits, labels), abs=1e-8)

    def test_label_out_of_range_raises(self, rng):
        logits = rng.standard_normal((3, 4, 4, 4))
        labels = np.full((4, 4, 4), 3)
        with pytest.raises(ValueError):
            segmentation_loss(logits, labels)

    def test_gradient(self, rng):
        labels = torch.tensor(rng.integers(0, 3, size=(4, 4, 4)))
        l0 = torch.tensor(rng.standard_normal((3, 4, 4, 4)))
        fd_gradient_check(lambda l: segmentation_loss(l, labels), l0, rng)


class TestDistillationLoss:
    def _inputs(self, rng):
        labels = rng.integers(0, 3, size=(6, 6, 6))
        logits = rng.standard_normal((3, 6, 6, 6))
        real = random_volume(rng, shape=(6, 6, 6))
        recon = random_volume(rng, shape=(6, 6, 6))
        sfeats = random_stack(rng)
        tfeats = random_stack(rng)
        return logits, labels, real, recon, sfeats, tfeats

    def test_zero_weights_equal_segmentation(self, rng):
        logits, labels, *_ = self._inputs(rng)
        total, parts = distillation_loss(logits, labels, lambda_recon=0.0,
                                         lambda_hint=0.0)
        assert float(total) == pytest.approx(
            float(segmentation_loss(logits, labels)), abs=1e-12)
        assert parts["reconstruction"] == 0.0 and parts["hint"] == 0.0

    def test_unit_weights_compose(self, rng):
        logits, labels, real, recon, sfeats, tfeats = self._inputs(rng)
        total, parts = distillation_loss(
            logits, labels, real, recon, sfeats, tfeats,
            lambda_recon=1.0, lambda_hint=1.0, hint_layers=2)
        expected = (float(segmentation_loss(logits, labels))
                    + float(reconstruction_loss(real, recon))
                    + float(hint_loss(sfeats, tfeats, 2)))
        assert float(total) == pytest.approx(expected, abs=1e-8)

    def test_hint_weight_ten_scales_term(self, rng):
        logits, labels, real, recon, sfeats, tfeats = self._inputs(rng)
        total, parts = distillation_loss(
            logits, labels, real, recon, sfeats, tfeats,
            lambda_recon=1.0, lambda_hint=10.0, hint_layers=2)
        assert float(total) == pytest.approx(
            parts["segmentation"] + parts["reconstruction"] + 10.0 * parts["hint"],
            abs=1e-8)

    def test_missing_teacher_inputs_raise(self, rng):
        logits, labels, *_ = self._inputs(rng)
        with pytest.raises(ValueError):
            distillation_loss(logits, labels, lambda_recon=1.0, lambda_hint=0.0)
        with pytest.raises(ValueError):
            distillation_loss(logits, labels, lambda_recon=0.0, lambda_hint=1.0)
