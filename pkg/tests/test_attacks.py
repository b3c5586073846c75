"""
Tests for triggers, poisoning and ASR-set construction.
"""

import numpy as np
import pytest
from scipy import fft

from backdoorlab.attacks import (
    AttackError,
    EmptyEvaluationError,
    TriggerGeometryError,
    apply_trigger,
    blend_pattern,
    build_asr_testset,
    lowfreq_mask,
    lowfreq_pattern,
    patch_origin,
    poison_dataset,
)
from backdoorlab.data import Dataset
from backdoorlab.models import BlendedTrigger, LowFreqTrigger, PatchTrigger, PoisonSpec, WarpTrigger

from conftest import empty_like


class TestPatch:
    """Tests for the visible patch trigger."""

    @pytest.mark.parametrize("position,origin", [
        ("top-left", (0, 0)),
        ("top-right", (0, 5)),
        ("bottom-left", (5, 0)),
        ("bottom-right", (5, 5)),
        ((2, 4), (2, 4)),
    ])
    def test_origin(self, position, origin):
        assert patch_origin(PatchTrigger(size=3, position=position), 8, 8) == origin

    def test_only_patch_region_changes(self):
        image = np.full((1, 8, 8), 0.3, dtype=np.float32)
        out = apply_trigger(image, PatchTrigger(size=3, position="bottom-right", value=0.9))
        assert np.all(out[:, 5:, 5:] == np.float32(0.9))
        untouched = np.ones((8, 8), dtype=bool)
        untouched[5:, 5:] = False
        assert np.all(out[0][untouched] == np.float32(0.3))

    def test_input_not_modified(self):
        image = np.zeros((1, 8, 8), dtype=np.float32)
        apply_trigger(image, PatchTrigger())
        assert np.all(image == 0)

    def test_patch_too_large(self):
        with pytest.raises(TriggerGeometryError, match="does not fit"):
            apply_trigger(np.zeros((1, 4, 4)), PatchTrigger(size=5))

    def test_explicit_position_outside(self):
        with pytest.raises(TriggerGeometryError, match="leaves"):
            apply_trigger(np.zeros((1, 8, 8)), PatchTrigger(size=3, position=(6, 0)))

    def test_batch_input(self):
        out = apply_trigger(np.zeros((4, 1, 8, 8)), PatchTrigger())
        assert out.shape == (4, 1, 8, 8)
        assert out.dtype == np.float32


class TestBlended:
    """Tests for the blended trigger."""

    def test_convex_combination(self):
        image = np.full((1, 8, 8), 0.5, dtype=np.float32)
        trigger = BlendedTrigger(pattern_seed=3, alpha=0.25)
        expected = 0.75 * 0.5 + 0.25 * blend_pattern(3, (1, 8, 8)).astype(np.float64)
        np.testing.assert_allclose(apply_trigger(image, trigger), expected, atol=1e-6)

    def test_pattern_seeded(self):
        np.testing.assert_array_equal(blend_pattern(1, (1, 4, 4)), blend_pattern(1, (1, 4, 4)))
        assert not np.array_equal(blend_pattern(1, (1, 4, 4)), blend_pattern(2, (1, 4, 4)))


class TestLowFreq:
    """Tests for the low-frequency trigger."""

    def test_mask_excludes_dc(self):
        mask = lowfreq_mask(2, 4, 4)
        assert not mask[0, 0]
        assert mask[0, 1] and mask[1, 0] and mask[1, 1] and mask[0, 2]
        assert int(mask.sum()) == 5

    @pytest.mark.parametrize("bands", [1, 2, 4])
    def test_energy_only_in_low_bands(self, bands):
        delta = lowfreq_pattern(bands, 0.2, 0, (1, 8, 8))
        coeffs = fft.dctn(delta, type=2, norm="ortho", axes=(1, 2))
        outside = ~lowfreq_mask(bands, 8, 8)
        assert np.abs(coeffs[:, outside]).max() < 1e-10

    def test_peak_equals_amplitude(self):
        delta = lowfreq_pattern(3, 0.15, 1, (2, 8, 8))
        assert np.abs(delta).max() == pytest.approx(0.15)

    def test_additive_without_clipping(self):
        image = np.full((1, 8, 8), 0.5, dtype=np.float32)
        out = apply_trigger(image, LowFreqTrigger(bands=3, amplitude=0.2, seed=4))
        np.testing.assert_allclose(out - 0.5, lowfreq_pattern(3, 0.2, 4, (1, 8, 8)), atol=1e-6)


class TestWarp:
    """Tests for the warping trigger."""

    def test_zero_strength_is_identity(self, synthetic):
        image = synthetic.images[0]
        np.testing.assert_allclose(apply_trigger(image, WarpTrigger(strength=0.0)), image, atol=1e-6)

    def test_changes_image_and_stays_in_range(self, synthetic):
        image = synthetic.images[0]
        out = apply_trigger(image, WarpTrigger(grid_size=4, strength=1.0, seed=2))
        assert not np.allclose(out, image)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_seeded(self, synthetic):
        trigger = WarpTrigger(strength=1.0, seed=5)
        np.testing.assert_array_equal(apply_trigger(synthetic.images[:3], trigger),
                                      apply_trigger(synthetic.images[:3], trigger))


class TestPoisonDataset:
    """Tests for dirty-label poisoning."""

    @pytest.mark.parametrize("ratio", [0.0, 0.05, 0.1, 0.33, 1.0])
    def test_exact_count(self, synthetic, ratio):
        _, chosen = poison_dataset(synthetic, PoisonSpec(poison_ratio=ratio))
        assert chosen.size == int(np.floor(ratio * len(synthetic)))

    def test_poisoned_samples_relabelled_and_triggered(self, synthetic):
        spec = PoisonSpec(trigger=PatchTrigger(size=2), target_label=2, poison_ratio=0.2, seed=1)
        poisoned, chosen = poison_dataset(synthetic, spec)
        assert np.all(poisoned.labels[chosen] == 2)
        np.testing.assert_array_equal(poisoned.images[chosen], apply_trigger(synthetic.images[chosen], spec.trigger))

    def test_other_samples_bit_identical(self, synthetic):
        poisoned, chosen = poison_dataset(synthetic, PoisonSpec(poison_ratio=0.25))
        rest = np.setdiff1d(np.arange(len(synthetic)), chosen)
        np.testing.assert_array_equal(poisoned.images[rest], synthetic.images[rest])
        np.testing.assert_array_equal(poisoned.labels[rest], synthetic.labels[rest])

    def test_original_labels_kept(self, synthetic):
        poisoned, _ = poison_dataset(synthetic, PoisonSpec(target_label=1, poison_ratio=0.5))
        np.testing.assert_array_equal(poisoned.original_labels, synthetic.labels)
        assert poisoned.provenance["poison"]["trigger"] == "patch"

    def test_seeded_selection(self, synthetic):
        _, a = poison_dataset(synthetic, PoisonSpec(seed=3))
        _, b = poison_dataset(synthetic, PoisonSpec(seed=3))
        _, c = poison_dataset(synthetic, PoisonSpec(seed=4))
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_input_untouched(self, synthetic):
        before = synthetic.labels.copy()
        poison_dataset(synthetic, PoisonSpec(poison_ratio=1.0, target_label=3))
        np.testing.assert_array_equal(synthetic.labels, before)

    def test_target_outside_classes(self, synthetic):
        with pytest.raises(AttackError):
            poison_dataset(synthetic, PoisonSpec(target_label=9))


class TestAsrTestset:
    """Tests for ASR-set construction."""

    def test_target_class_excluded(self, synthetic):
        asr = build_asr_testset(synthetic, PatchTrigger(), target_label=1)
        assert len(asr) == int(np.sum(synthetic.labels != 1))
        assert np.all(asr.original_labels != 1)
        assert np.all(asr.labels == 1)

    def test_images_triggered(self, synthetic):
        trigger = PatchTrigger(size=2, value=1.0)
        asr = build_asr_testset(synthetic, trigger, target_label=0)
        assert np.all(asr.images[:, :, 6:, 6:] == 1.0)

    def test_only_target_class_is_empty(self, synthetic):
        only_target = synthetic.take(np.flatnonzero(synthetic.labels == 0))
        with pytest.raises(EmptyEvaluationError):
            build_asr_testset(only_target, PatchTrigger(), target_label=0)

    def test_empty_test_set(self, synthetic):
        with pytest.raises(EmptyEvaluationError):
            build_asr_testset(empty_like(synthetic), PatchTrigger(), target_label=0)

    def test_uses_true_labels_of_poisoned_sets(self, synthetic):
        poisoned, _ = poison_dataset(synthetic, PoisonSpec(target_label=0, poison_ratio=0.5))
        asr = build_asr_testset(poisoned, PatchTrigger(), target_label=0)
        assert len(asr) == int(np.sum(synthetic.labels != 0))

    def test_result_is_dataset(self, synthetic):
        assert isinstance(build_asr_testset(synthetic, PatchTrigger(), 0), Dataset)
