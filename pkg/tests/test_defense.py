"""
Tests for the training loop and the defenses built on it.
"""

import numpy as np
import pytest

from backdoorlab.attacks import build_asr_testset
from backdoorlab.data import gen_synthetic
from backdoorlab.defense import (
    DefenseError,
    DivergenceError,
    OverPruneError,
    TrainingError,
    apply_defense,
    channel_activations,
    defense_schedule,
    fine_prune,
    fine_tune,
    prune_channels,
    prunable_layers,
    select_prune_fraction,
    super_fine_tune,
    train,
    train_backdoored,
)
from backdoorlab.evaluation import EvalHooks, clean_accuracy
from backdoorlab.models import (
    ConstantSchedule,
    ConventionalFTDefense,
    FinePruneDefense,
    NoDefense,
    PatchTrigger,
    PoisonSpec,
    SuperFTDefense,
    SuperFTSchedule,
    TrainablePolicy,
    TrainConfig,
)
from backdoorlab.nn_core import NumericalOverflowError, layer_outputs


LR_BASE, LR_MAX1, LR_MAX2 = 0.0003, 0.05, 0.001


def _cfg(**overrides) -> TrainConfig:
    values = {"epochs": 3, "batch_size": 16, "schedule": ConstantSchedule(lr=0.05), "momentum": 0.9, "seed": 0}
    values.update(overrides)
    return TrainConfig(**values)


@pytest.fixture
def sft() -> SuperFTSchedule:
    return SuperFTSchedule(lr_base=LR_BASE, lr_max1=LR_MAX1, lr_max2=LR_MAX2, cycle_len_steps=4, phase1_epochs=1)


class TestTrain:
    """Tests for the shared optimiser loop."""

    def test_input_model_untouched(self, tiny_model, synthetic):
        before = [p.copy() for p in tiny_model.params]
        trained, _ = train(tiny_model, synthetic, _cfg())
        for a, b in zip(before, tiny_model.params):
            np.testing.assert_array_equal(a, b)
        assert trained is not tiny_model

    def test_step_accounting(self, tiny_model, synthetic):
        _, log = train(tiny_model, synthetic, _cfg())
        # 120 samples in batches of 16
        assert [r.steps for r in log.epochs] == [8, 16, 24]
        assert [r.epoch for r in log.epochs] == [1, 2, 3]

    def test_seconds_non_decreasing(self, tiny_model, synthetic):
        _, log = train(tiny_model, synthetic, _cfg())
        seconds = [r.seconds for r in log.epochs]
        assert seconds == sorted(seconds)

    def test_loss_decreases(self, tiny_model, synthetic):
        _, log = train(tiny_model, synthetic, _cfg(epochs=5))
        assert log.epochs[-1].loss < log.epochs[0].loss

    def test_deterministic(self, tiny_model, synthetic):
        a, log_a = train(tiny_model, synthetic, _cfg())
        b, log_b = train(tiny_model, synthetic, _cfg())
        for pa, pb in zip(a.params, b.params):
            np.testing.assert_array_equal(pa, pb)
        assert [r.loss for r in log_a.epochs] == [r.loss for r in log_b.epochs]

    def test_seed_changes_order(self, tiny_model, synthetic):
        a, _ = train(tiny_model, synthetic, _cfg(epochs=1, seed=0))
        b, _ = train(tiny_model, synthetic, _cfg(epochs=1, seed=1))
        assert not np.array_equal(a.params[0], b.params[0])

    def test_baseline_and_per_epoch_scores(self, tiny_model, synthetic):
        hooks = EvalHooks(ca_set=synthetic, asr_set=build_asr_testset(synthetic, PatchTrigger(), 0))
        _, log = train(tiny_model, synthetic, _cfg(), hooks)
        assert log.baseline.ca == pytest.approx(clean_accuracy(tiny_model, synthetic))
        assert all(r.ca is not None and r.asr is not None for r in log.epochs)

    def test_scores_only_last_epoch(self, tiny_model, synthetic):
        hooks = EvalHooks(ca_set=synthetic, per_epoch=False)
        _, log = train(tiny_model, synthetic, _cfg(), hooks)
        assert [r.ca is None for r in log.epochs] == [True, True, False]

    def test_head_only_keeps_body(self, tiny_model, synthetic):
        trained, _ = train(tiny_model, synthetic, _cfg(trainable_policy=TrainablePolicy.HEAD_ONLY))
        w, b = trained.head_indices
        for i, (before, after) in enumerate(zip(tiny_model.params, trained.params)):
            if i in (w, b):
                assert not np.array_equal(before, after)
            else:
                np.testing.assert_array_equal(before, after)

    def test_max_lr_recorded(self, tiny_model, synthetic):
        _, log = train(tiny_model, synthetic, _cfg(epochs=1))
        assert log.max_lr == pytest.approx(0.05)

    def test_class_count_mismatch(self, tiny_model):
        with pytest.raises(TrainingError, match="replace_head"):
            train(tiny_model, gen_synthetic(3, 5, 8, seed=0), _cfg())

    def test_image_shape_mismatch(self, tiny_model):
        with pytest.raises(TrainingError, match="expects"):
            train(tiny_model, gen_synthetic(4, 5, 10, seed=0), _cfg())

    def test_empty_dataset(self, tiny_model):
        with pytest.raises(TrainingError, match="empty"):
            train(tiny_model, gen_synthetic(4, 0, 8, seed=0), _cfg())

    def test_divergence_reported_with_position(self, tiny_model, synthetic, mocker):
        mocker.patch(
            "backdoorlab.defense.backward",
            side_effect=NumericalOverflowError("loss is not finite"),
        )
        with pytest.raises(DivergenceError) as exc:
            train(tiny_model, synthetic, _cfg())
        assert (exc.value.epoch, exc.value.step) == (1, 0)
        assert "Lower the learning rate" in str(exc.value)


class TestBackdoorAndFineTune:
    def test_train_backdoored_initialises_from_arch(self, tiny_arch, synthetic):
        model, log = train_backdoored(synthetic, PoisonSpec(poison_ratio=0.2), _cfg(epochs=1), arch=tiny_arch)
        assert model.arch == tiny_arch
        assert len(log.epochs) == 1

    def test_train_backdoored_from_given_model(self, tiny_model, synthetic):
        model, _ = train_backdoored(synthetic, PoisonSpec(), _cfg(epochs=1), model=tiny_model)
        assert model.arch == tiny_model.arch

    def test_fine_tune_returns_copy(self, tiny_model, synthetic):
        tuned, _ = fine_tune(tiny_model, synthetic, _cfg(epochs=1))
        assert not np.array_equal(tuned.params[0], tiny_model.params[0])


class TestSuperFineTune:
    """Tests for whole-model fine-tuning under the two-phase schedule."""

    def test_peaks_per_phase(self, tiny_model, synthetic, sft):
        _, log = super_fine_tune(tiny_model, synthetic, sft, epochs=2, seed=0, batch_size=16)
        # 8 steps per epoch, cycles of 4: each phase reaches its own peak
        assert log.epochs[0].max_lr == pytest.approx(LR_MAX1)
        assert log.epochs[1].max_lr == pytest.approx(LR_MAX2)
        assert log.max_lr == pytest.approx(LR_MAX1)

    def test_trains_whole_model(self, tiny_model, synthetic, sft):
        frozen = tiny_model.copy()
        frozen.set_policy(head_only=True)
        tuned, _ = super_fine_tune(frozen, synthetic, sft, epochs=1, seed=0, batch_size=16)
        assert not np.array_equal(tuned.params[0], tiny_model.params[0])
        assert all(tuned.trainable)

    def test_constant_schedule_rejected(self, tiny_model, synthetic):
        with pytest.raises(DefenseError, match="superft"):
            super_fine_tune(tiny_model, synthetic, ConstantSchedule(lr=0.01), epochs=1, seed=0)

    def test_phase2_lr_above_its_peak_rejected(self, tiny_model, synthetic, sft, mocker):
        # every step at lr_max1: inside the overall range, but phase 2 must stay under lr_max2
        mocker.patch("backdoorlab.defense.lr_at", side_effect=lambda spec, step, spe: spec.lr_max1)
        with pytest.raises(DefenseError, match="phase 2"):
            super_fine_tune(tiny_model, synthetic, sft, epochs=2, seed=0, batch_size=16)

    def test_phase1_only_run_passes_bounds(self, tiny_model, synthetic, sft, mocker):
        mocker.patch("backdoorlab.defense.lr_at", side_effect=lambda spec, step, spe: spec.lr_max1)
        _, log = super_fine_tune(tiny_model, synthetic, sft, epochs=1, seed=0, batch_size=16)
        assert log.max_lr == LR_MAX1


class TestPruning:
    """Tests for channel pruning and fine-pruning."""

    def test_prunable_layers(self, tiny_model):
        assert prunable_layers(tiny_model) == [0]
        assert prunable_layers(tiny_model, "all") == [0]

    def test_activations_per_channel(self, tiny_model, synthetic):
        means = channel_activations(tiny_model, synthetic, 0)
        assert means.shape == (4,)
        assert np.all(means >= 0.0)

    def test_prunes_least_active_channels(self, tiny_model, synthetic):
        pruned, removed = prune_channels(tiny_model, synthetic, 0.5)
        assert len(removed[0]) == 2
        means = channel_activations(tiny_model, synthetic, 0)
        kept = [c for c in range(4) if c not in removed[0]]
        assert means[removed[0]].max() <= means[kept].min()
        assert pruned.channel_masks[0].sum() == 2

    def test_pruned_channels_output_zero(self, tiny_model, synthetic):
        pruned, removed = prune_channels(tiny_model, synthetic, 0.25)
        out = layer_outputs(pruned, synthetic.images[:5], [0])[0]
        assert np.all(out[:, removed[0]] == 0.0)

    def test_channel_count_rounds_up(self, tiny_model, synthetic):
        _, removed = prune_channels(tiny_model, synthetic, 0.3)
        assert len(removed[0]) == 2

    def test_zero_fraction_is_noop(self, tiny_model, synthetic):
        pruned, removed = prune_channels(tiny_model, synthetic, 0.0)
        assert removed == {}
        np.testing.assert_array_equal(pruned.params[0], tiny_model.params[0])

    def test_removing_every_channel(self, tiny_model, synthetic):
        with pytest.raises(OverPruneError):
            prune_channels(tiny_model, synthetic, 0.9)

    @pytest.mark.parametrize("fraction", [1.0, -0.1])
    def test_fraction_out_of_range(self, tiny_model, synthetic, fraction):
        with pytest.raises(DefenseError):
            prune_channels(tiny_model, synthetic, fraction)

    def test_input_model_keeps_channels(self, tiny_model, synthetic):
        prune_channels(tiny_model, synthetic, 0.5)
        assert tiny_model.channel_masks == {}

    def test_pruned_weights_stay_zero_after_fine_tuning(self, tiny_model, synthetic):
        pruned, removed = prune_channels(tiny_model, synthetic, 0.5)
        tuned, _ = fine_prune(tiny_model, synthetic, 0.5, _cfg(epochs=2))
        np.testing.assert_array_equal(tuned.channel_masks[0], pruned.channel_masks[0])
        assert np.all(tuned.params[0][removed[0]] == 0.0)
        assert np.all(tuned.params[1][removed[0]] == 0.0)

    def test_selected_fraction_on_grid(self, tiny_model, synthetic):
        fraction = select_prune_fraction(tiny_model, synthetic)
        assert round(fraction, 2) in {0.05, 0.1, 0.15, 0.2, 0.25, 0.3}


class TestApplyDefense:
    """Tests for defense dispatch."""

    def test_no_defense_is_copy(self, tiny_model, synthetic):
        hooks = EvalHooks(ca_set=synthetic)
        model, log = apply_defense(tiny_model, NoDefense(), synthetic, _cfg(), seed=0, hooks=hooks)
        assert model is not tiny_model
        np.testing.assert_array_equal(model.params[0], tiny_model.params[0])
        assert log.epochs == []
        assert log.baseline.ca is not None

    def test_conventional_on_subsample(self, tiny_model, synthetic):
        defense = ConventionalFTDefense(epochs=2, subsample_fraction=0.5)
        _, log = apply_defense(tiny_model, defense, synthetic, _cfg(), seed=0)
        # 60 samples in batches of 16
        assert log.epochs[-1].steps == 8

    def test_conventional_reuses_attack_lr(self, tiny_model, synthetic):
        _, log = apply_defense(tiny_model, ConventionalFTDefense(epochs=1), synthetic, _cfg(), seed=0)
        assert log.max_lr == pytest.approx(0.05)

    def test_policy_override(self, tiny_model, synthetic):
        model, _ = apply_defense(
            tiny_model, ConventionalFTDefense(epochs=1), synthetic, _cfg(), seed=0,
            policy_override=TrainablePolicy.HEAD_ONLY,
        )
        np.testing.assert_array_equal(model.params[0], tiny_model.params[0])

    def test_super_ft(self, tiny_model, synthetic, sft):
        _, log = apply_defense(tiny_model, SuperFTDefense(epochs=2, schedule=sft), synthetic, _cfg(), seed=0)
        assert log.max_lr == pytest.approx(LR_MAX1)

    def test_fine_prune_fixed_fraction(self, tiny_model, synthetic):
        defense = FinePruneDefense(prune_fraction=0.5, epochs=1)
        model, log = apply_defense(tiny_model, defense, synthetic, _cfg(), seed=0)
        assert model.channel_masks[0].sum() == 2
        assert len(log.epochs) == 1

    def test_fine_prune_searched_fraction(self, tiny_model, synthetic):
        model, _ = apply_defense(tiny_model, FinePruneDefense(epochs=1), synthetic, _cfg(), seed=0)
        assert 1 <= 4 - model.channel_masks[0].sum() <= 2


class TestDefenseSchedule:
    def test_none_does_not_train(self):
        assert defense_schedule(NoDefense(), _cfg()) is None

    def test_conventional_defaults_to_attack_lr(self):
        assert defense_schedule(ConventionalFTDefense(), _cfg()) == ConstantSchedule(lr=0.05)

    def test_explicit_lr(self):
        assert defense_schedule(FinePruneDefense(lr=0.02), _cfg()) == ConstantSchedule(lr=0.02)

    def test_super_ft_schedule_passes_through(self, sft):
        assert defense_schedule(SuperFTDefense(schedule=sft), _cfg()) is sft

