"""
Tests for the numpy network engine.
"""

import numpy as np
import pytest
from pydantic import ValidationError

from backdoorlab.models import ArchSpec, LayerKind, conv, dense, flatten, maxpool, reference_arch, relu
from backdoorlab.nn_core import (
    Batch,
    EngineError,
    InputShapeError,
    Model,
    NumericalOverflowError,
    UnsupportedArchError,
    argmax_predictions,
    backward,
    check_random_nets,
    finite_diff_check,
    forward,
    glorot_limit,
    init_model,
    layer_outputs,
    predict,
    predict_proba,
    random_small_arch,
    replace_head,
    sgd_step,
    softmax,
    softmax_cross_entropy,
)


def _batch(model: Model, n: int = 6, seed: int = 0) -> Batch:
    rng = np.random.default_rng(seed)
    return Batch(
        rng.random((n, *model.arch.input_shape)).astype(np.float32),
        rng.integers(0, model.arch.num_classes, size=n),
    )


def _loop_forward(model: Model, images: np.ndarray) -> np.ndarray:
    """Element-by-element reference forward pass."""
    x = images.astype(np.float64)
    params = iter(model.params)
    for layer in model.arch.layers:
        if layer.kind == LayerKind.CONV:
            w, b = next(params).astype(np.float64), next(params).astype(np.float64)
            n, _, h, wd = x.shape
            k, s = layer.kernel, layer.stride
            oh, ow = (h - k) // s + 1, (wd - k) // s + 1
            out = np.zeros((n, w.shape[0], oh, ow))
            for i in range(n):
                for o in range(w.shape[0]):
                    for r in range(oh):
                        for q in range(ow):
                            out[i, o, r, q] = np.sum(x[i, :, r * s:r * s + k, q * s:q * s + k] * w[o]) + b[o]
            x = out
        elif layer.kind == LayerKind.RELU:
            x = np.maximum(x, 0.0)
        elif layer.kind == LayerKind.MAXPOOL:
            p = layer.pool
            n, c, h, wd = x.shape
            out = np.zeros((n, c, h // p, wd // p))
            for r in range(h // p):
                for q in range(wd // p):
                    out[:, :, r, q] = x[:, :, r * p:(r + 1) * p, q * p:(q + 1) * p].max(axis=(2, 3))
            x = out
        elif layer.kind == LayerKind.FLATTEN:
            x = x.reshape(x.shape[0], -1)
        elif layer.kind == LayerKind.DENSE:
            w, b = next(params).astype(np.float64), next(params).astype(np.float64)
            out = np.zeros((x.shape[0], w.shape[0]))
            for i in range(x.shape[0]):
                for j in range(w.shape[0]):
                    out[i, j] = np.sum(x[i] * w[j]) + b[j]
            x = out
    return x


class TestArchSpec:
    """Tests for architecture validation."""

    def test_output_shapes_chain(self, tiny_arch):
        assert tiny_arch.output_shapes() == [(4, 6, 6), (4, 6, 6), (4, 3, 3), (36,), (8,), (8,), (4,)]

    def test_param_shapes(self, tiny_arch):
        assert tiny_arch.param_shapes() == [(4, 1, 3, 3), (4,), (8, 36), (8,), (4, 8), (4,)]

    def test_missing_flatten_rejected(self):
        with pytest.raises(ValidationError, match="flatten"):
            ArchSpec(layers=[conv(2, 3), dense(3)], input_shape=(1, 6, 6), num_classes=3)

    def test_kernel_larger_than_input_rejected(self):
        with pytest.raises(ValidationError, match="does not fit"):
            ArchSpec(layers=[conv(2, 7), flatten(), dense(3)], input_shape=(1, 6, 6), num_classes=3)

    def test_head_must_match_class_count(self):
        with pytest.raises(ValidationError, match="last layer"):
            ArchSpec(layers=[flatten(), dense(5)], input_shape=(1, 4, 4), num_classes=3)

    def test_conv_layer_needs_kernel(self):
        with pytest.raises(ValidationError):
            ArchSpec(layers=[{"kind": "conv", "out_channels": 2}, flatten(), dense(2)],
                     input_shape=(1, 4, 4), num_classes=2)

    @pytest.mark.parametrize("size, covered", [(16, 14), (18, 18), (14, 14), (12, 10)])
    def test_reference_body_covered_extent(self, size, covered):
        assert reference_arch((1, size, size), 4).covered_extent() == (covered, covered)

    def test_covered_extent_full_for_tiny_and_dense_nets(self, tiny_arch):
        assert tiny_arch.covered_extent() == (8, 8)
        dense_only = ArchSpec(layers=[flatten(), dense(3)], input_shape=(1, 5, 7), num_classes=3)
        assert dense_only.covered_extent() == (5, 7)

    def test_pixels_past_covered_extent_never_reach_logits(self):
        model = init_model(reference_arch((1, 16, 16), 4), seed=0)
        rng = np.random.default_rng(0)
        images = rng.random((3, 1, 16, 16)).astype(np.float32)
        cropped = images.copy()
        cropped[:, :, 14:, :] = rng.random((3, 1, 2, 16))
        cropped[:, :, :, 14:] = rng.random((3, 1, 16, 2))
        np.testing.assert_array_equal(forward(model, images), forward(model, cropped))
        seen = images.copy()
        seen[:, :, 8:14, 8:14] = 1.0 - seen[:, :, 8:14, 8:14]
        assert not np.allclose(forward(model, images), forward(model, seen))


class TestInit:
    """Tests for seeded initialisation."""

    def test_same_seed_same_weights(self, tiny_arch):
        a, b = init_model(tiny_arch, 3), init_model(tiny_arch, 3)
        for pa, pb in zip(a.params, b.params):
            np.testing.assert_array_equal(pa, pb)

    def test_different_seed_different_weights(self, tiny_arch):
        a, b = init_model(tiny_arch, 3), init_model(tiny_arch, 4)
        assert not np.array_equal(a.params[0], b.params[0])

    def test_biases_zero_weights_within_glorot_bound(self, tiny_model):
        for p in tiny_model.params:
            if p.ndim == 1:
                assert np.all(p == 0)
            else:
                assert np.abs(p).max() <= glorot_limit(p.shape)

    def test_everything_trainable_and_momentum_zero(self, tiny_model):
        assert all(tiny_model.trainable)
        assert all(np.all(v == 0) for v in tiny_model.momentum)

    def test_inconsistent_tensors_rejected(self, tiny_model):
        with pytest.raises(EngineError):
            Model(arch=tiny_model.arch, params=tiny_model.params[:-1],
                  momentum=tiny_model.momentum[:-1], trainable=tiny_model.trainable[:-1])


class TestForward:
    """Tests for forward, softmax and prediction."""

    def test_logits_shape(self, tiny_model):
        assert forward(tiny_model, _batch(tiny_model)).shape == (6, 4)

    def test_wrong_input_shape(self, tiny_model):
        with pytest.raises(InputShapeError):
            forward(tiny_model, np.zeros((2, 1, 9, 9), dtype=np.float32))

    def test_softmax_rows_sum_to_one(self):
        probs = softmax(np.array([[1.0, 2.0, 3.0], [1000.0, 0.0, -1000.0]]))
        np.testing.assert_allclose(probs.sum(axis=1), 1.0)
        assert np.all(np.isfinite(probs))

    def test_uniform_logits_loss_is_log_k(self):
        loss, dlogits = softmax_cross_entropy(np.zeros((3, 5)), np.array([0, 1, 4]))
        assert loss == pytest.approx(np.log(5))
        np.testing.assert_allclose(dlogits.sum(axis=1), 0.0, atol=1e-12)

    def test_argmax_ties_resolve_to_lowest_index(self):
        np.testing.assert_array_equal(argmax_predictions(np.array([[1.0, 1.0, 0.0], [0.0, 2.0, 2.0]])), [0, 1])

    def test_predict_matches_proba_argmax(self, tiny_model):
        images = _batch(tiny_model, n=10).images
        np.testing.assert_array_equal(
            predict(tiny_model, images, batch_size=3),
            predict_proba(tiny_model, images, batch_size=4).argmax(axis=1),
        )

    def test_predict_proba_empty(self, tiny_model):
        out = predict_proba(tiny_model, np.zeros((0, 1, 8, 8), dtype=np.float32))
        assert out.shape == (0, 4)

    def test_layer_outputs(self, tiny_model):
        outs = layer_outputs(tiny_model, _batch(tiny_model).images, [0, 1])
        assert outs[0].shape == (6, 4, 6, 6)
        assert np.all(outs[1] >= 0)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_loop_reference(self, seed):
        rng = np.random.default_rng(seed)
        arch = ArchSpec(
            layers=[
                conv(int(rng.integers(1, 4)), int(rng.integers(2, 4)), stride=int(rng.integers(1, 3))),
                relu(), maxpool(2), flatten(), dense(int(rng.integers(3, 6))), relu(), dense(3),
            ],
            input_shape=(1, 8, 8),
            num_classes=3,
        )
        model = init_model(arch, seed, dtype=np.float64)
        images = rng.random((4, 1, 8, 8))
        np.testing.assert_allclose(forward(model, images), _loop_forward(model, images), atol=1e-5)


class TestBackward:
    """Tests for backpropagation."""

    @pytest.mark.parametrize("seed", range(5))
    def test_gradients_match_finite_differences(self, tiny_arch, seed):
        model = init_model(tiny_arch, seed)
        assert finite_diff_check(model, _batch(model, seed=seed), seed=seed) < 1e-3

    def test_random_nets_pass_gradient_check(self):
        errors = check_random_nets(20, seed=0)
        assert len(errors) == 20
        assert max(errors) < 1e-3

    @pytest.mark.parametrize("seed", range(10))
    def test_random_small_arch_is_valid(self, seed):
        arch = random_small_arch(seed)
        assert arch.layers[-1].out_dim == arch.num_classes

    def test_label_override(self, tiny_model):
        batch = _batch(tiny_model)
        loss_a, _ = backward(tiny_model, batch)
        loss_b, _ = backward(tiny_model, batch, labels=(batch.labels + 1) % 4)
        assert loss_a != loss_b

    def test_labels_out_of_range(self, tiny_model):
        batch = _batch(tiny_model)
        with pytest.raises(InputShapeError):
            backward(tiny_model, batch, labels=np.full(len(batch), 7))

    def test_overflow_raises(self):
        arch = ArchSpec(layers=[flatten(), dense(3)], input_shape=(1, 4, 4), num_classes=3)
        model = init_model(arch, 0)
        model.params[0][...] = 3e38
        model.params[0][1] = -3e38
        batch = Batch(np.ones((2, 1, 4, 4), dtype=np.float32), np.array([0, 1]))
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(NumericalOverflowError):
                backward(model, batch)

    def test_finite_diff_rejects_nonpositive_step(self, tiny_model):
        with pytest.raises(EngineError):
            finite_diff_check(tiny_model, _batch(tiny_model), h=0.0)

    def test_finite_diff_tight_on_smooth_model(self):
        arch = ArchSpec(layers=[flatten(), dense(3)], input_shape=(1, 4, 4), num_classes=3)
        model = init_model(arch, 0, dtype=np.float64)
        rng = np.random.default_rng(0)
        batch = Batch(rng.random((4, 1, 4, 4)), np.array([0, 1, 2, 0]))
        assert finite_diff_check(model, batch, samples_per_tensor=16) <= 1e-6

    def test_finite_diff_detects_coarse_step(self):
        arch = ArchSpec(layers=[flatten(), dense(3)], input_shape=(1, 4, 4), num_classes=3)
        model = init_model(arch, 0, dtype=np.float64)
        model.params[0][...] = 0.0
        batch = Batch(np.full((4, 1, 4, 4), 2.0), np.zeros(4, dtype=np.int64))
        # uniform posteriors; a unit step moves a logit by 2, far outside the linear regime
        assert finite_diff_check(model, batch, h=1.0) > 1e-2


class TestSgdStep:
    """Tests for the optimiser step."""

    def test_momentum_update(self, tiny_model):
        model = tiny_model.copy()
        start = model.params[1].copy()
        grads = [np.ones_like(p) for p in model.params]
        sgd_step(model, grads, lr=0.1, momentum=0.9)
        np.testing.assert_allclose(model.params[1], start - 0.1, rtol=1e-6)
        sgd_step(model, grads, lr=0.1, momentum=0.9)
        np.testing.assert_allclose(model.params[1], start - 0.1 - 0.1 * 1.9, rtol=1e-6)

    def test_frozen_tensors_untouched(self, tiny_model):
        model = tiny_model.copy()
        model.set_policy(head_only=True)
        before = [p.copy() for p in model.params]
        sgd_step(model, [np.ones_like(p) for p in model.params], lr=0.5)
        w, b = model.head_indices
        for i, (p, q) in enumerate(zip(before, model.params)):
            if i in (w, b):
                assert not np.array_equal(p, q)
            else:
                np.testing.assert_array_equal(p, q)
                assert np.all(model.momentum[i] == 0)

    def test_pruned_channels_not_updated(self, tiny_model):
        model = tiny_model.copy()
        mask = np.array([True, False, True, True])
        model.channel_masks[0] = mask
        before = model.params[0].copy()
        sgd_step(model, [np.ones_like(p) for p in model.params], lr=0.1)
        np.testing.assert_array_equal(model.params[0][1], before[1])
        assert not np.array_equal(model.params[0][0], before[0])

    def test_negative_lr_rejected(self, tiny_model):
        with pytest.raises(EngineError):
            sgd_step(tiny_model.copy(), [np.zeros_like(p) for p in tiny_model.params], lr=-1.0)

    def test_masked_channel_outputs_zero(self, tiny_model):
        model = tiny_model.copy()
        model.channel_masks[0] = np.array([False, True, True, True])
        out = layer_outputs(model, _batch(model).images, [0])[0]
        assert np.all(out[:, 0] == 0)


class TestReplaceHead:
    """Tests for head replacement."""

    def test_new_head_shape_and_body_copied(self, tiny_model):
        swapped = replace_head(tiny_model, 3, seed=1)
        assert swapped.arch.num_classes == 3
        assert swapped.params[-2].shape == (3, 8)
        assert np.all(swapped.params[-1] == 0)
        for a, b in zip(tiny_model.params[:-2], swapped.params[:-2]):
            np.testing.assert_array_equal(a, b)
        assert forward(swapped, _batch(tiny_model)).shape == (6, 3)

    def test_original_untouched(self, tiny_model):
        swapped = replace_head(tiny_model, 3, seed=1)
        swapped.params[0][...] = 0.0
        assert not np.all(tiny_model.params[0] == 0)

    def test_requires_two_classes(self, tiny_model):
        with pytest.raises(UnsupportedArchError):
            replace_head(tiny_model, 1, seed=0)

    def test_masks_carried_over(self, tiny_model):
        model = tiny_model.copy()
        model.channel_masks[0] = np.array([True, False, True, True])
        swapped = replace_head(model, 2, seed=0)
        np.testing.assert_array_equal(swapped.channel_masks[0], model.channel_masks[0])

    def test_same_seed_same_head(self, tiny_model):
        a, b = replace_head(tiny_model, 3, seed=5), replace_head(tiny_model, 3, seed=5)
        np.testing.assert_array_equal(a.params[-2], b.params[-2])
        assert not np.array_equal(a.params[-2], replace_head(tiny_model, 3, seed=6).params[-2])

    def test_head_init_within_glorot_bound(self):
        arch = ArchSpec(layers=[flatten(), dense(2)], input_shape=(1, 50, 50), num_classes=2)
        swapped = replace_head(init_model(arch, 0), 4, seed=0)
        head = swapped.params[-2]
        limit = glorot_limit(head.shape)
        assert head.size == 10_000
        assert np.all(np.abs(head) <= limit * (1 + 1e-6))
        assert np.abs(head).max() > 0.95 * limit
        assert abs(float(head.mean())) < 0.05 * limit


class TestPooling:
    """Max-pooling keeps the block maximum."""

    def test_pool_picks_block_maximum(self):
        arch = ArchSpec(layers=[maxpool(2), flatten(), dense(2)], input_shape=(1, 2, 2), num_classes=2)
        model = init_model(arch, 0, dtype=np.float64)
        model.params[0][...] = np.array([[1.0], [0.0]])
        images = np.array([[[[0.5, 0.5], [0.1, 0.2]]]])
        logits = forward(model, images)
        assert logits[0, 0] == pytest.approx(0.5)
