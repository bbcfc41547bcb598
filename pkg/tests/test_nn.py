"""Model construction, optimizer mechanics, learning rate schedule."""

import logging

import numpy as np
import pytest

from robustmix.data import Dataset
from robustmix.moe import TrainingConfig, train_benign_expert
from robustmix.nn import (
    Conv,
    Dense,
    Flatten,
    GlobalAvgPool,
    LrSchedule,
    ModelSpec,
    ResBlock,
    build_model,
    cosine_lr,
    init_optimizer,
    mlp_spec,
    model_forward,
    parameter_checksum,
    parameter_count,
    set_mode,
    sgd_step,
    small_resnet_spec,
    spec_from_dict,
    spec_to_dict,
)
from robustmix.tensor import Tensor, backward, softmax_cross_entropy

NORM = ((0.5, 0.5, 0.5), (0.25, 0.25, 0.25))


def desk_spec(side=12, classes=2, widths=(4, 8, 8)):
    return small_resnet_spec((3, side, side), classes, widths, NORM)


class TestBuildModel:
    def test_same_seed_identical_checksums(self):
        spec = desk_spec()
        assert parameter_checksum(build_model(spec, 42)) == parameter_checksum(build_model(spec, 42))

    def test_different_seeds_differ(self):
        spec = desk_spec()
        assert parameter_checksum(build_model(spec, 1)) != parameter_checksum(build_model(spec, 2))

    def test_default_spec_shapes(self):
        model = build_model(small_resnet_spec(), seed=0)
        logits = model.forward(Tensor(np.random.default_rng(0).random((2, 3, 32, 32))))
        assert logits.shape == (2, 10)

    def test_default_spec_param_count_near_100k(self):
        assert 90_000 <= parameter_count(small_resnet_spec()) <= 110_000

    def test_param_count_matches_built_model(self):
        spec = desk_spec(widths=(8, 16, 32))
        model = build_model(spec, 0)
        built = sum(p.data.size for p in model.parameters().values())
        assert built == parameter_count(spec)

    def test_incompatible_chain_rejected_with_layer_pair(self):
        with pytest.raises(ValueError, match="layer 1 .Dense."):
            ModelSpec((Conv(4, 3, 1, 1), Dense(2)), (3, 8, 8), 2, NORM)

    def test_odd_input_for_stride2_block_rejected(self):
        with pytest.raises(ValueError, match="non-integral"):
            ModelSpec((ResBlock(4, 2), GlobalAvgPool(), Dense(2)), (3, 7, 7), 2, NORM)

    def test_bad_normalization_rejected(self):
        with pytest.raises(ValueError, match="std must be positive"):
            small_resnet_spec((3, 8, 8), 2, (4, 8, 8), ((0.5,) * 3, (0.0,) * 3))

    def test_wrong_class_count_rejected(self):
        with pytest.raises(ValueError, match="expected"):
            ModelSpec((Flatten(), Dense(3)), (3, 8, 8), 2, NORM)


class TestForward:
    def test_input_gradient_exists(self):
        model = build_model(desk_spec(), 0)
        x = Tensor(np.random.default_rng(0).random((2, 3, 12, 12)), requires_grad=True)
        backward(softmax_cross_entropy(model.forward(x), np.array([0, 1])))
        assert x.grad is not None and x.grad.shape == x.shape

    def test_batch_row_independence(self):
        model = build_model(desk_spec(), 3)
        rng = np.random.default_rng(1)
        batch = rng.random((2, 3, 12, 12))
        both = model.forward(Tensor(batch)).data
        single = model.forward(Tensor(batch[:1])).data
        assert np.allclose(both[0], single[0], rtol=1e-12, atol=1e-12)

    def test_logits_finite(self):
        model = build_model(desk_spec(), 5)
        logits = model.forward(Tensor(np.random.default_rng(2).random((4, 3, 12, 12))))
        assert np.all(np.isfinite(logits.data))

    def test_shape_mismatch_rejected(self):
        model = build_model(desk_spec(), 0)
        with pytest.raises(ValueError, match="expected"):
            model.forward(Tensor(np.zeros((1, 3, 8, 8))))

    def test_model_forward_wraps_arrays(self):
        model = build_model(desk_spec(), 0)
        out = model_forward(model, np.random.default_rng(0).random((1, 3, 12, 12)))
        assert out.shape == (1, 2)


class TestSgd:
    def _one_param(self, value=1.0):
        return {"w": Tensor(np.array([value]), requires_grad=True)}

    def test_plain_step(self):
        params = self._one_param()
        state = init_optimizer(params, lr=0.01, momentum=0.0, weight_decay=0.0)
        sgd_step(params, {"w": np.array([0.1])}, state)
        assert params["w"].data[0] == pytest.approx(0.999, abs=1e-12)

    def test_weight_decay_step(self):
        params = self._one_param()
        state = init_optimizer(params, lr=0.01, momentum=0.0, weight_decay=5e-4)
        sgd_step(params, {"w": np.array([0.1])}, state)
        assert params["w"].data[0] == pytest.approx(0.998995, abs=1e-12)

    def test_two_momentum_steps(self):
        params = self._one_param()
        state = init_optimizer(params, lr=0.01, momentum=0.9, weight_decay=0.0)
        sgd_step(params, {"w": np.array([0.1])}, state)
        sgd_step(params, {"w": np.array([0.1])}, state)
        assert params["w"].data[0] == pytest.approx(0.9971, abs=1e-12)

    def test_zero_lr_is_identity(self):
        model = build_model(desk_spec(), 0)
        before = parameter_checksum(model)
        state = init_optimizer(model, lr=0.0)
        grads = {k: np.ones_like(p.data) for k, p in model.parameters().items()}
        sgd_step(model, grads, state)
        assert parameter_checksum(model) == before

    def test_missing_gradient_rejected(self):
        model = build_model(desk_spec(), 0)
        state = init_optimizer(model, lr=0.01)
        with pytest.raises(ValueError, match="missing gradients"):
            sgd_step(model, {}, state)


class TestCosine:
    def test_endpoints_and_midpoint(self):
        sched = LrSchedule(lr0=0.01, eta_min=0.0, t_max=100)
        assert cosine_lr(0, sched) == pytest.approx(0.01, abs=1e-15)
        assert cosine_lr(100, sched) == pytest.approx(0.0, abs=1e-15)
        assert cosine_lr(50, sched) == pytest.approx(0.005, abs=1e-15)

    def test_monotone_non_increasing(self):
        sched = LrSchedule(lr0=0.1, eta_min=0.001, t_max=57)
        values = [cosine_lr(step, sched) for step in range(58)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_beyond_t_max_clamps_and_logs_once(self, caplog):
        sched = LrSchedule(lr0=0.01, eta_min=0.002, t_max=10)
        with caplog.at_level(logging.WARNING):
            assert cosine_lr(11, sched) == 0.002
            assert cosine_lr(12, sched) == 0.002
        assert sum("clamping" in rec.message for rec in caplog.records) == 1

    def test_invalid_schedule_rejected(self):
        with pytest.raises(ValueError):
            LrSchedule(lr0=0.01, eta_min=0.02, t_max=10)


class TestMode:
    def test_eval_forward_repeatable(self):
        model = set_mode(build_model(desk_spec(), 0), "eval")
        x = np.random.default_rng(0).random((2, 3, 12, 12))
        a = model.forward(Tensor(x)).data
        b = model.forward(Tensor(x)).data
        assert np.array_equal(a, b)

    def test_mode_round_trip_preserves_params(self):
        model = build_model(desk_spec(), 0)
        before = parameter_checksum(model)
        set_mode(set_mode(set_mode(model, "eval"), "train"), "eval")
        assert parameter_checksum(model) == before

    def test_train_eval_outputs_equal(self):
        model = build_model(desk_spec(), 0)
        x = np.random.default_rng(3).random((2, 3, 12, 12))
        train_out = set_mode(model, "train").forward(Tensor(x)).data
        eval_out = set_mode(model, "eval").forward(Tensor(x)).data
        assert np.array_equal(train_out, eval_out)

    def test_invalid_mode_rejected(self):
        with pytest.raises(ValueError, match="mode"):
            set_mode(build_model(desk_spec(), 0), "frozen")


class TestSpecSerialization:
    def test_round_trip(self):
        spec = small_resnet_spec((3, 12, 12), 4, (8, 16, 32), NORM)
        assert spec_from_dict(spec_to_dict(spec)) == spec

    def test_mlp_round_trip(self):
        spec = mlp_spec((3, 8, 8), (16, 8), 3)
        assert spec_from_dict(spec_to_dict(spec)) == spec

    def test_unknown_layer_type_rejected(self):
        with pytest.raises(ValueError, match="unknown layer type"):
            spec_from_dict({"layers": [{"type": "pool9"}], "input_shape": [3, 8, 8], "num_classes": 2})


def test_memorizes_small_dataset():
    # end-to-end optimizer sanity: 50 random-labeled samples to loss < 0.05
    rng = np.random.default_rng(0)
    images = rng.random((50, 3, 8, 8))
    labels = rng.integers(0, 2, 50)
    ds = Dataset(images, labels, 2)
    spec = small_resnet_spec((3, 8, 8), 2, (8, 16, 16), NORM)
    cfg = TrainingConfig(epochs=500, batch_size=50, lr0=0.05, weight_decay=0.0, seed=4)
    model, history = train_benign_expert(ds, spec, cfg)
    assert len(history) == 500
    assert history[-1].loss < 0.05
