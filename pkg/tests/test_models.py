from __future__ import annotations

import numpy as np
import pytest

from tacq.errors import ModelError, TensorShapeError
from tacq.models import (
    TrainConfig,
    forward,
    init_model,
    loss_and_grads,
    make_toy_dataset,
    timestep_embedding,
    train,
)
from tacq.models import _adam_update
from tacq.tensors import Rng

from .utils import small_schedule


def _numeric_gradient(model, name, index, x0, t, eps, schedule, delta=1e-5):
    original = model.params[name][index]
    model.params[name][index] = original + delta
    plus, _ = loss_and_grads(model, x0, t, eps, schedule)
    model.params[name][index] = original - delta
    minus, _ = loss_and_grads(model, x0, t, eps, schedule)
    model.params[name][index] = original
    return (plus - minus) / (2 * delta)


@pytest.mark.parametrize("arch, io_shape", [("mlp", (2, 1, 1)), ("conv", (1, 4, 4))])
def test_backprop_matches_central_differences(arch: str, io_shape) -> None:
    schedule = small_schedule()
    model = init_model(arch, io_shape, seed=5)
    rng = Rng(6)
    x0 = rng.normal((1,) + io_shape)
    eps = rng.normal((1,) + io_shape)
    t = np.array([37])

    _, grads = loss_and_grads(model, x0, t, eps, schedule)

    picker = Rng(7)
    for name, value in model.params.items():
        flat = picker.integers(0, value.size, 10)
        for position in flat:
            index = np.unravel_index(int(position), value.shape)
            numeric = _numeric_gradient(model, name, index, x0, t, eps, schedule)
            analytic = grads[name][index]
            assert abs(analytic - numeric) <= 1e-4 * max(abs(analytic), abs(numeric)) + 1e-7, (name, index)


def test_zero_init_output_predicts_zero() -> None:
    model = init_model("mlp", (2, 1, 1), seed=0, zero_init_output=True)
    x = Rng(1).normal((8, 2, 1, 1))

    assert np.array_equal(forward(model, x, np.arange(8)), np.zeros((8, 2, 1, 1)))


def test_loss_is_zero_for_exact_prediction_and_scales_quadratically() -> None:
    schedule = small_schedule()
    model = init_model("mlp", (2, 1, 1), seed=0, zero_init_output=True)
    rng = Rng(2)
    x0, eps = rng.normal((16, 2, 1, 1)), rng.normal((16, 2, 1, 1))
    t = rng.integers(0, schedule.T, 16)

    zero_loss, zero_grads = loss_and_grads(model, x0, t, np.zeros_like(eps), schedule)
    single, _ = loss_and_grads(model, x0, t, eps, schedule)
    double, _ = loss_and_grads(model, x0, t, 2.0 * eps, schedule)

    assert zero_loss == 0.0
    assert all(np.all(grad == 0.0) for grad in zero_grads.values())
    assert double == pytest.approx(4.0 * single, rel=1e-12)


def test_forward_is_deterministic_and_checks_shapes() -> None:
    model = init_model("conv", (1, 8, 8), seed=3)
    x = Rng(4).normal((3, 1, 8, 8))

    assert np.array_equal(forward(model, x, 10), forward(model, x, 10))
    with pytest.raises(TensorShapeError):
        forward(model, np.zeros((3, 2, 8, 8)), 10)
    with pytest.raises(TensorShapeError):
        forward(model, x, np.array([1.0, 2.0]))


def test_fractional_timesteps_are_accepted() -> None:
    model = init_model("mlp", (2, 1, 1), seed=0)
    x = np.ones((2, 2, 1, 1))

    out = forward(model, x, np.array([10.25, 10.75]))

    assert out.shape == (2, 2, 1, 1)
    assert not np.array_equal(out[0], out[1])
    assert timestep_embedding(np.array([0.0]), 32).shape == (1, 32)


def test_outputs_stay_finite_on_wide_inputs() -> None:
    model = init_model("mlp", (2, 1, 1), seed=9)
    x = np.linspace(-10.0, 10.0, 200).reshape(100, 2, 1, 1)

    assert np.all(np.isfinite(forward(model, x, np.linspace(0, 99, 100))))


def test_adam_with_zero_gradients_leaves_parameters_unchanged() -> None:
    params = {"w": np.array([1.0, -2.0])}
    zeros = {"w": np.zeros(2)}
    first = {"w": np.zeros(2)}
    second = {"w": np.zeros(2)}

    _adam_update(params, zeros, first, second, 1, TrainConfig())

    assert np.array_equal(params["w"], np.array([1.0, -2.0]))


def test_training_is_deterministic_and_reduces_loss() -> None:
    schedule = small_schedule()
    data = make_toy_dataset("gauss2d", 256, seed=0)
    model = init_model("mlp", (2, 1, 1), seed=1)
    cfg = TrainConfig(steps=300, batch=64, seed=2, log_every=30)

    first = train(model, data, schedule, cfg)
    second = train(model, data, schedule, cfg)

    assert all(np.array_equal(first.params[name], second.params[name]) for name in first.params)
    assert first.history == second.history
    assert len(first.history) == 10
    assert first.history[-1][1] < 0.8 * first.history[0][1]
    assert np.array_equal(model.params["out.weight"], init_model("mlp", (2, 1, 1), seed=1).params["out.weight"])


@pytest.mark.slow
def test_default_training_halves_the_loss() -> None:
    from tacq.diffusion import make_linear_schedule

    data = make_toy_dataset("gauss2d", 4096, seed=0)
    trained = train(init_model("mlp", (2, 1, 1), seed=1), data, make_linear_schedule(), TrainConfig())

    assert trained.history[-1][1] < 0.5 * trained.history[0][1]


def test_invalid_training_settings_are_rejected() -> None:
    schedule = small_schedule()
    data = make_toy_dataset("gauss2d", 16)
    model = init_model("mlp", (2, 1, 1))

    with pytest.raises(ModelError):
        train(model, data, schedule, TrainConfig(steps=0))
    with pytest.raises(TensorShapeError):
        train(model, make_toy_dataset("blobs8x8", 4), schedule, TrainConfig(steps=1))


def test_toy_datasets() -> None:
    gauss = make_toy_dataset("gauss2d", 10000, seed=3)
    rings = make_toy_dataset("rings2d", 2000, seed=3)
    blobs = make_toy_dataset("blobs8x8", 50, seed=3)

    assert gauss.shape == (10000, 2, 1, 1)
    assert np.all(np.abs(gauss.reshape(-1, 2).mean(axis=0)) < 0.05)
    radius = np.linalg.norm(rings.reshape(-1, 2), axis=1)
    assert np.all((radius > 0.2) & (radius < 1.3))
    assert blobs.shape == (50, 1, 8, 8)
    assert blobs.min() >= -1.0 and blobs.max() <= 1.0
    assert np.array_equal(make_toy_dataset("rings2d", 10, seed=1), make_toy_dataset("rings2d", 10, seed=1))
    with pytest.raises(ModelError):
        make_toy_dataset("moons", 10)
