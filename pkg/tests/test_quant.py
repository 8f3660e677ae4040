from __future__ import annotations

import numpy as np
import pytest

from tacq.errors import CalibrationError, QuantizationError
from tacq.models import forward, init_model
from tacq.quant import (
    QuantParams,
    calibrate_activations,
    calibrate_weights,
    minmax_params,
    quantize,
    quantize_model,
    quantized_forward,
)
from tacq.tensors import Rng

from .utils import calibrated_qmodel, ddim_sampler, random_model, small_schedule

EIGHT_BIT = QuantParams(scale=2 / 255, zero_point=0, q_min=-128, q_max=127, bits=8)


def test_quantize_worked_examples() -> None:
    values = quantize(np.array([0.5, 10.0, 0.0, -10.0]), EIGHT_BIT)

    assert values[0] == pytest.approx(0.50196, abs=1e-5)
    assert values[1] == pytest.approx(254 / 255)
    assert values[2] == 0.0
    assert values[3] == pytest.approx(-256 / 255)


def test_rounding_is_half_away_from_zero() -> None:
    p = QuantParams(scale=1.0, zero_point=0, q_min=-8, q_max=7, bits=4)

    assert quantize(np.array([0.5, -0.5, 1.5, -2.5]), p).tolist() == [1.0, -1.0, 2.0, -3.0]


def test_quantize_is_idempotent_and_monotone() -> None:
    x = np.sort(Rng(0).normal((2000,)) * 2.0)

    once = quantize(x, EIGHT_BIT)

    assert np.array_equal(quantize(once, EIGHT_BIT), once)
    assert np.all(np.diff(once) >= 0.0)


def test_quantization_error_is_at_most_half_a_step_inside_the_range() -> None:
    x = Rng(1).uniform(5000) * 1.9 - 0.95
    low, high = EIGHT_BIT.bounds()

    error = np.abs(quantize(x, EIGHT_BIT) - x)

    inside = (x >= low) & (x <= high)
    assert np.all(error[inside] <= EIGHT_BIT.scale / 2 + 1e-15)


def test_symmetric_weight_calibration() -> None:
    model = init_model("mlp", (2, 1, 1))
    for name in model.weight_names():
        model.params[name] = np.linspace(-0.5, 0.5, model.params[name].size).reshape(model.params[name].shape)

    params = calibrate_weights(model, "minmax_symmetric", 8)

    assert set(params) == set(model.weight_names())
    assert params["fc1.weight"].scale == pytest.approx(0.5 / 127)
    assert params["fc1.weight"].zero_point == 0
    assert "fc1.bias" not in params


def test_all_zero_tensor_gets_the_scale_floor() -> None:
    p = minmax_params(0.0, 0.0, 8, symmetric=True)

    assert p.scale == 1e-8
    assert np.array_equal(quantize(np.zeros(4), p), np.zeros(4))


def test_asymmetric_grid_covers_the_range() -> None:
    p = minmax_params(-3.0, 5.0, 8, symmetric=False)
    low, high = p.bounds()

    assert p.q_min == 0 and p.q_max == 255
    assert float(p.zero_point) == round(float(p.zero_point))
    assert low <= -3.0 + p.scale / 2 and high >= 5.0 - p.scale / 2
    assert abs(quantize(np.array([-3.0]), p)[0] + 3.0) <= p.scale / 2 + 1e-12
    zero_based = minmax_params(0.0, 1.0, 8, symmetric=False)
    assert quantize(np.array([0.0]), zero_based)[0] == 0.0


def test_constant_activation_range_is_widened() -> None:
    p = minmax_params(0.7, 0.7, 8, symmetric=False)

    assert p.scale == 1e-8
    assert quantize(np.array([0.7]), p)[0] == pytest.approx(0.7, abs=1e-8)


def test_invalid_grids_are_rejected() -> None:
    with pytest.raises(QuantizationError):
        QuantParams(scale=0.0, zero_point=0, q_min=-128, q_max=127, bits=8)
    with pytest.raises(QuantizationError):
        QuantParams(scale=1.0, zero_point=0.5, q_min=-128, q_max=127, bits=8)
    with pytest.raises(QuantizationError):
        minmax_params(1.0, -1.0, 8, symmetric=False)
    with pytest.raises(QuantizationError):
        quantize_model(random_model(), 5, 8)


def test_per_channel_weights_follow_output_channels() -> None:
    model = random_model("conv", (1, 8, 8))

    params = calibrate_weights(model, "minmax_symmetric", 4, per_channel=True)

    assert np.shape(params["conv1.weight"].scale) == (32,)
    assert params["conv1.weight"].axis == 0
    assert np.shape(params["temb.weight"].scale) == (32,)
    assert params["temb.weight"].axis == 1
    quantized = quantize(model.params["conv2.weight"], params["conv2.weight"])
    assert quantized.shape == model.params["conv2.weight"].shape


def test_pass_through_model_is_bit_exact() -> None:
    schedule = small_schedule()
    model = random_model()
    qmodel = calibrate_activations(quantize_model(model, 32, 32), schedule, ddim_sampler(), 8)
    x = Rng(2).normal((6, 2, 1, 1))

    assert qmodel.passthrough
    assert np.array_equal(quantized_forward(qmodel, x, np.full(6, 40.0)), forward(model, x, np.full(6, 40.0)))


def test_uncalibrated_model_cannot_run() -> None:
    qmodel = quantize_model(random_model(), 8, 8)

    with pytest.raises(QuantizationError):
        quantized_forward(qmodel, np.zeros((1, 2, 1, 1)), 0)


def test_fewer_bits_give_larger_errors() -> None:
    schedule = small_schedule()
    model = random_model(seed=4)
    x = Rng(3).normal((256, 2, 1, 1))
    t = Rng(4).integers(0, schedule.T, 256).astype(np.float64)
    reference = forward(model, x, t)

    errors = {}
    for bits in (3, 8):
        qmodel = calibrated_qmodel(model, schedule, bits, 8)
        errors[bits] = float(np.mean((quantized_forward(qmodel, x, t) - reference) ** 2))

    assert errors[8] > 0.0
    assert errors[3] >= errors[8]


def test_more_calibration_points_only_widen_ranges() -> None:
    schedule = small_schedule()
    model = random_model(seed=5)
    small = calibrated_qmodel(model, schedule, 8, 8, n_calib=16)
    large = calibrated_qmodel(model, schedule, 8, 8, n_calib=48)

    assert set(small.act_ranges) == set(large.act_ranges) == {"fc1.input", "fc2.input", "fc3.input", "out.input"}
    for name, (low, high) in small.act_ranges.items():
        assert large.act_ranges[name][0] <= low
        assert large.act_ranges[name][1] >= high


def test_calibration_needs_points() -> None:
    qmodel = quantize_model(random_model(), 8, 8)

    with pytest.raises(CalibrationError):
        calibrate_activations(qmodel, small_schedule(), ddim_sampler(), 0)
    with pytest.raises(CalibrationError):
        calibrate_activations(qmodel, small_schedule(), ddim_sampler(), 4, timestep_sampling="random")
