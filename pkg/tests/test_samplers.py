from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest

from tacq.correction import CorrectionTable
from tacq.diffusion import make_ddim_grid, make_dpm_grid, make_linear_schedule
from tacq.errors import SamplerError
from tacq.samplers import (
    SamplerConfig,
    dpm_step_constants,
    dpmpp_2s_step,
    sample,
    sample_ddim,
    sample_dpmpp,
)
from tacq.tensors import Rng

from .utils import LinearModel, ddim_sampler, dpm_sampler, random_model, small_schedule


@pytest.mark.parametrize(
    "cfg",
    [
        ddim_sampler(10),
        ddim_sampler(10, eta=1.0, form="ddpm"),
        ddim_sampler(10, eta=0.5, form="ddim"),
        dpm_sampler(6),
    ],
)
def test_identity_table_is_bit_identical(cfg: SamplerConfig) -> None:
    schedule = small_schedule()
    model = random_model(seed=1)
    grid = cfg.resolve_grid(schedule)
    table = CorrectionTable.identity(grid, model.io_shape)

    plain = sample(model, schedule, cfg, 16, Rng(5)).samples
    corrected = sample(model, schedule, replace(cfg, grid=grid, correction=table), 16, Rng(5)).samples

    assert np.array_equal(plain, corrected)


def test_sampling_is_deterministic_per_seed() -> None:
    schedule = small_schedule()
    model = random_model(seed=2)
    cfg = ddim_sampler(10, eta=1.0, form="ddpm")

    first = sample(model, schedule, cfg, 8, Rng(9))
    second = sample(model, schedule, cfg, 8, Rng(9))
    other = sample(model, schedule, cfg, 8, Rng(10))

    assert np.array_equal(first.samples, second.samples)
    assert not np.array_equal(first.samples, other.samples)
    assert first.seed == 9


def test_trajectory_and_activations_are_recorded() -> None:
    schedule = small_schedule()
    model = random_model(seed=3)
    cfg = replace(ddim_sampler(5), record_trajectory=True, record_activations=True)

    run = sample(model, schedule, cfg, 4, Rng(0))

    assert run.trajectory.shape == (6, 4, 2, 1, 1)
    assert np.array_equal(run.trajectory[-1], run.samples)
    assert set(run.activations) == {(name, p) for name in ("fc1.input", "fc2.input", "fc3.input", "out.input") for p in range(5)}
    assert run.activations[("fc1.input", 0)].shape == (4, 2 + 32)


def test_single_step_ddim_lands_on_the_data_estimate() -> None:
    schedule = small_schedule()
    model = LinearModel(c=0.3, io_shape=(1, 1, 1))

    run = sample(model, schedule, ddim_sampler(1), 3, Rng(4))

    x_T = Rng(4).normal((3, 1, 1, 1))
    ab = schedule.alpha_bar[-1]
    expected = (x_T - math.sqrt(1 - ab) * 0.3 * x_T) / math.sqrt(ab)
    assert np.allclose(run.samples, expected, atol=1e-12)


def test_table_for_another_grid_is_rejected() -> None:
    schedule = small_schedule()
    model = random_model()
    table = CorrectionTable.identity(make_ddim_grid(schedule, 5), model.io_shape)

    with pytest.raises(SamplerError):
        sample(model, schedule, replace(ddim_sampler(10), correction=table), 2, Rng(0))


def test_kind_mismatch_is_rejected() -> None:
    schedule = small_schedule()
    model = random_model()

    with pytest.raises(SamplerError):
        sample_ddim(model, schedule, dpm_sampler(4), 2, Rng(0))
    with pytest.raises(SamplerError):
        sample_dpmpp(model, schedule, ddim_sampler(4), 2, Rng(0))
    with pytest.raises(SamplerError):
        sample(model, schedule, SamplerConfig(kind="euler"), 2, Rng(0))
    with pytest.raises(SamplerError):
        sample(model, schedule, ddim_sampler(4), 0, Rng(0))


def test_midpoint_ratio_lies_in_the_open_unit_interval() -> None:
    schedule = make_linear_schedule()
    grid = make_dpm_grid(schedule, 10, "time_uniform")

    for i in range(1, grid.n_steps + 1):
        c = dpm_step_constants(schedule, grid, i)
        assert 0.0 < c.r < 1.0
        assert c.h > 0.0


def test_zero_noise_prediction_follows_the_closed_form() -> None:
    schedule = make_linear_schedule()
    grid = make_dpm_grid(schedule, 4)
    model = LinearModel(c=0.0, io_shape=(1, 1, 1))
    x = Rng(1).normal((5, 1, 1, 1))

    result = dpmpp_2s_step(model, schedule, x, 1, grid)

    t, s, n = grid.timesteps[0], grid.midpoints[0], grid.timesteps[1]
    a_t, a_s, a_n = (float(schedule.marginal_alpha(v)) for v in (t, s, n))
    sg_t, sg_s, sg_n = (float(schedule.marginal_sigma(v)) for v in (t, s, n))
    l_t, l_s, l_n = (float(schedule.marginal_lambda(v)) for v in (t, s, n))
    h, r = l_n - l_t, (l_s - l_t) / (l_n - l_t)
    x0 = x / a_t
    u = (sg_s / sg_t) * x - a_s * (math.exp(-r * h) - 1.0) * x0
    d = (1 - 1 / (2 * r)) * x0 + (1 / (2 * r)) * (u / a_s)
    expected = (sg_n / sg_t) * x - a_n * (math.exp(-h) - 1.0) * d
    assert np.allclose(result, expected, rtol=1e-12, atol=1e-12)


class _FlatSchedule:
    def marginal_alpha(self, t):
        return np.full(np.shape(t), 0.5)

    def marginal_sigma(self, t):
        return np.full(np.shape(t), math.sqrt(0.75))

    def marginal_lambda(self, t):
        return np.zeros(np.shape(t))


def test_degenerate_step_is_rejected() -> None:
    grid = make_dpm_grid(small_schedule(), 2)

    with pytest.raises(SamplerError):
        dpm_step_constants(_FlatSchedule(), grid, 1)  # type: ignore[arg-type]


def _linear_flow_solution(schedule, x_T: np.ndarray, c: float, t_start: float) -> np.ndarray:
    """Exact solution of the probability flow for ``eps = c * x`` from ``t_start`` to 0.

    In ``y = x / sigma`` the flow reads ``dy/dlambda = y (1 - c sigma)`` with
    ``sigma = (1 + e^(2 lambda))^(-1/2)``, which integrates to
    ``y_0 = y_T exp(dl + c (asinh(e^-l0) - asinh(e^-lT)))``.
    """

    l_T = float(schedule.marginal_lambda(t_start))
    l_0 = float(schedule.marginal_lambda(0.0))
    y_T = x_T / float(schedule.marginal_sigma(t_start))
    exponent = (l_0 - l_T) + c * (math.asinh(math.exp(-l_0)) - math.asinh(math.exp(-l_T)))
    return float(schedule.marginal_sigma(0.0)) * y_T * math.exp(exponent)


def test_dpm_solver_is_second_order_on_a_linear_model() -> None:
    schedule = make_linear_schedule()
    model = LinearModel(c=0.5, io_shape=(1, 1, 1))
    x_T = Rng(3).normal((4, 1, 1, 1))
    exact = _linear_flow_solution(schedule, x_T, 0.5, 999.0)

    errors = []
    steps = [5, 10, 20, 40]
    for m in steps:
        grid = make_dpm_grid(schedule, m)
        x = x_T.copy()
        for i in range(1, m + 1):
            x = dpmpp_2s_step(model, schedule, x, i, grid)
        errors.append(float(np.max(np.abs(x - exact))))

    slope = np.polyfit(np.log(steps), np.log(errors), 1)[0]
    assert slope <= -1.8
