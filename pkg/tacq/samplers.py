"""DDIM/DDPM and DPM-Solver++(2S) samplers with optional correction tables."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Dict, Optional, Tuple

import numpy as np

from .diffusion import (
    UPDATE_FORMS,
    NoiseSchedule,
    TimestepGrid,
    make_ddim_grid,
    make_dpm_grid,
    step_coefficients,
)
from .errors import SamplerError, ScheduleError
from .models import ActivationHook, NoiseEstimator
from .tensors import Rng, Tensor

if TYPE_CHECKING:  # pragma: no cover
    from .correction import CorrectionTable

logger = logging.getLogger(__name__)

__all__ = [
    "SamplerConfig",
    "SampleRun",
    "DpmStepConstants",
    "SAMPLER_KINDS",
    "sample",
    "sample_ddim",
    "sample_dpmpp",
    "ddim_coefficients",
    "dpm_step_constants",
    "dpm_midpoint",
    "dpm_update",
    "dpmpp_2s_step",
    "evaluate",
]

SAMPLER_KINDS = ("ddim", "dpmpp_2s")


@dataclass
class SamplerConfig:
    """Sampler settings; ``grid`` is derived from ``steps`` when not given."""

    kind: str = "ddim"
    steps: int = 100
    eta: float = 0.0
    form: str = "ddim"
    spacing: str = "logsnr"
    grid: Optional[TimestepGrid] = None
    correction: Optional["CorrectionTable"] = None
    record_trajectory: bool = False
    record_activations: bool = False

    def validate(self) -> None:
        if self.kind not in SAMPLER_KINDS:
            raise SamplerError(f"Unbekannter Sampler '{self.kind}'")
        if self.steps < 1:
            raise SamplerError(f"steps muss >= 1 sein, erhalten: {self.steps}")
        if self.eta < 0:
            raise SamplerError(f"eta muss >= 0 sein, erhalten: {self.eta}")
        if self.form not in UPDATE_FORMS:
            raise SamplerError(f"Unbekannte Schrittform '{self.form}'")

    def resolve_grid(self, schedule: NoiseSchedule) -> TimestepGrid:
        self.validate()
        if self.grid is not None:
            if self.grid.kind != self.kind:
                raise SamplerError(f"Gitterart '{self.grid.kind}' passt nicht zu Sampler '{self.kind}'")
            self.grid.check_bounds(schedule)
            return self.grid
        try:
            if self.kind == "ddim":
                return make_ddim_grid(schedule, self.steps)
            return make_dpm_grid(schedule, self.steps, self.spacing)
        except ScheduleError as exc:
            raise SamplerError(str(exc)) from exc


@dataclass
class SampleRun:
    """Result of one sampling call."""

    samples: Tensor
    seed: int
    seconds: float
    grid: TimestepGrid
    trajectory: Optional[Tensor] = None
    activations: Dict[Tuple[str, int], Tensor] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, object]:
        return {
            "n": int(self.samples.shape[0]),
            "seed": self.seed,
            "seconds": self.seconds,
            "grid": self.grid.to_dict(),
            "steps": self.grid.n_steps,
        }


def evaluate(
    model: NoiseEstimator,
    x: Tensor,
    t: float,
    hook: Optional[ActivationHook] = None,
) -> Tensor:
    """Evaluate *model* on a batch at the single (possibly fractional) time *t*."""

    timesteps = np.full(x.shape[0], float(t))
    if hook is None:
        return model.forward(x, timesteps)
    return model.forward(x, timesteps, hook=hook)  # type: ignore[call-arg]


def _recorder(store: Dict[Tuple[str, int], Tensor], position: int) -> ActivationHook:
    def record(name: str, value: Tensor) -> Tensor:
        store[(name, position)] = np.array(value, copy=True)
        return value

    return record


def _check_table(table: Optional["CorrectionTable"], grid: TimestepGrid, model: NoiseEstimator) -> None:
    if table is None:
        return
    if not table.grid.matches(grid):
        raise SamplerError("Korrekturtabelle wurde für ein anderes Zeitgitter berechnet")
    if tuple(table.io_shape) != tuple(model.io_shape):
        raise SamplerError(f"Korrekturtabelle hat Form {table.io_shape}, Modell {model.io_shape}")


# ----------------------------------------------------------------------
# DDIM / DDPM
def ddim_coefficients(
    respaced: NoiseSchedule, position: int, eta: float, form: str
) -> Tuple[float, float, float]:
    """``(c_x, c_eps, sigma)`` for grid position *position* of a respaced grid.

    Grid position ``i`` maps to schedule index ``M - 1 - i``; no noise is
    injected on the final step.
    """

    index = respaced.T - 1 - position
    c_x, c_eps, sigma = step_coefficients(respaced, index, eta, form)
    if index == 0:
        sigma = 0.0
    return c_x, c_eps, sigma


def sample_ddim(
    model: NoiseEstimator,
    schedule: NoiseSchedule,
    cfg: SamplerConfig,
    n: int,
    rng: Rng,
) -> SampleRun:
    """Ancestral/implicit sampling over the respaced grid, descending.

    With a correction table the state entering step ``i`` is corrected by
    ``B[i]``, the estimate is scaled by ``K[i]`` and the final output by ``B[M]``.
    """

    if cfg.kind != "ddim":
        raise SamplerError(f"sample_ddim erwartet kind='ddim', erhalten: '{cfg.kind}'")
    if n < 1:
        raise SamplerError(f"n muss >= 1 sein, erhalten: {n}")
    grid = cfg.resolve_grid(schedule)
    table = cfg.correction
    _check_table(table, grid, model)
    respaced = schedule.respace(grid.timesteps.astype(np.int64))
    if respaced.T != grid.n_steps:
        raise SamplerError("Zeitgitter enthält doppelte Zeitschritte")
    shape = (n,) + tuple(model.io_shape)
    started = time.perf_counter()

    x = rng.normal(shape)
    states = [] if cfg.record_trajectory else None
    activations: Dict[Tuple[str, int], Tensor] = {}
    for position, t in enumerate(grid.timesteps):
        if table is not None:
            x = table.correct_state(x, position)
        if states is not None:
            states.append(x)
        hook = _recorder(activations, position) if cfg.record_activations else None
        eps = evaluate(model, x, t, hook)
        if table is not None:
            eps = table.correct_eps(eps, position)
        c_x, c_eps, sigma = ddim_coefficients(respaced, position, cfg.eta, cfg.form)
        x_next = c_x * x - c_eps * eps
        if sigma > 0.0:
            noise_scale = table.noise_scale(sigma) if table is not None else sigma
            x_next = x_next + noise_scale * rng.normal(shape)
        x = x_next
    if table is not None:
        x = table.correct_state(x, grid.n_steps)
    if states is not None:
        states.append(x)

    seconds = time.perf_counter() - started
    _check_finite(x)
    logger.debug("DDIM: %d Proben in %d Schritten, %.3f s", n, grid.n_steps, seconds)
    return SampleRun(
        samples=x,
        seed=rng.seed,
        seconds=seconds,
        grid=grid,
        trajectory=np.stack(states) if states is not None else None,
        activations=activations,
    )


# ----------------------------------------------------------------------
# DPM-Solver++(2S)
@dataclass(frozen=True)
class DpmStepConstants:
    """Marginal constants of one 2S step from ``t_prev`` over ``s`` to ``t_next``."""

    t_prev: float
    s: float
    t_next: float
    alpha_prev: float
    sigma_prev: float
    alpha_s: float
    sigma_s: float
    alpha_next: float
    sigma_next: float
    h: float
    r: float


def dpm_step_constants(schedule: NoiseSchedule, grid: TimestepGrid, i: int) -> DpmStepConstants:
    """Constants of step ``i`` (1-based, ``t_{i-1} -> t_i``)."""

    if grid.kind != "dpmpp_2s" or grid.midpoints is None:
        raise SamplerError("DPM-Solver++(2S) benötigt ein Gitter mit Zwischenpunkten")
    if not 1 <= i <= grid.n_steps:
        raise SamplerError(f"Schritt {i} außerhalb von [1, {grid.n_steps}]")
    t_prev = float(grid.timesteps[i - 1])
    s = float(grid.midpoints[i - 1])
    t_next = float(grid.timesteps[i])
    points = np.array([t_prev, s, t_next])
    alpha = schedule.marginal_alpha(points)
    sigma = schedule.marginal_sigma(points)
    lam = schedule.marginal_lambda(points)
    h = float(lam[2] - lam[0])
    if h == 0.0:
        raise SamplerError(f"Entartetes Gitter: h = 0 in Schritt {i}")
    return DpmStepConstants(
        t_prev=t_prev,
        s=s,
        t_next=t_next,
        alpha_prev=float(alpha[0]),
        sigma_prev=float(sigma[0]),
        alpha_s=float(alpha[1]),
        sigma_s=float(sigma[1]),
        alpha_next=float(alpha[2]),
        sigma_next=float(sigma[2]),
        h=h,
        r=float(lam[1] - lam[0]) / h,
    )


def dpm_midpoint(x: Tensor, eps: Tensor, c: DpmStepConstants) -> Tuple[Tensor, Tensor]:
    """Data prediction at ``t_{i-1}`` and the intermediate state ``u`` at ``s``."""

    x_theta = (x - c.sigma_prev * eps) / c.alpha_prev
    u = (c.sigma_s / c.sigma_prev) * x - c.alpha_s * math.expm1(-c.r * c.h) * x_theta
    return x_theta, u


def dpm_update(
    x: Tensor, x_theta: Tensor, u: Tensor, eps_mid: Tensor, c: DpmStepConstants
) -> Tensor:
    """Combine both data predictions and advance to ``t_i``."""

    x_theta_mid = (u - c.sigma_s * eps_mid) / c.alpha_s
    weight = 1.0 / (2.0 * c.r)
    d = (1.0 - weight) * x_theta + weight * x_theta_mid
    return (c.sigma_next / c.sigma_prev) * x - c.alpha_next * math.expm1(-c.h) * d


def dpmpp_2s_step(
    model: NoiseEstimator,
    schedule: NoiseSchedule,
    x_t: Tensor,
    i: int,
    grid: TimestepGrid,
    table: Optional["CorrectionTable"] = None,
    *,
    hook: Optional[ActivationHook] = None,
) -> Tensor:
    """One DPM-Solver++(2S) step ``t_{i-1} -> t_i`` (``i`` is 1-based).

    With a table, ``K`` scales the estimate at both ``t_{i-1}`` and ``s_i``.
    *hook* only observes the ``t_{i-1}`` evaluation.
    """

    c = dpm_step_constants(schedule, grid, i)
    eps = evaluate(model, x_t, c.t_prev, hook)
    if table is not None:
        eps = table.correct_eps(eps, i - 1)
    x_theta, u = dpm_midpoint(x_t, eps, c)
    eps_mid = evaluate(model, u, c.s)
    if table is not None:
        eps_mid = table.correct_eps(eps_mid, i - 1, midpoint=True)
    return dpm_update(x_t, x_theta, u, eps_mid, c)


def sample_dpmpp(
    model: NoiseEstimator,
    schedule: NoiseSchedule,
    cfg: SamplerConfig,
    n: int,
    rng: Rng,
) -> SampleRun:
    """Full DPM-Solver++(2S) trajectory from ``x_T``."""

    if cfg.kind != "dpmpp_2s":
        raise SamplerError(f"sample_dpmpp erwartet kind='dpmpp_2s', erhalten: '{cfg.kind}'")
    if n < 1:
        raise SamplerError(f"n muss >= 1 sein, erhalten: {n}")
    grid = cfg.resolve_grid(schedule)
    table = cfg.correction
    _check_table(table, grid, model)
    started = time.perf_counter()

    x = rng.normal((n,) + tuple(model.io_shape))
    states = [] if cfg.record_trajectory else None
    activations: Dict[Tuple[str, int], Tensor] = {}
    for i in range(1, grid.n_steps + 1):
        if table is not None:
            x = table.correct_state(x, i - 1)
        if states is not None:
            states.append(x)
        hook = _recorder(activations, i - 1) if cfg.record_activations else None
        x = dpmpp_2s_step(model, schedule, x, i, grid, table, hook=hook)
    if table is not None:
        x = table.correct_state(x, grid.n_steps)
    if states is not None:
        states.append(x)

    seconds = time.perf_counter() - started
    _check_finite(x)
    logger.debug("DPM-Solver++(2S): %d Proben in %d Schritten, %.3f s", n, grid.n_steps, seconds)
    return SampleRun(
        samples=x,
        seed=rng.seed,
        seconds=seconds,
        grid=grid,
        trajectory=np.stack(states) if states is not None else None,
        activations=activations,
    )


def sample(model: NoiseEstimator, schedule: NoiseSchedule, cfg: SamplerConfig, n: int, rng: Rng) -> SampleRun:
    """Dispatch on ``cfg.kind``."""

    cfg.validate()
    if cfg.kind == "ddim":
        return sample_ddim(model, schedule, cfg, n, rng)
    return sample_dpmpp(model, schedule, cfg, n, rng)


def _check_finite(x: Tensor) -> None:
    if not np.all(np.isfinite(x)):
        raise SamplerError("Sampler hat nicht endliche Werte erzeugt")
