"""Noise schedules, the forward process and the plain reverse-step primitives."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .errors import ScheduleError, TensorShapeError
from .tensors import Tensor

logger = logging.getLogger(__name__)

__all__ = [
    "NoiseSchedule",
    "TimestepGrid",
    "make_linear_schedule",
    "make_ddim_grid",
    "make_dpm_grid",
    "forward_noise",
    "ddpm_step",
    "ddim_step",
    "step_coefficients",
    "UPDATE_FORMS",
    "GRID_SPACINGS",
    "DEFAULT_T",
    "DEFAULT_BETA_START",
    "DEFAULT_BETA_END",
]

DEFAULT_T = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02
UPDATE_FORMS = ("ddpm", "ddim")
GRID_SPACINGS = ("logsnr", "time_uniform")


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Per-timestep constants of a discrete variance-preserving diffusion.

    ``timesteps`` maps each schedule index to the timestep of the original
    (training) schedule; for a schedule built by :meth:`respace` this is the
    chosen subsequence, otherwise it is ``0..T-1``.
    """

    beta: Tensor
    alpha: Tensor
    alpha_bar: Tensor
    lambdas: Tensor
    timesteps: Tensor
    beta_start: float
    beta_end: float
    T_train: int

    @property
    def T(self) -> int:
        return int(self.beta.shape[0])

    def check_index(self, t: int) -> int:
        index = int(t)
        if index != t or not 0 <= index < self.T:
            raise ScheduleError(f"Zeitschritt {t} liegt außerhalb von [0, {self.T - 1}]")
        return index

    def alpha_bar_prev(self, t: int) -> float:
        index = self.check_index(t)
        return 1.0 if index == 0 else float(self.alpha_bar[index - 1])

    def posterior_variance(self, t: int) -> float:
        """Variance of q(x_{t-1} | x_t, x_0); zero at the first index."""

        index = self.check_index(t)
        return (1.0 - self.alpha_bar_prev(index)) / (1.0 - float(self.alpha_bar[index])) * float(self.beta[index])

    def sigma(self, eta: float) -> Tensor:
        """Per-step sampling standard deviation for the ancestral step at *eta*."""

        prev = np.concatenate([[1.0], self.alpha_bar[:-1]])
        variance = (1.0 - prev) / (1.0 - self.alpha_bar) * self.beta
        return float(eta) * np.sqrt(variance)

    # ------------------------------------------------------------------
    # continuous-time queries (piecewise-linear in log alpha_bar)
    def _log_alpha_bar(self) -> Tensor:
        return np.log(self.alpha_bar)

    def marginal_log_alpha_bar(self, t: Tensor) -> Tensor:
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < 0) or np.any(t > self.T - 1):
            raise ScheduleError(f"Zeit außerhalb von [0, {self.T - 1}]")
        return np.interp(t, np.arange(self.T, dtype=np.float64), self._log_alpha_bar())

    def marginal_alpha(self, t: Tensor) -> Tensor:
        """sqrt(alpha_bar) at continuous time *t*."""

        return np.exp(0.5 * self.marginal_log_alpha_bar(t))

    def marginal_sigma(self, t: Tensor) -> Tensor:
        """sqrt(1 - alpha_bar) at continuous time *t*."""

        return np.sqrt(-np.expm1(self.marginal_log_alpha_bar(t)))

    def marginal_lambda(self, t: Tensor) -> Tensor:
        log_ab = self.marginal_log_alpha_bar(t)
        return 0.5 * log_ab - 0.5 * np.log(-np.expm1(log_ab))

    def inverse_lambda(self, lam: Tensor) -> Tensor:
        """Continuous time whose half-log-SNR equals *lam*."""

        lam = np.asarray(lam, dtype=np.float64)
        log_ab = -np.logaddexp(0.0, -2.0 * lam)
        table = self._log_alpha_bar()
        lower, upper = table[-1], table[0]
        if np.any(log_ab < lower - 1e-12) or np.any(log_ab > upper + 1e-12):
            raise ScheduleError("Half-Log-SNR außerhalb des Zeitplans")
        grid = np.arange(self.T, dtype=np.float64)
        # np.interp needs increasing abscissae; log alpha_bar decreases in t.
        return np.interp(log_ab, table[::-1], grid[::-1])

    # ------------------------------------------------------------------
    def respace(self, timesteps: Sequence[int]) -> "NoiseSchedule":
        """Return the schedule induced by the subsequence *timesteps*."""

        chosen = np.unique(np.asarray(timesteps, dtype=np.int64))
        if chosen.size < 1 or chosen[0] < 0 or chosen[-1] >= self.T:
            raise ScheduleError("Teilfolge liegt außerhalb des Zeitplans")
        alpha_bar = self.alpha_bar[chosen]
        prev = np.concatenate([[1.0], alpha_bar[:-1]])
        alpha = alpha_bar / prev
        beta = 1.0 - alpha
        return NoiseSchedule(
            beta=beta,
            alpha=alpha,
            alpha_bar=alpha_bar,
            lambdas=_half_log_snr(alpha_bar),
            timesteps=self.timesteps[chosen].astype(np.float64),
            beta_start=self.beta_start,
            beta_end=self.beta_end,
            T_train=self.T_train,
        )

    def to_dict(self) -> Dict[str, object]:
        return {"T": self.T_train, "beta_start": self.beta_start, "beta_end": self.beta_end}

    @classmethod
    def from_dict(cls, data: Dict[str, object]) -> "NoiseSchedule":
        return make_linear_schedule(
            int(data["T"]), float(data["beta_start"]), float(data["beta_end"])  # type: ignore[arg-type]
        )


def _half_log_snr(alpha_bar: Tensor) -> Tensor:
    return 0.5 * np.log(alpha_bar) - 0.5 * np.log1p(-alpha_bar)


def make_linear_schedule(
    T: int = DEFAULT_T,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
) -> NoiseSchedule:
    """Linear beta schedule including both endpoints."""

    if int(T) != T or T < 2:
        raise ScheduleError(f"T muss mindestens 2 sein, erhalten: {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ScheduleError(
            f"Es muss 0 < beta_start <= beta_end < 1 gelten, erhalten: {beta_start}, {beta_end}"
        )
    beta = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    if alpha_bar[-1] <= 0.0:
        raise ScheduleError("alpha_bar unterläuft auf 0")
    return NoiseSchedule(
        beta=beta,
        alpha=alpha,
        alpha_bar=alpha_bar,
        lambdas=_half_log_snr(alpha_bar),
        timesteps=np.arange(int(T), dtype=np.float64),
        beta_start=float(beta_start),
        beta_end=float(beta_end),
        T_train=int(T),
    )


@dataclass(frozen=True, eq=False)
class TimestepGrid:
    """Decreasing timesteps visited by a sampler.

    For ``ddim`` the ``timesteps`` are the M evaluation points; the last step
    lands on the data.  For ``dpmpp_2s`` they are the M+1 boundaries
    ``t_0 > ... > t_M`` and ``midpoints`` holds the M intermediate ``s_i``.
    """

    kind: str
    timesteps: Tensor
    midpoints: Optional[Tensor] = None
    spacing: str = "uniform"

    def __post_init__(self) -> None:
        steps = np.asarray(self.timesteps, dtype=np.float64)
        object.__setattr__(self, "timesteps", steps)
        if steps.ndim != 1 or steps.size < 1:
            raise ScheduleError("Zeitgitter ist leer")
        if steps.size > 1 and not np.all(np.diff(steps) < 0):
            raise ScheduleError("Zeitgitter muss streng fallend sein")
        if self.kind == "dpmpp_2s":
            if self.midpoints is None or steps.size < 2:
                raise ScheduleError("DPM-Solver++(2S) benötigt Zwischenpunkte s_i")
            mids = np.asarray(self.midpoints, dtype=np.float64)
            object.__setattr__(self, "midpoints", mids)
            if mids.shape != (steps.size - 1,):
                raise ScheduleError("Anzahl der Zwischenpunkte passt nicht zum Gitter")
            if not (np.all(steps[:-1] > mids) and np.all(mids > steps[1:])):
                raise ScheduleError("Zwischenpunkte verletzen t_(i-1) > s_i > t_i")
        elif self.kind != "ddim":
            raise ScheduleError(f"Unbekannte Gitterart '{self.kind}'")

    @property
    def n_steps(self) -> int:
        if self.kind == "ddim":
            return int(self.timesteps.size)
        return int(self.timesteps.size - 1)

    def matches(self, other: "TimestepGrid") -> bool:
        if self.kind != other.kind or not np.array_equal(self.timesteps, other.timesteps):
            return False
        if self.midpoints is None or other.midpoints is None:
            return self.midpoints is None and other.midpoints is None
        return bool(np.array_equal(self.midpoints, other.midpoints))

    def check_bounds(self, schedule: NoiseSchedule) -> None:
        points = [self.timesteps] + ([self.midpoints] if self.midpoints is not None else [])
        for values in points:
            if np.any(values < 0) or np.any(values > schedule.T - 1):
                raise ScheduleError(f"Gitterpunkte außerhalb von [0, {schedule.T - 1}]")

    def to_dict(self) -> Dict[str, object]:
        return {"kind": self.kind, "spacing": self.spacing}


def make_ddim_grid(schedule: NoiseSchedule, steps: int) -> TimestepGrid:
    """Uniform stride over ``[0, T-1]`` including both ends."""

    if steps < 1 or steps > schedule.T:
        raise ScheduleError(f"Schrittzahl {steps} ungültig für T={schedule.T}")
    if steps == 1:
        timesteps = np.array([schedule.T - 1], dtype=np.float64)
    else:
        timesteps = np.round(np.linspace(schedule.T - 1, 0, steps)).astype(np.float64)
    return TimestepGrid(kind="ddim", timesteps=timesteps, spacing="uniform")


def make_dpm_grid(schedule: NoiseSchedule, steps: int, spacing: str = "logsnr") -> TimestepGrid:
    """Boundaries ``t_0 = T-1 > ... > t_M = 0`` plus lambda-midpoints ``s_i``."""

    if steps < 1:
        raise ScheduleError(f"Schrittzahl {steps} ungültig")
    if spacing not in GRID_SPACINGS:
        raise ScheduleError(f"Unbekannte Gitterteilung '{spacing}'")
    t_start, t_end = float(schedule.T - 1), 0.0
    if spacing == "time_uniform":
        boundaries = np.linspace(t_start, t_end, steps + 1)
    else:
        lam = np.linspace(
            float(schedule.marginal_lambda(t_start)), float(schedule.marginal_lambda(t_end)), steps + 1
        )
        boundaries = schedule.inverse_lambda(lam)
        boundaries[0], boundaries[-1] = t_start, t_end
    lam_bounds = schedule.marginal_lambda(boundaries)
    midpoints = schedule.inverse_lambda(0.5 * (lam_bounds[:-1] + lam_bounds[1:]))
    return TimestepGrid(kind="dpmpp_2s", timesteps=boundaries, midpoints=midpoints, spacing=spacing)


def _check_same_shape(operation: str, left: Tensor, right: Tensor) -> None:
    if np.shape(left) != np.shape(right):
        raise TensorShapeError(operation, np.shape(left), np.shape(right))


def forward_noise(schedule: NoiseSchedule, x0: Tensor, t: int, eps: Tensor) -> Tensor:
    """Sample x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps."""

    _check_same_shape("forward_noise", x0, eps)
    index = schedule.check_index(t)
    alpha_bar = float(schedule.alpha_bar[index])
    return math.sqrt(alpha_bar) * np.asarray(x0) + math.sqrt(1.0 - alpha_bar) * np.asarray(eps)


def step_coefficients(
    schedule: NoiseSchedule, t: int, eta: float = 0.0, form: str = "ddpm"
) -> Tuple[float, float, float]:
    """Coefficients of the affine reverse step ``x_prev = c_x x - c_eps eps + sigma z``."""

    index = schedule.check_index(t)
    if eta < 0:
        raise ScheduleError(f"eta muss >= 0 sein, erhalten: {eta}")
    alpha = float(schedule.alpha[index])
    alpha_bar = float(schedule.alpha_bar[index])
    if form == "ddpm":
        c_x = 1.0 / math.sqrt(alpha)
        c_eps = float(schedule.beta[index]) / math.sqrt(alpha - alpha * alpha_bar)
        sigma = eta * math.sqrt(schedule.posterior_variance(index))
        return c_x, c_eps, sigma
    if form == "ddim":
        prev = schedule.alpha_bar_prev(index)
        sigma = eta * math.sqrt((1.0 - prev) / (1.0 - alpha_bar) * (1.0 - alpha_bar / prev))
        c_x = math.sqrt(prev / alpha_bar)
        c_eps = c_x * math.sqrt(1.0 - alpha_bar) - math.sqrt(max(1.0 - prev - sigma * sigma, 0.0))
        return c_x, c_eps, sigma
    raise ScheduleError(f"Unbekannte Schrittform '{form}'")


def _apply_step(
    schedule: NoiseSchedule,
    x_t: Tensor,
    eps_hat: Tensor,
    t: int,
    eta: float,
    z: Optional[Tensor],
    form: str,
) -> Tensor:
    _check_same_shape(f"{form}_step", x_t, eps_hat)
    c_x, c_eps, sigma = step_coefficients(schedule, t, eta, form)
    out = c_x * np.asarray(x_t) - c_eps * np.asarray(eps_hat)
    if z is not None and sigma != 0.0:
        _check_same_shape(f"{form}_step", x_t, z)
        out = out + sigma * np.asarray(z)
    return out


def ddpm_step(
    schedule: NoiseSchedule,
    x_t: Tensor,
    eps_hat: Tensor,
    t: int,
    eta: float,
    z: Optional[Tensor],
) -> Tensor:
    """Ancestral step (1/sqrt(a_t))(x_t - b_t/sqrt(1-ab_t) eps_hat) + sigma_t z.

    ``z`` is always supplied by the caller so paired trajectories can share it.
    """

    return _apply_step(schedule, x_t, eps_hat, t, eta, z, "ddpm")


def ddim_step(
    schedule: NoiseSchedule,
    x_t: Tensor,
    eps_hat: Tensor,
    t: int,
    eta: float,
    z: Optional[Tensor],
) -> Tensor:
    """Generalised implicit step towards the previous schedule index."""

    return _apply_step(schedule, x_t, eps_hat, t, eta, z, "ddim")
