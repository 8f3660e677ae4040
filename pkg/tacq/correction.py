"""Timestep-aware correction of quantized diffusion sampling.

Two tables are pre-calculated on paired full-precision/quantized
trajectories that share their initial noise and every per-step draw:

* ``K`` rescales the quantized noise estimate channel-wise.  Each row is
  the closed-form minimiser of a convex loss mixing the masked mean squared
  error, the squared relative error (rQNSR) and a pull towards ``k = 1``.
* ``B`` is the batch-mean element-wise discrepancy between the quantized and
  the full-precision state, subtracted from the quantized state before the
  next step.

Row ``i`` of ``K`` belongs to evaluation ``i`` of the grid; row ``i`` of
``B`` corrects the state entering step ``i`` and row ``M`` the final output.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from .diffusion import NoiseSchedule, TimestepGrid
from .errors import CorrectionError, SamplerError, TensorShapeError
from .models import NoiseEstimator
from .samplers import (
    SamplerConfig,
    ddim_coefficients,
    dpm_midpoint,
    dpm_step_constants,
    dpm_update,
    evaluate,
)
from .tensors import Rng, Tensor

logger = logging.getLogger(__name__)

__all__ = [
    "CorrectionConfig",
    "CorrectionTable",
    "PairedTrace",
    "VARIANTS",
    "ABLATION_VARIANTS",
    "variant_config",
    "rqnsr",
    "reconstruction_loss",
    "solve_k",
    "compute_threshold",
    "build_mask",
    "compute_bias",
    "precalculate",
    "corrected_eps",
    "record_paired_trace",
]

VARIANTS = ("baseline", "ibc", "ner-ibc", "tac", "first-step", "est-bias", "eq22")
ABLATION_VARIANTS = ("baseline", "first-step", "ner-ibc", "tac")


@dataclass
class CorrectionConfig:
    """Loss weights, mask threshold and variant switches."""

    lambda1: float = 0.5
    lambda2: float = 1e-2
    k_threshold: float = 1.0
    calib_batch: int = 64
    eps_floor: float = 1e-8
    apply_ibc: bool = True
    apply_ner: bool = True
    first_step_only: bool = False
    estimation_bias_only: bool = False
    eq22_literal_placement: bool = False
    signed_mask: bool = False
    sequential: bool = True
    dpm_apply_ibc: bool = False

    def validate(self) -> None:
        if not 0.0 <= self.lambda1 < 1.0:
            raise CorrectionError(f"lambda1 muss in [0, 1) liegen, erhalten: {self.lambda1}")
        if not self.lambda2 > 0.0:
            raise CorrectionError(f"lambda2 muss > 0 sein, erhalten: {self.lambda2}")
        if self.k_threshold < 0.0:
            raise CorrectionError(f"k_threshold muss >= 0 sein, erhalten: {self.k_threshold}")
        if self.calib_batch < 1:
            raise CorrectionError(f"calib_batch muss >= 1 sein, erhalten: {self.calib_batch}")
        if not self.eps_floor >= 0.0:
            raise CorrectionError(f"eps_floor muss >= 0 sein, erhalten: {self.eps_floor}")

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, object]) -> "CorrectionConfig":
        return cls(**data)  # type: ignore[arg-type]


_VARIANT_FLAGS: Dict[str, Dict[str, bool]] = {
    "ibc": {"apply_ner": False, "apply_ibc": True},
    "ner-ibc": {"apply_ner": True, "apply_ibc": True, "first_step_only": True},
    "tac": {"apply_ner": True, "apply_ibc": True},
    "first-step": {"apply_ner": False, "apply_ibc": True, "first_step_only": True},
    "est-bias": {"apply_ner": True, "apply_ibc": False, "estimation_bias_only": True},
    "eq22": {"apply_ner": True, "apply_ibc": True, "eq22_literal_placement": True},
}


def variant_config(variant: str, base: Optional[CorrectionConfig] = None) -> Optional[CorrectionConfig]:
    """Correction settings for a named variant; ``baseline`` means no table."""

    if variant not in VARIANTS:
        raise CorrectionError(f"Unbekannte Variante '{variant}', erlaubt: {', '.join(VARIANTS)}")
    if variant == "baseline":
        return None
    settings = (base or CorrectionConfig()).to_dict()
    settings.update(
        apply_ner=False,
        apply_ibc=False,
        first_step_only=False,
        estimation_bias_only=False,
        eq22_literal_placement=False,
    )
    settings.update(_VARIANT_FLAGS[variant])
    return CorrectionConfig(**settings)  # type: ignore[arg-type]


@dataclass(eq=False)
class CorrectionTable:
    """Pre-calculated ``K``/``B`` tables bound to one timestep grid.

    In estimation-bias mode the rows of ``B`` hold the mean estimation error
    of each evaluation instead of an input bias and the state is never
    corrected.
    """

    K: Tensor
    K_mid: Tensor
    B: Tensor
    tau: Tensor
    mask_coverage: Tensor
    config: CorrectionConfig
    grid: TimestepGrid
    variant: str = "tac"

    def __post_init__(self) -> None:
        steps = self.grid.n_steps
        if self.K.ndim != 2 or self.K.shape[0] != steps:
            raise TensorShapeError("CorrectionTable.K", self.K.shape, (steps, -1))
        if self.K_mid.shape != self.K.shape:
            raise TensorShapeError("CorrectionTable.K_mid", self.K_mid.shape, self.K.shape)
        if self.B.ndim != 4 or self.B.shape[0] != steps + 1 or self.B.shape[1] != self.K.shape[1]:
            raise TensorShapeError("CorrectionTable.B", self.B.shape, (steps + 1, self.K.shape[1], -1, -1))
        for name in ("K", "K_mid", "B"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise CorrectionError(f"Tabelle {name} enthält nicht endliche Werte")

    @property
    def io_shape(self) -> Tuple[int, int, int]:
        return tuple(int(dim) for dim in self.B.shape[1:])  # type: ignore[return-value]

    @property
    def n_steps(self) -> int:
        return self.grid.n_steps

    @classmethod
    def identity(
        cls,
        grid: TimestepGrid,
        io_shape: Tuple[int, int, int],
        config: Optional[CorrectionConfig] = None,
    ) -> "CorrectionTable":
        steps = grid.n_steps
        channels = io_shape[0]
        return cls(
            K=np.ones((steps, channels)),
            K_mid=np.ones((steps, channels)),
            B=np.zeros((steps + 1,) + tuple(io_shape)),
            tau=np.zeros(steps),
            mask_coverage=np.zeros(steps),
            config=config or CorrectionConfig(),
            grid=grid,
            variant="identity",
        )

    def correct_state(self, x: Tensor, position: int) -> Tensor:
        """Subtract the input bias for grid position *position* (``0..M``)."""

        if self.config.estimation_bias_only:
            return x
        return x - self.B[position]

    def correct_eps(self, eps_hat: Tensor, position: int, *, midpoint: bool = False) -> Tensor:
        """Channel-wise scaling by ``K`` (or ``K_mid`` for the 2S midpoint)."""

        k = (self.K_mid if midpoint else self.K)[position]
        eps = eps_hat * k[None, :, None, None]
        if self.config.estimation_bias_only and not midpoint:
            eps = eps - self.B[position]
        return eps

    def noise_scale(self, sigma: float) -> float:
        """Coefficient of ``z`` in the corrected step."""

        if self.config.eq22_literal_placement and sigma > 0.0:
            return 1.0
        return sigma

    def locate(self, t: float) -> Tuple[int, bool]:
        """Grid position of *t* and whether it is a 2S midpoint."""

        hits = np.nonzero(self.grid.timesteps[: self.n_steps] == t)[0]
        if hits.size:
            return int(hits[0]), False
        if self.grid.midpoints is not None:
            hits = np.nonzero(self.grid.midpoints == t)[0]
            if hits.size:
                return int(hits[0]), True
        raise CorrectionError("Zeitschritt liegt nicht auf dem Gitter der Tabelle", timestep=float(t))

    def summary(self) -> Dict[str, float]:
        return {
            "k_min": float(self.K.min()),
            "k_max": float(self.K.max()),
            "b_abs_max": float(np.abs(self.B).max()),
            "coverage_min": float(self.mask_coverage.min()),
            "coverage_max": float(self.mask_coverage.max()),
        }

    def to_dict(self) -> Dict[str, object]:
        return {
            "variant": self.variant,
            "config": self.config.to_dict(),
            "grid": self.grid.to_dict(),
            "io_shape": list(self.io_shape),
        }


@dataclass(eq=False)
class PairedTrace:
    """Lock-stepped full-precision and quantized DDIM trajectories.

    ``x`` and ``x_hat`` have ``M + 1`` rows (``x_hat`` before correction),
    ``x_hat_in`` holds the states actually fed to step ``i`` and, in row
    ``M``, the corrected final output.  ``noise_scales`` stores the ``z``
    coefficients of both lanes per step.
    """

    x: Tensor
    x_hat: Tensor
    x_hat_in: Tensor
    eps: Tensor
    eps_hat: Tensor
    eps_used: Tensor
    z: Tensor
    noise_scales: Tensor
    grid: TimestepGrid
    eta: float
    form: str
    shared_z: bool = True

    @property
    def n_steps(self) -> int:
        return int(self.eps.shape[0])

    def to_dict(self) -> Dict[str, object]:
        return {
            "grid": self.grid.to_dict(),
            "eta": self.eta,
            "form": self.form,
            "shared_z": self.shared_z,
            "n": int(self.x.shape[1]),
        }


# ----------------------------------------------------------------------
# loss and closed form
def _as_batch(values: Tensor) -> Tensor:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 3:
        return values[None]
    if values.ndim != 4:
        raise TensorShapeError("Korrektur", values.shape)
    return values


def rqnsr(eps_hat: Tensor, eps: Tensor, channel: int) -> float:
    """sqrt(sum (eps_hat - eps)^2 / sum eps^2) over one channel."""

    eps_hat = _as_batch(eps_hat)
    eps = _as_batch(eps)
    if eps_hat.shape != eps.shape:
        raise TensorShapeError("rqnsr", eps_hat.shape, eps.shape)
    if not 0 <= channel < eps.shape[1]:
        raise CorrectionError("Kanal existiert nicht", channel=channel)
    reference = float(np.sum(eps[:, channel] ** 2))
    if reference <= 0.0:
        raise CorrectionError("rQNSR undefiniert: Referenzkanal ist null", channel=channel)
    return float(np.sqrt(np.sum((eps_hat[:, channel] - eps[:, channel]) ** 2) / reference))


def _channel_moments(
    eps_hat: Tensor, eps: Tensor, mask: Tensor, channel: int, eps_floor: float
) -> Optional[Tuple[int, float, float, float, float, float]]:
    """Masked sums ``(n, Sxx, Sxy, Syy)`` plus the rQNSR-term ``(Sxx', Sxy', Syy')`` ratios.

    Returns ``None`` when the masked support is empty.
    """

    keep = mask[:, channel] > 0
    count = int(np.count_nonzero(keep))
    if count == 0:
        return None
    x = eps_hat[:, channel][keep]
    y = eps[:, channel][keep]
    relative = np.abs(y) > eps_floor
    y_rel = y[relative]
    x_rel = x[relative]
    denominator = float(np.sum(y_rel * y_rel))
    if denominator > 0.0:
        rel_xx = float(np.sum(x_rel * x_rel)) / denominator
        rel_xy = float(np.sum(x_rel * y_rel)) / denominator
    else:
        rel_xx = rel_xy = 0.0
    return count, float(np.sum(x * x)), float(np.sum(x * y)), float(np.sum(y * y)), rel_xx, rel_xy


def reconstruction_loss(
    k: float,
    eps_hat: Tensor,
    eps: Tensor,
    channel: int,
    cfg: CorrectionConfig,
    mask: Optional[Tensor] = None,
) -> float:
    """Masked, batch-aggregated loss of scaling ``eps_hat`` by *k* on one channel.

    ``(1 - l1) * mean((k eps_hat - eps)^2) + l1 * rQNSR(k eps_hat, eps)^2 + l2 (k - 1)^2``
    where pixels with ``|eps| <= eps_floor`` are left out of the rQNSR term.
    """

    eps_hat = _as_batch(eps_hat)
    eps = _as_batch(eps)
    if eps_hat.shape != eps.shape:
        raise TensorShapeError("reconstruction_loss", eps_hat.shape, eps.shape)
    mask = np.ones_like(eps) if mask is None else _as_batch(mask)
    keep = mask[:, channel] > 0
    if not np.any(keep):
        raise CorrectionError("Leere Maske", channel=channel)
    residual = k * eps_hat[:, channel][keep] - eps[:, channel][keep]
    reference = eps[:, channel][keep]
    relative = np.abs(reference) > cfg.eps_floor
    mse = float(np.mean(residual * residual))
    denominator = float(np.sum(reference[relative] ** 2))
    ratio = float(np.sum(residual[relative] ** 2)) / denominator if denominator > 0.0 else 0.0
    return (1.0 - cfg.lambda1) * mse + cfg.lambda1 * ratio + cfg.lambda2 * (k - 1.0) ** 2


def solve_k(eps_hat: Tensor, eps: Tensor, mask: Tensor, cfg: CorrectionConfig) -> Tensor:
    """Closed-form per-channel minimiser of :func:`reconstruction_loss`.

    The loss is ``a k^2 - 2 b k + c`` with ``a = (1-l1) Sxx/n + l1 Sxx'/Syy' + l2``
    and ``b = (1-l1) Sxy/n + l1 Sxy'/Syy' + l2``, so ``k = b / a``.  Channels
    whose mask is empty fall back to ``k = 1``.
    """

    if not cfg.lambda2 > 0.0:
        raise CorrectionError(f"lambda2 muss > 0 sein, erhalten: {cfg.lambda2}")
    eps_hat = _as_batch(eps_hat)
    eps = _as_batch(eps)
    mask = _as_batch(mask)
    if eps_hat.shape != eps.shape or mask.shape != eps.shape:
        raise TensorShapeError("solve_k", eps_hat.shape, eps.shape)
    l1, l2 = cfg.lambda1, cfg.lambda2
    k = np.ones(eps.shape[1])
    for channel in range(eps.shape[1]):
        moments = _channel_moments(eps_hat, eps, mask, channel, cfg.eps_floor)
        if moments is None:
            logger.warning("Leere Maske in Kanal %d, K = 1", channel)
            continue
        count, sxx, sxy, _, rel_xx, rel_xy = moments
        a = (1.0 - l1) * sxx / count + l1 * rel_xx + l2
        b = (1.0 - l1) * sxy / count + l1 * rel_xy + l2
        value = b / a
        if not np.isfinite(value):
            raise CorrectionError("Nicht endliche Statistik beim Lösen von K", channel=channel)
        k[channel] = value
    return k


def compute_threshold(eps: Tensor, k_threshold: float) -> float:
    """``k_threshold * mean(|eps|)`` over batch, channels and pixels."""

    eps = np.asarray(eps, dtype=np.float64)
    if eps.size == 0:
        return 0.0
    return float(k_threshold) * float(np.mean(np.abs(eps)))


def build_mask(eps: Tensor, tau: float, signed: bool = False) -> Tensor:
    """Element mask ``|eps| > tau`` (``eps > tau`` when *signed*)."""

    eps = np.asarray(eps, dtype=np.float64)
    values = eps if signed else np.abs(eps)
    return (values > tau).astype(np.float64)


def compute_bias(x_hat_batch: Tensor, x_batch: Tensor) -> Tensor:
    """Batch mean of ``x_hat - x``."""

    x_hat_batch = np.asarray(x_hat_batch, dtype=np.float64)
    x_batch = np.asarray(x_batch, dtype=np.float64)
    if x_hat_batch.shape != x_batch.shape:
        raise TensorShapeError("compute_bias", x_hat_batch.shape, x_batch.shape)
    if x_batch.ndim < 1 or x_batch.shape[0] == 0:
        raise CorrectionError("compute_bias benötigt mindestens eine Probe")
    return np.mean(x_hat_batch - x_batch, axis=0)


# ----------------------------------------------------------------------
# pre-calculation
def _active(cfg: CorrectionConfig, position: int) -> bool:
    return not cfg.first_step_only or position == 0


def _reconstruct(
    eps_hat: Tensor, eps: Tensor, cfg: CorrectionConfig, active: bool, t: float
) -> Tuple[Tensor, float, float]:
    tau = compute_threshold(eps, cfg.k_threshold)
    mask = build_mask(eps, tau, cfg.signed_mask)
    coverage = float(mask.mean())
    if not (cfg.apply_ner and active):
        return np.ones(eps.shape[1]), tau, coverage
    try:
        k = solve_k(eps_hat, eps, mask, cfg)
    except CorrectionError as exc:
        raise CorrectionError(exc.detail, timestep=t, channel=exc.channel) from exc
    return k, tau, coverage


def _check_pair(fp_model: NoiseEstimator, qmodel: NoiseEstimator) -> None:
    if tuple(fp_model.io_shape) != tuple(qmodel.io_shape):
        raise CorrectionError(
            f"Modelle haben unterschiedliche Formen: {fp_model.io_shape} vs. {qmodel.io_shape}"
        )
    if getattr(qmodel, "calibrated", True) is False:
        raise CorrectionError("Quantisiertes Modell ist nicht kalibriert")


def precalculate(
    fp_model: NoiseEstimator,
    qmodel: NoiseEstimator,
    schedule: NoiseSchedule,
    grid: TimestepGrid,
    sampler: SamplerConfig,
    cfg: CorrectionConfig,
    rng: Rng,
    *,
    variant: str = "tac",
) -> CorrectionTable:
    """Run ``S`` paired trajectories and collect ``K``, ``B``, ``tau`` and mask coverage.

    In the default sequential mode the quantized lane advances in corrected
    form, so every row is estimated on the inputs inference will see.
    """

    cfg.validate()
    _check_pair(fp_model, qmodel)
    if grid.kind != sampler.kind:
        raise SamplerError(f"Gitterart '{grid.kind}' passt nicht zu Sampler '{sampler.kind}'")
    grid.check_bounds(schedule)
    logger.info(
        "Vorberechnung %s: %d Schritte, S=%d, lambda1=%.2f, lambda2=%.0e",
        variant,
        grid.n_steps,
        cfg.calib_batch,
        cfg.lambda1,
        cfg.lambda2,
    )
    if grid.kind == "ddim":
        tables = _precalculate_ddim(fp_model, qmodel, schedule, grid, sampler, cfg, rng)
    else:
        tables = _precalculate_dpm(fp_model, qmodel, schedule, grid, cfg, rng)
    table = CorrectionTable(config=cfg, grid=grid, variant=variant, **tables)
    logger.info(
        "Tabelle fertig: K in [%.4f, %.4f], Maskenabdeckung in [%.3f, %.3f]",
        table.K.min(),
        table.K.max(),
        table.mask_coverage.min(),
        table.mask_coverage.max(),
    )
    return table


def _empty_tables(steps: int, io_shape: Tuple[int, ...]) -> Dict[str, Tensor]:
    return {
        "K": np.ones((steps, io_shape[0])),
        "K_mid": np.ones((steps, io_shape[0])),
        "B": np.zeros((steps + 1,) + tuple(io_shape)),
        "tau": np.zeros(steps),
        "mask_coverage": np.zeros(steps),
    }


def _precalculate_ddim(
    fp_model: NoiseEstimator,
    qmodel: NoiseEstimator,
    schedule: NoiseSchedule,
    grid: TimestepGrid,
    sampler: SamplerConfig,
    cfg: CorrectionConfig,
    rng: Rng,
) -> Dict[str, Tensor]:
    respaced = schedule.respace(grid.timesteps.astype(np.int64))
    shape = (cfg.calib_batch,) + tuple(fp_model.io_shape)
    tables = _empty_tables(grid.n_steps, fp_model.io_shape)
    K, B = tables["K"], tables["B"]
    state_bias = cfg.apply_ibc and not cfg.estimation_bias_only

    x = rng.normal(shape)
    x_hat = x.copy()
    for position, t in enumerate(grid.timesteps):
        active = _active(cfg, position)
        eps = evaluate(fp_model, x, t)
        eps_hat = evaluate(qmodel, x_hat, t)
        K[position], tables["tau"][position], tables["mask_coverage"][position] = _reconstruct(
            eps_hat, eps, cfg, active, float(t)
        )
        eps_used = eps_hat * K[position][None, :, None, None]
        if cfg.estimation_bias_only and active:
            B[position] = compute_bias(eps_used, eps)
            eps_used = eps_used - B[position]
        if not cfg.sequential:
            eps_used = eps_hat

        c_x, c_eps, sigma = ddim_coefficients(respaced, position, sampler.eta, sampler.form)
        x_next = c_x * x - c_eps * eps
        x_hat_next = c_x * x_hat - c_eps * eps_used
        if sigma > 0.0:
            z = rng.normal(shape)
            x_next = x_next + sigma * z
            scale = 1.0 if cfg.eq22_literal_placement else sigma
            x_hat_next = x_hat_next + scale * z
        if state_bias and active:
            B[position + 1] = compute_bias(x_hat_next, x_next)
        if cfg.sequential and state_bias:
            x_hat_next = x_hat_next - B[position + 1]
        logger.debug(
            "t=%g: K in [%.4f, %.4f], tau=%.4f, Abdeckung %.3f",
            t,
            K[position].min(),
            K[position].max(),
            tables["tau"][position],
            tables["mask_coverage"][position],
        )
        x, x_hat = x_next, x_hat_next
    return tables


def _precalculate_dpm(
    fp_model: NoiseEstimator,
    qmodel: NoiseEstimator,
    schedule: NoiseSchedule,
    grid: TimestepGrid,
    cfg: CorrectionConfig,
    rng: Rng,
) -> Dict[str, Tensor]:
    shape = (cfg.calib_batch,) + tuple(fp_model.io_shape)
    tables = _empty_tables(grid.n_steps, fp_model.io_shape)
    K, K_mid, B = tables["K"], tables["K_mid"], tables["B"]
    state_bias = cfg.apply_ibc and cfg.dpm_apply_ibc and not cfg.estimation_bias_only

    x = rng.normal(shape)
    x_hat = x.copy()
    for i in range(1, grid.n_steps + 1):
        position = i - 1
        active = _active(cfg, position)
        c = dpm_step_constants(schedule, grid, i)
        eps = evaluate(fp_model, x, c.t_prev)
        eps_hat = evaluate(qmodel, x_hat, c.t_prev)
        K[position], tables["tau"][position], tables["mask_coverage"][position] = _reconstruct(
            eps_hat, eps, cfg, active, c.t_prev
        )
        eps_used = eps_hat * K[position][None, :, None, None]
        if cfg.estimation_bias_only and active:
            B[position] = compute_bias(eps_used, eps)
            eps_used = eps_used - B[position]
        if not cfg.sequential:
            eps_used = eps_hat

        x_theta, u = dpm_midpoint(x, eps, c)
        x_hat_theta, u_hat = dpm_midpoint(x_hat, eps_used, c)
        eps_mid = evaluate(fp_model, u, c.s)
        eps_mid_hat = evaluate(qmodel, u_hat, c.s)
        K_mid[position], _, _ = _reconstruct(eps_mid_hat, eps_mid, cfg, active, c.s)
        eps_mid_used = eps_mid_hat * K_mid[position][None, :, None, None] if cfg.sequential else eps_mid_hat

        x_next = dpm_update(x, x_theta, u, eps_mid, c)
        x_hat_next = dpm_update(x_hat, x_hat_theta, u_hat, eps_mid_used, c)
        if state_bias and active:
            B[i] = compute_bias(x_hat_next, x_next)
        if cfg.sequential and state_bias:
            x_hat_next = x_hat_next - B[i]
        x, x_hat = x_next, x_hat_next
    return tables


def corrected_eps(qmodel: NoiseEstimator, table: CorrectionTable, x_hat: Tensor, t: float) -> Tensor:
    """``K_t * eps_hat(x_hat - B_t, t)`` for a time on the table's grid."""

    position, midpoint = table.locate(t)
    if tuple(np.shape(x_hat)[1:]) != table.io_shape:
        raise TensorShapeError("corrected_eps", np.shape(x_hat), (-1,) + table.io_shape)
    x_in = x_hat if midpoint else table.correct_state(x_hat, position)
    eps_hat = evaluate(qmodel, np.asarray(x_in, dtype=np.float64), t)
    return table.correct_eps(eps_hat, position, midpoint=midpoint)


def record_paired_trace(
    fp_model: NoiseEstimator,
    qmodel: NoiseEstimator,
    schedule: NoiseSchedule,
    cfg: SamplerConfig,
    n: int,
    rng: Rng,
    table: Optional[CorrectionTable] = None,
) -> PairedTrace:
    """Lock-stepped DDIM lanes sharing ``x_T`` and every ``z``."""

    _check_pair(fp_model, qmodel)
    if cfg.kind != "ddim":
        raise SamplerError("Gepaarte Spuren werden nur für DDIM aufgezeichnet")
    if n < 1:
        raise SamplerError(f"n muss >= 1 sein, erhalten: {n}")
    grid = cfg.resolve_grid(schedule)
    table = table if table is not None else cfg.correction
    if table is not None and not table.grid.matches(grid):
        raise SamplerError("Korrekturtabelle wurde für ein anderes Zeitgitter berechnet")
    respaced = schedule.respace(grid.timesteps.astype(np.int64))
    shape = (n,) + tuple(fp_model.io_shape)
    steps = grid.n_steps

    x = rng.normal(shape)
    x_hat = x.copy()
    xs, x_hats, x_ins = [x], [x_hat], []
    eps_rows, eps_hat_rows, used_rows, z_rows = [], [], [], []
    noise_scales = np.zeros((steps, 2))
    for position, t in enumerate(grid.timesteps):
        x_in = table.correct_state(x_hat, position) if table is not None else x_hat
        eps = evaluate(fp_model, x, t)
        eps_hat = evaluate(qmodel, x_in, t)
        eps_used = table.correct_eps(eps_hat, position) if table is not None else eps_hat
        c_x, c_eps, sigma = ddim_coefficients(respaced, position, cfg.eta, cfg.form)
        x_next = c_x * x - c_eps * eps
        x_hat_next = c_x * x_in - c_eps * eps_used
        z = np.zeros(shape)
        if sigma > 0.0:
            z = rng.normal(shape)
            scale = table.noise_scale(sigma) if table is not None else sigma
            x_next = x_next + sigma * z
            x_hat_next = x_hat_next + scale * z
            noise_scales[position] = (sigma, scale)
        x_ins.append(x_in)
        eps_rows.append(eps)
        eps_hat_rows.append(eps_hat)
        used_rows.append(eps_used)
        z_rows.append(z)
        x, x_hat = x_next, x_hat_next
        xs.append(x)
        x_hats.append(x_hat)
    x_ins.append(table.correct_state(x_hat, steps) if table is not None else x_hat)

    return PairedTrace(
        x=np.stack(xs),
        x_hat=np.stack(x_hats),
        x_hat_in=np.stack(x_ins),
        eps=np.stack(eps_rows),
        eps_hat=np.stack(eps_hat_rows),
        eps_used=np.stack(used_rows),
        z=np.stack(z_rows),
        noise_scales=noise_scales,
        grid=grid,
        eta=cfg.eta,
        form=cfg.form,
        shared_z=bool(np.all(noise_scales[:, 0] == noise_scales[:, 1])),
    )
