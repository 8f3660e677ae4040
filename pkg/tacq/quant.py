"""Simulated post-training quantization of the noise-estimation network.

Weights are fake-quantized once when a :class:`QuantizedModel` is built;
activations are fake-quantized on the fly at the input of every weighted
layer once their ranges have been calibrated on sampler trajectories.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Tuple, Union

import numpy as np

from .diffusion import NoiseSchedule
from .errors import CalibrationError, QuantizationError, TensorShapeError
from .models import ActivationHook, NoiseModel, forward
from .samplers import SamplerConfig, sample
from .tensors import Rng, Tensor

logger = logging.getLogger(__name__)

__all__ = [
    "QuantParams",
    "QuantizedModel",
    "quantize",
    "minmax_params",
    "calibrate_weights",
    "calibrate_activations",
    "quantize_model",
    "quantized_forward",
    "WEIGHT_BITS",
    "ACT_BITS",
    "SCHEMES",
    "PASS_THROUGH_BITS",
]

WEIGHT_BITS = (2, 3, 4, 8, 32)
ACT_BITS = (6, 8, 32)
SCHEMES = ("minmax_symmetric", "minmax_asymmetric")
TIMESTEP_SAMPLING = ("uniform",)
PASS_THROUGH_BITS = 32
SCALE_FLOOR = 1e-8
DEFAULT_N_CALIB = 256


@dataclass(frozen=True, eq=False)
class QuantParams:
    """Uniform affine grid ``s * (q + z)`` with ``q`` in ``[q_min, q_max]``.

    ``scale`` and ``zero_point`` are scalars for per-tensor grids or 1-D
    arrays along ``axis`` for per-channel grids.  ``bits == 32`` marks the
    pass-through grid.
    """

    scale: Union[float, Tensor]
    zero_point: Union[int, Tensor]
    q_min: int
    q_max: int
    bits: int
    axis: Optional[int] = None

    def __post_init__(self) -> None:
        if self.bits == PASS_THROUGH_BITS:
            return
        if not self.q_min < self.q_max or self.q_max - self.q_min != 2**self.bits - 1:
            raise QuantizationError(
                f"Ungültiger Gitterbereich [{self.q_min}, {self.q_max}] für {self.bits} Bit"
            )
        if not np.all(np.asarray(self.scale) > 0):
            raise QuantizationError("Skalierung s muss > 0 sein")
        zero_point = np.asarray(self.zero_point, dtype=np.float64)
        if not np.all(zero_point == np.round(zero_point)):
            raise QuantizationError("Nullpunkt z muss ganzzahlig sein")

    @property
    def passthrough(self) -> bool:
        return self.bits == PASS_THROUGH_BITS

    @classmethod
    def identity(cls) -> "QuantParams":
        return cls(scale=1.0, zero_point=0, q_min=0, q_max=0, bits=PASS_THROUGH_BITS)

    def bounds(self) -> Tuple[Tensor, Tensor]:
        """Dequantized clip bounds ``s*(q_min+z)`` and ``s*(q_max+z)``."""

        scale = np.asarray(self.scale, dtype=np.float64)
        zero_point = np.asarray(self.zero_point, dtype=np.float64)
        return scale * (self.q_min + zero_point), scale * (self.q_max + zero_point)

    def to_dict(self) -> Dict[str, object]:
        return {
            "scale": np.asarray(self.scale, dtype=np.float64).tolist(),
            "zero_point": np.asarray(self.zero_point, dtype=np.float64).tolist(),
            "q_min": self.q_min,
            "q_max": self.q_max,
            "bits": self.bits,
            "axis": self.axis,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, object]) -> "QuantParams":
        scale = data["scale"]
        zero_point = data["zero_point"]
        if isinstance(scale, list):
            scale = np.asarray(scale, dtype=np.float64)
            zero_point = np.asarray(zero_point, dtype=np.float64)
        return cls(
            scale=scale,  # type: ignore[arg-type]
            zero_point=zero_point,  # type: ignore[arg-type]
            q_min=int(data["q_min"]),  # type: ignore[arg-type]
            q_max=int(data["q_max"]),  # type: ignore[arg-type]
            bits=int(data["bits"]),  # type: ignore[arg-type]
            axis=None if data.get("axis") is None else int(data["axis"]),  # type: ignore[arg-type]
        )


def _round_half_away(values: Tensor) -> Tensor:
    return np.sign(values) * np.floor(np.abs(values) + 0.5)


def _broadcast(value: Union[float, Tensor], ndim: int, axis: Optional[int]) -> Union[float, Tensor]:
    if axis is None:
        return value
    shape = [1] * ndim
    shape[axis] = -1
    return np.asarray(value, dtype=np.float64).reshape(shape)


def quantize(x: Tensor, p: QuantParams) -> Tensor:
    """Quantize-then-dequantize ``x``: ``s * (clip(round(x/s) - z, q_min, q_max) + z)``.

    Rounding is half away from zero.
    """

    x = np.asarray(x, dtype=np.float64)
    if p.passthrough:
        return x
    if p.axis is not None and not -x.ndim <= p.axis < x.ndim:
        raise TensorShapeError("quantize", x.shape)
    scale = _broadcast(p.scale, x.ndim, p.axis)
    zero_point = _broadcast(p.zero_point, x.ndim, p.axis)
    q = np.clip(_round_half_away(x / scale) - zero_point, p.q_min, p.q_max)
    return scale * (q + zero_point)


def minmax_params(low: float, high: float, bits: int, *, symmetric: bool) -> QuantParams:
    """Min/max calibration rule for a single range."""

    if bits == PASS_THROUGH_BITS:
        return QuantParams.identity()
    if bits < 2:
        raise QuantizationError(f"Mindestens 2 Bit erforderlich, erhalten: {bits}")
    if not (math.isfinite(low) and math.isfinite(high)) or low > high:
        raise QuantizationError(f"Ungültiger Wertebereich [{low}, {high}]")
    if symmetric:
        q_min, q_max = -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
        scale = max(abs(low), abs(high)) / q_max
        if scale < SCALE_FLOOR:
            logger.warning("Konstanter Tensor, Skalierung auf %.0e angehoben", SCALE_FLOOR)
            scale = SCALE_FLOOR
        return QuantParams(scale=scale, zero_point=0, q_min=q_min, q_max=q_max, bits=bits)

    q_min, q_max = 0, 2**bits - 1
    if high <= low:
        logger.warning("Konstanter Wertebereich [%g, %g] um %.0e erweitert", low, high, SCALE_FLOOR)
        high = low + SCALE_FLOOR
    scale = max((high - low) / (q_max - q_min), SCALE_FLOOR)
    zero_point = int(_round_half_away(np.asarray(low / scale))) - q_min
    return QuantParams(scale=scale, zero_point=zero_point, q_min=q_min, q_max=q_max, bits=bits)


def _channel_params(weight: Tensor, bits: int, axis: int, symmetric: bool) -> QuantParams:
    moved = np.moveaxis(weight, axis, 0).reshape(weight.shape[axis], -1)
    per_channel = [
        minmax_params(float(row.min()), float(row.max()), bits, symmetric=symmetric) for row in moved
    ]
    first = per_channel[0]
    return QuantParams(
        scale=np.array([item.scale for item in per_channel], dtype=np.float64),
        zero_point=np.array([item.zero_point for item in per_channel], dtype=np.float64),
        q_min=first.q_min,
        q_max=first.q_max,
        bits=bits,
        axis=axis,
    )


def _output_axis(weight: Tensor) -> int:
    # conv kernels are (out, in, kh, kw); dense weights are (in, out)
    return 0 if weight.ndim == 4 else weight.ndim - 1


def calibrate_weights(
    model: NoiseModel,
    scheme: str = "minmax_symmetric",
    bits: int = 8,
    *,
    per_channel: bool = False,
) -> Dict[str, QuantParams]:
    """Per-tensor (or per-output-channel) min/max grids for every weight tensor.

    Biases stay in full precision.
    """

    if scheme not in SCHEMES:
        raise QuantizationError(f"Unbekanntes Kalibrierungsschema '{scheme}'")
    symmetric = scheme == "minmax_symmetric"
    qparams: Dict[str, QuantParams] = {}
    for name in model.weight_names():
        weight = model.params[name]
        if not np.all(np.isfinite(weight)):
            raise QuantizationError(f"Gewicht {name} enthält nicht endliche Werte")
        if bits == PASS_THROUGH_BITS:
            qparams[name] = QuantParams.identity()
        elif per_channel:
            qparams[name] = _channel_params(weight, bits, _output_axis(weight), symmetric)
        else:
            qparams[name] = minmax_params(float(weight.min()), float(weight.max()), bits, symmetric=symmetric)
    return qparams


@dataclass
class QuantizedModel:
    """Fake-quantized view of a :class:`NoiseModel`."""

    base: NoiseModel
    weight_qparams: Dict[str, QuantParams]
    act_qparams: Dict[str, QuantParams] = field(default_factory=dict)
    act_ranges: Dict[str, Tuple[float, float]] = field(default_factory=dict)
    weight_bits: int = 8
    act_bits: int = 8
    scheme: str = "minmax_symmetric"
    per_channel: bool = False
    calibrated: bool = False
    _weights: Dict[str, Tensor] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        if not self._weights:
            self._weights = {
                name: quantize(value, self.weight_qparams[name]) if name in self.weight_qparams else value
                for name, value in self.base.params.items()
            }

    @property
    def io_shape(self) -> Tuple[int, int, int]:
        return self.base.io_shape

    @property
    def passthrough(self) -> bool:
        return self.weight_bits == PASS_THROUGH_BITS and self.act_bits == PASS_THROUGH_BITS

    def dequantized_weights(self) -> Dict[str, Tensor]:
        return dict(self._weights)

    def _activation_hook(self, hook: Optional[ActivationHook]) -> ActivationHook:
        def apply(name: str, value: Tensor) -> Tensor:
            if hook is not None:
                value = hook(name, value)
            params = self.act_qparams.get(name)
            if params is None:
                if self.act_bits == PASS_THROUGH_BITS:
                    return value
                raise QuantizationError(f"Kein Aktivierungsbereich für '{name}' kalibriert")
            return quantize(value, params)

        return apply

    def forward(self, x: Tensor, t: Tensor, hook: Optional[ActivationHook] = None) -> Tensor:
        if not self.calibrated:
            raise QuantizationError("Quantisiertes Modell ist noch nicht kalibriert")
        return forward(self.base, x, t, weights=self._weights, hook=self._activation_hook(hook))

    def to_dict(self) -> Dict[str, object]:
        return {
            "weight_bits": self.weight_bits,
            "act_bits": self.act_bits,
            "scheme": self.scheme,
            "per_channel": self.per_channel,
            "calibrated": self.calibrated,
            "weight_qparams": {name: p.to_dict() for name, p in self.weight_qparams.items()},
            "act_qparams": {name: p.to_dict() for name, p in self.act_qparams.items()},
            "act_ranges": {name: list(bounds) for name, bounds in self.act_ranges.items()},
        }


def quantize_model(
    model: NoiseModel,
    weight_bits: int = 8,
    act_bits: int = 8,
    *,
    scheme: str = "minmax_symmetric",
    per_channel: bool = False,
) -> QuantizedModel:
    """Quantize the weights of *model*; activations still need calibration."""

    if weight_bits not in WEIGHT_BITS:
        raise QuantizationError(f"Gewichtsbits {weight_bits} nicht unterstützt, erlaubt: {WEIGHT_BITS}")
    if act_bits not in ACT_BITS:
        raise QuantizationError(f"Aktivierungsbits {act_bits} nicht unterstützt, erlaubt: {ACT_BITS}")
    return QuantizedModel(
        base=model,
        weight_qparams=calibrate_weights(model, scheme, weight_bits, per_channel=per_channel),
        weight_bits=weight_bits,
        act_bits=act_bits,
        scheme=scheme,
        per_channel=per_channel,
        calibrated=act_bits == PASS_THROUGH_BITS,
    )


def calibrate_activations(
    qmodel: QuantizedModel,
    schedule: NoiseSchedule,
    sampler_cfg: SamplerConfig,
    n_calib: int = DEFAULT_N_CALIB,
    timestep_sampling: str = "uniform",
    rng: Optional[Rng] = None,
) -> QuantizedModel:
    """Record activation ranges on full-precision sampler trajectories.

    Evaluation ``j`` uses grid position ``j % M`` of chain ``j // M``; every
    chain has its own derived seed, so a larger ``n_calib`` only adds points.
    The weight-quantized network is observed on those inputs.
    """

    if n_calib < 1:
        raise CalibrationError(f"n_calib muss >= 1 sein, erhalten: {n_calib}")
    if timestep_sampling not in TIMESTEP_SAMPLING:
        raise CalibrationError(f"Unbekannte Zeitschritt-Auswahl '{timestep_sampling}'")
    if qmodel.act_bits == PASS_THROUGH_BITS:
        return replace(qmodel, act_qparams={}, calibrated=True, _weights=qmodel.dequantized_weights())

    rng = rng or Rng(0)
    cfg = replace(sampler_cfg, correction=None, record_trajectory=True, record_activations=False)
    grid = cfg.resolve_grid(schedule)
    steps = grid.n_steps
    chains = -(-n_calib // steps)
    trajectories: List[Tensor] = []
    for chain in range(chains):
        run = sample(qmodel.base, schedule, cfg, 1, rng.spawn(f"calib/{chain}"))
        assert run.trajectory is not None
        trajectories.append(run.trajectory)

    positions = np.arange(n_calib) % steps
    inputs = np.concatenate([trajectories[j // steps][positions[j]] for j in range(n_calib)], axis=0)
    timesteps = grid.timesteps[positions]

    ranges: Dict[str, Tuple[float, float]] = {}

    def observe(name: str, value: Tensor) -> Tensor:
        low, high = float(value.min()), float(value.max())
        if name in ranges:
            low, high = min(low, ranges[name][0]), max(high, ranges[name][1])
        ranges[name] = (low, high)
        return value

    forward(qmodel.base, inputs, timesteps, weights=qmodel.dequantized_weights(), hook=observe)
    if not ranges:
        raise CalibrationError("Keine Aktivierungen beobachtet")
    act_qparams = {
        name: minmax_params(low, high, qmodel.act_bits, symmetric=False) for name, (low, high) in ranges.items()
    }
    for name, (low, high) in ranges.items():
        logger.debug("Aktivierung %s: Bereich [%.4g, %.4g]", name, low, high)
    logger.info(
        "Aktivierungen kalibriert: %d Auswertungen, %d Messpunkte, A%d", n_calib, len(act_qparams), qmodel.act_bits
    )
    return replace(
        qmodel,
        act_qparams=act_qparams,
        act_ranges=ranges,
        calibrated=True,
        _weights=qmodel.dequantized_weights(),
    )


def quantized_forward(qmodel: QuantizedModel, x: Tensor, t: Tensor) -> Tensor:
    """Evaluate the fake-quantized network; requires calibrated activations."""

    return qmodel.forward(x, t)
