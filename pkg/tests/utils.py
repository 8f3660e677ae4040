"""Utilities shared by the test-suite."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Mapping, Optional, Tuple

import numpy as np

from tacq.diffusion import NoiseSchedule, make_linear_schedule
from tacq.models import NoiseModel, TrainConfig, init_model, make_toy_dataset, train
from tacq.quant import QuantizedModel, calibrate_activations, quantize_model
from tacq.samplers import SamplerConfig
from tacq.tensors import Rng

SMALL_T = 100

SMALL_CONFIG = {
    "dataset.kind": "gauss2d",
    "dataset.n": 512,
    "schedule.T": SMALL_T,
    "train.steps": 60,
    "train.batch": 32,
    "train.log_every": 10,
    "quant.n_calib": 16,
    "correction.calib_batch": 16,
    "sampler.steps": 8,
    "eval.n_samples": 64,
    "eval.n_reference": 64,
    "eval.projections": 8,
}


@dataclass
class LinearModel:
    """Noise estimator ``eps(x, t) = c * x`` with a closed-form probability flow."""

    c: float = 0.5
    io_shape: Tuple[int, int, int] = (1, 1, 1)

    def forward(self, x: np.ndarray, t: np.ndarray) -> np.ndarray:
        return self.c * np.asarray(x, dtype=np.float64)


@dataclass
class ScaledModel:
    """Wraps an estimator and scales (and shifts) its output."""

    base: object
    factor: float = 1.0
    shift: float = 0.0

    @property
    def io_shape(self) -> Tuple[int, int, int]:
        return self.base.io_shape  # type: ignore[attr-defined]

    def forward(self, x: np.ndarray, t: np.ndarray) -> np.ndarray:
        return self.factor * self.base.forward(x, t) + self.shift  # type: ignore[attr-defined]


def small_schedule(T: int = SMALL_T) -> NoiseSchedule:
    return make_linear_schedule(T)


def ddim_sampler(steps: int = 10, eta: float = 0.0, form: str = "ddim") -> SamplerConfig:
    return SamplerConfig(kind="ddim", steps=steps, eta=eta, form=form)


def dpm_sampler(steps: int = 10, spacing: str = "logsnr") -> SamplerConfig:
    return SamplerConfig(kind="dpmpp_2s", steps=steps, spacing=spacing)


def random_model(arch: str = "mlp", io_shape: Tuple[int, int, int] = (2, 1, 1), seed: int = 0) -> NoiseModel:
    return init_model(arch, io_shape, seed)


@lru_cache(maxsize=None)
def trained_model(steps: int = 200) -> NoiseModel:
    """A small gauss2d model; cached because several modules share it."""

    schedule = small_schedule()
    data = make_toy_dataset("gauss2d", 512, seed=1)
    model = init_model("mlp", (2, 1, 1), seed=2)
    return train(model, data, schedule, TrainConfig(steps=steps, batch=64, seed=3, log_every=20))


def calibrated_qmodel(
    model: NoiseModel,
    schedule: NoiseSchedule,
    weight_bits: int = 3,
    act_bits: int = 8,
    *,
    sampler: Optional[SamplerConfig] = None,
    n_calib: int = 32,
    per_channel: bool = False,
) -> QuantizedModel:
    qmodel = quantize_model(model, weight_bits, act_bits, per_channel=per_channel)
    return calibrate_activations(qmodel, schedule, sampler or ddim_sampler(), n_calib, rng=Rng(11))


def write_config(path: Path, values: Optional[Mapping[str, object]] = None, **extra: object) -> Path:
    """Write a ``dotted.key = value`` file based on :data:`SMALL_CONFIG`."""

    merged = dict(SMALL_CONFIG if values is None else values)
    merged.update({key.replace("__", "."): value for key, value in extra.items()})
    lines = ["# kleine Testkonfiguration"]
    for key, value in merged.items():
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, str):
            text = value
        else:
            text = repr(value)
        lines.append(f"{key} = {text}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
