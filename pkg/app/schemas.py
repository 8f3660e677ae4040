"""Pydantic schemas for the run configuration."""
from __future__ import annotations

from typing import List, Optional

from pydantic import BaseModel, Extra, Field, validator

from tacq.correction import VARIANTS
from tacq.diffusion import DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_T, GRID_SPACINGS, UPDATE_FORMS
from tacq.models import ARCHITECTURES, DATASET_KINDS
from tacq.quant import ACT_BITS, SCHEMES, WEIGHT_BITS
from tacq.samplers import SAMPLER_KINDS

DEFAULT_SWEEP = [round(0.1 * index, 1) for index in range(10)]


class _Section(BaseModel):
    class Config:
        extra = Extra.forbid
        validate_assignment = True


class DatasetSection(_Section):
    kind: str
    n: int = Field(4096, ge=1)

    @validator("kind")
    def _known_kind(cls, value: str) -> str:
        if value not in DATASET_KINDS:
            raise ValueError(f"unbekannter Datensatz, erlaubt: {', '.join(DATASET_KINDS)}")
        return value


class ModelSection(_Section):
    arch: str = "mlp"
    zero_init_output: bool = False

    @validator("arch")
    def _known_arch(cls, value: str) -> str:
        if value not in ARCHITECTURES:
            raise ValueError(f"unbekannte Architektur, erlaubt: {', '.join(ARCHITECTURES)}")
        return value


class ScheduleSection(_Section):
    T: int = Field(DEFAULT_T, ge=2)
    beta_start: float = Field(DEFAULT_BETA_START, gt=0.0, lt=1.0)
    beta_end: float = Field(DEFAULT_BETA_END, gt=0.0, lt=1.0)


class TrainSection(_Section):
    steps: int = Field(5000, ge=1)
    batch: int = Field(128, ge=1)
    lr: float = Field(1e-3, gt=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    log_every: int = Field(50, ge=1)


class QuantSection(_Section):
    weight_bits: int = 3
    act_bits: int = 8
    scheme: str = "minmax_symmetric"
    per_channel_weights: bool = False
    n_calib: int = Field(256, ge=1)

    @validator("weight_bits")
    def _weight_bits(cls, value: int) -> int:
        if value not in WEIGHT_BITS:
            raise ValueError(f"erlaubt sind {WEIGHT_BITS}")
        return value

    @validator("act_bits")
    def _act_bits(cls, value: int) -> int:
        if value not in ACT_BITS:
            raise ValueError(f"erlaubt sind {ACT_BITS}")
        return value

    @validator("scheme")
    def _scheme(cls, value: str) -> str:
        if value not in SCHEMES:
            raise ValueError(f"erlaubt sind {', '.join(SCHEMES)}")
        return value


class CorrectionSection(_Section):
    variant: str = "tac"
    lambda1: float = Field(0.5, ge=0.0, lt=1.0)
    lambda2: float = Field(1e-2, gt=0.0)
    k_threshold: float = Field(1.0, ge=0.0)
    calib_batch: int = Field(64, ge=1)
    eps_floor: float = Field(1e-8, ge=0.0)
    signed_mask: bool = False
    sequential: bool = True
    dpm_apply_ibc: bool = False

    @validator("variant")
    def _variant(cls, value: str) -> str:
        if value not in VARIANTS:
            raise ValueError(f"erlaubt sind {', '.join(VARIANTS)}")
        return value


class SamplerSection(_Section):
    kind: str = "ddim"
    steps: int = Field(100, ge=1)
    eta: float = Field(0.0, ge=0.0)
    form: str = "ddim"
    spacing: str = "logsnr"

    @validator("kind")
    def _kind(cls, value: str) -> str:
        if value not in SAMPLER_KINDS:
            raise ValueError(f"erlaubt sind {', '.join(SAMPLER_KINDS)}")
        return value

    @validator("form")
    def _form(cls, value: str) -> str:
        if value not in UPDATE_FORMS:
            raise ValueError(f"erlaubt sind {', '.join(UPDATE_FORMS)}")
        return value

    @validator("spacing")
    def _spacing(cls, value: str) -> str:
        if value not in GRID_SPACINGS:
            raise ValueError(f"erlaubt sind {', '.join(GRID_SPACINGS)}")
        return value


class EvalSection(_Section):
    n_samples: int = Field(10000, ge=2)
    n_reference: int = Field(10000, ge=2)
    threshold: Optional[float] = Field(None, ge=0.0)
    projections: int = Field(128, ge=0)
    sweep_lambda1: List[float] = Field(default_factory=lambda: list(DEFAULT_SWEEP))
    hist_bins: int = Field(64, ge=1)

    @validator("sweep_lambda1", each_item=True)
    def _sweep_value(cls, value: float) -> float:
        if not 0.0 <= value < 1.0:
            raise ValueError("lambda1 muss in [0, 1) liegen")
        return value


class RunConfig(_Section):
    dataset: DatasetSection
    model: ModelSection = Field(default_factory=ModelSection)
    schedule: ScheduleSection = Field(default_factory=ScheduleSection)
    train: TrainSection = Field(default_factory=TrainSection)
    quant: QuantSection = Field(default_factory=QuantSection)
    correction: CorrectionSection = Field(default_factory=CorrectionSection)
    sampler: SamplerSection = Field(default_factory=SamplerSection)
    eval: EvalSection = Field(default_factory=EvalSection)
    seed: int = 0
    output_dir: Optional[str] = None


SECTIONS = {
    "dataset": DatasetSection,
    "model": ModelSection,
    "schedule": ScheduleSection,
    "train": TrainSection,
    "quant": QuantSection,
    "correction": CorrectionSection,
    "sampler": SamplerSection,
    "eval": EvalSection,
}

__all__ = [
    "RunConfig",
    "DatasetSection",
    "ModelSection",
    "ScheduleSection",
    "TrainSection",
    "QuantSection",
    "CorrectionSection",
    "SamplerSection",
    "EvalSection",
    "SECTIONS",
]
