"""Timestep-aware correction for quantized toy diffusion models."""

from .checkpoint import (
    load_model,
    load_qmodel,
    load_samples,
    load_table,
    read_checkpoint,
    save_model,
    save_qmodel,
    save_samples,
    save_table,
    write_checkpoint,
)
from .correction import (
    CorrectionConfig,
    CorrectionTable,
    PairedTrace,
    build_mask,
    compute_bias,
    compute_threshold,
    corrected_eps,
    precalculate,
    reconstruction_loss,
    record_paired_trace,
    rqnsr,
    solve_k,
    variant_config,
)
from .diffusion import (
    NoiseSchedule,
    TimestepGrid,
    ddim_step,
    ddpm_step,
    forward_noise,
    make_ddim_grid,
    make_dpm_grid,
    make_linear_schedule,
)
from .errors import (
    CalibrationError,
    CheckpointError,
    ConfigError,
    CorrectionError,
    MetricsError,
    ModelError,
    QuantizationError,
    SamplerError,
    ScheduleError,
    TacqError,
    TensorShapeError,
    TrainingDivergedError,
)
from .metrics import (
    DistReport,
    TraceReport,
    ablation_summary,
    distribution_report,
    energy_distance,
    sliced_wasserstein,
    trace_diagnostics,
)
from .models import NoiseModel, TrainConfig, init_model, loss_and_grads, make_toy_dataset, train
from .quant import (
    QuantizedModel,
    QuantParams,
    calibrate_activations,
    calibrate_weights,
    quantize,
    quantize_model,
    quantized_forward,
)
from .samplers import SampleRun, SamplerConfig, dpmpp_2s_step, sample, sample_ddim, sample_dpmpp
from .tensors import Rng, derive_seed, randn

__all__ = [
    "NoiseSchedule",
    "TimestepGrid",
    "make_linear_schedule",
    "make_ddim_grid",
    "make_dpm_grid",
    "forward_noise",
    "ddpm_step",
    "ddim_step",
    "NoiseModel",
    "TrainConfig",
    "init_model",
    "loss_and_grads",
    "train",
    "make_toy_dataset",
    "QuantParams",
    "QuantizedModel",
    "quantize",
    "calibrate_weights",
    "calibrate_activations",
    "quantize_model",
    "quantized_forward",
    "CorrectionConfig",
    "CorrectionTable",
    "PairedTrace",
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
    "SamplerConfig",
    "SampleRun",
    "sample",
    "sample_ddim",
    "sample_dpmpp",
    "dpmpp_2s_step",
    "TraceReport",
    "DistReport",
    "trace_diagnostics",
    "energy_distance",
    "sliced_wasserstein",
    "distribution_report",
    "ablation_summary",
    "read_checkpoint",
    "write_checkpoint",
    "save_model",
    "load_model",
    "save_qmodel",
    "load_qmodel",
    "save_table",
    "load_table",
    "save_samples",
    "load_samples",
    "Rng",
    "randn",
    "derive_seed",
    "TacqError",
    "TensorShapeError",
    "ScheduleError",
    "ModelError",
    "TrainingDivergedError",
    "QuantizationError",
    "CalibrationError",
    "CorrectionError",
    "SamplerError",
    "MetricsError",
    "CheckpointError",
    "ConfigError",
]
