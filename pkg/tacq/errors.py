"""Exception hierarchy shared by the whole toolkit."""
from __future__ import annotations

from typing import Optional, Sequence

__all__ = [
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


class TacqError(RuntimeError):
    """Base class for every error raised by the toolkit."""


class TensorShapeError(TacqError, ValueError):
    """Raised when tensor shapes are not compatible for an operation."""

    def __init__(self, operation: str, left: Sequence[int], right: Optional[Sequence[int]] = None) -> None:
        self.operation = operation
        self.left = tuple(left)
        self.right = tuple(right) if right is not None else None
        if self.right is None:
            message = f"{operation}: ungültige Form {self.left}"
        else:
            message = f"{operation}: Formen passen nicht zusammen, {self.left} vs. {self.right}"
        super().__init__(message)


class ScheduleError(TacqError, ValueError):
    """Raised for invalid noise schedules, timesteps or grids."""


class ModelError(TacqError):
    """Raised for invalid model construction or evaluation."""


class TrainingDivergedError(ModelError):
    """Raised when the training loss becomes non-finite or explodes."""


class QuantizationError(TacqError):
    """Raised for invalid quantization parameters or uncalibrated models."""


class CalibrationError(QuantizationError):
    """Raised when calibration cannot produce activation ranges."""


class CorrectionError(TacqError):
    """Raised while computing or applying correction tables."""

    def __init__(
        self,
        message: str,
        *,
        timestep: Optional[float] = None,
        channel: Optional[int] = None,
    ) -> None:
        self.detail = message
        self.timestep = timestep
        self.channel = channel
        context = []
        if timestep is not None:
            context.append(f"t={timestep:g}")
        if channel is not None:
            context.append(f"Kanal {channel}")
        if context:
            message = f"{message} ({', '.join(context)})"
        super().__init__(message)


class SamplerError(TacqError):
    """Raised for invalid sampler configurations or degenerate grids."""


class MetricsError(TacqError, ValueError):
    """Raised for invalid metric inputs."""


class CheckpointError(TacqError):
    """Raised when a TACQ container cannot be written or parsed."""


class ConfigError(TacqError):
    """Raised for configuration parse and validation errors."""

    def __init__(self, message: str, *, key: Optional[str] = None, line: Optional[int] = None) -> None:
        self.key = key
        self.line = line
        context = []
        if line is not None:
            context.append(f"Zeile {line}")
        if key is not None:
            context.append(f"Schlüssel '{key}'")
        if context:
            message = f"{message} [{', '.join(context)}]"
        super().__init__(message)
