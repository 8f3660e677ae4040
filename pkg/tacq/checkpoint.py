"""Binary ``TACQ`` container for models, tables, samples and dumps.

Layout: magic ``b"TACQ"``, version byte, kind byte, little-endian ``u32``
length of a UTF-8 JSON metadata block (sorted keys), then every array
listed in ``metadata["arrays"]`` as raw little-endian float64 values in
row-major order.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple, Union

import numpy as np

from .correction import CorrectionConfig, CorrectionTable
from .diffusion import NoiseSchedule, TimestepGrid
from .errors import CheckpointError
from .models import NoiseModel
from .quant import QuantizedModel, QuantParams
from .samplers import SampleRun
from .tensors import Tensor

logger = logging.getLogger(__name__)

__all__ = [
    "Checkpoint",
    "MAGIC",
    "VERSION",
    "KINDS",
    "write_checkpoint",
    "read_checkpoint",
    "save_model",
    "load_model",
    "save_qmodel",
    "load_qmodel",
    "save_table",
    "load_table",
    "save_samples",
    "load_samples",
    "save_trace",
    "load_trace",
]

MAGIC = b"TACQ"
VERSION = 1
KINDS = ("model", "qmodel", "table", "trace", "samples")
_HEADER = struct.Struct("<4sBBI")
_DTYPE = np.dtype("<f8")

PathLike = Union[str, Path]


@dataclass
class Checkpoint:
    kind: str
    metadata: Dict[str, object]
    arrays: Dict[str, Tensor]

    def schedule(self) -> Optional[NoiseSchedule]:
        data = self.metadata.get("schedule")
        return NoiseSchedule.from_dict(data) if isinstance(data, dict) else None

    def require(self, kind: str) -> "Checkpoint":
        if self.kind != kind:
            raise CheckpointError(f"Erwartet Checkpoint-Art '{kind}', gefunden '{self.kind}'")
        return self


def write_checkpoint(
    path: PathLike,
    kind: str,
    metadata: Mapping[str, object],
    arrays: Mapping[str, Tensor],
) -> Path:
    if kind not in KINDS:
        raise CheckpointError(f"Unbekannte Checkpoint-Art '{kind}'")
    meta = dict(metadata)
    meta["arrays"] = [[name, list(np.shape(value))] for name, value in arrays.items()]
    try:
        block = json.dumps(meta, sort_keys=True, ensure_ascii=False, allow_nan=False).encode("utf-8")
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"Metadaten nicht serialisierbar: {exc}") from exc
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as handle:
        handle.write(_HEADER.pack(MAGIC, VERSION, KINDS.index(kind), len(block)))
        handle.write(block)
        for value in arrays.values():
            handle.write(np.ascontiguousarray(value, dtype=_DTYPE).tobytes(order="C"))
    logger.debug("Checkpoint %s (%s) geschrieben", path, kind)
    return path


def read_checkpoint(path: PathLike) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"Checkpoint {path} kann nicht gelesen werden: {exc}") from exc
    if len(data) < _HEADER.size:
        raise CheckpointError(f"{path}: Datei zu kurz für einen TACQ-Kopf")
    magic, version, kind_index, meta_length = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: ungültige Kennung {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: Version {version} wird nicht unterstützt (erwartet {VERSION})")
    if kind_index >= len(KINDS):
        raise CheckpointError(f"{path}: unbekannte Checkpoint-Art {kind_index}")
    offset = _HEADER.size
    try:
        metadata = json.loads(data[offset : offset + meta_length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: Metadaten beschädigt") from exc
    offset += meta_length

    arrays: Dict[str, Tensor] = {}
    for name, shape in metadata.pop("arrays", []):
        count = int(np.prod(shape)) if shape else 1
        size = count * _DTYPE.itemsize
        if offset + size > len(data):
            raise CheckpointError(f"{path}: Nutzdaten für '{name}' unvollständig")
        arrays[name] = np.frombuffer(data, dtype=_DTYPE, count=count, offset=offset).reshape(shape).astype(np.float64)
        offset += size
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} überzählige Bytes")
    return Checkpoint(kind=KINDS[kind_index], metadata=metadata, arrays=arrays)


# ----------------------------------------------------------------------
# typed helpers
def _schedule_meta(schedule: Optional[NoiseSchedule]) -> Dict[str, object]:
    return {"schedule": schedule.to_dict()} if schedule is not None else {}


def save_model(path: PathLike, model: NoiseModel, schedule: Optional[NoiseSchedule] = None) -> Path:
    meta = {"model": model.to_dict(), "history": [list(item) for item in model.history]}
    meta.update(_schedule_meta(schedule))
    return write_checkpoint(path, "model", meta, model.params)


def _model_from(metadata: Mapping[str, object], arrays: Mapping[str, Tensor]) -> NoiseModel:
    info = metadata["model"]
    assert isinstance(info, dict)
    names: List[str] = list(info["param_names"])
    missing = [name for name in names if name not in arrays]
    if missing:
        raise CheckpointError(f"Parameter fehlen im Checkpoint: {', '.join(missing)}")
    history = [(int(step), float(loss)) for step, loss in metadata.get("history", [])]  # type: ignore[union-attr]
    return NoiseModel(
        arch=str(info["arch"]),
        params={name: arrays[name] for name in names},
        io_shape=tuple(int(dim) for dim in info["io_shape"]),  # type: ignore[arg-type]
        time_embed_dim=int(info["time_embed_dim"]),
        history=history,
    )


def load_model(path: PathLike) -> Tuple[NoiseModel, Optional[NoiseSchedule]]:
    checkpoint = read_checkpoint(path).require("model")
    return _model_from(checkpoint.metadata, checkpoint.arrays), checkpoint.schedule()


def save_qmodel(path: PathLike, qmodel: QuantizedModel, schedule: Optional[NoiseSchedule] = None) -> Path:
    meta = {"model": qmodel.base.to_dict(), "quant": qmodel.to_dict()}
    meta.update(_schedule_meta(schedule))
    return write_checkpoint(path, "qmodel", meta, qmodel.base.params)


def load_qmodel(path: PathLike) -> Tuple[QuantizedModel, Optional[NoiseSchedule]]:
    checkpoint = read_checkpoint(path).require("qmodel")
    base = _model_from(checkpoint.metadata, checkpoint.arrays)
    quant = checkpoint.metadata["quant"]
    assert isinstance(quant, dict)
    qmodel = QuantizedModel(
        base=base,
        weight_qparams={name: QuantParams.from_dict(p) for name, p in quant["weight_qparams"].items()},
        act_qparams={name: QuantParams.from_dict(p) for name, p in quant["act_qparams"].items()},
        act_ranges={name: (float(low), float(high)) for name, (low, high) in quant.get("act_ranges", {}).items()},
        weight_bits=int(quant["weight_bits"]),
        act_bits=int(quant["act_bits"]),
        scheme=str(quant["scheme"]),
        per_channel=bool(quant["per_channel"]),
        calibrated=bool(quant["calibrated"]),
    )
    return qmodel, checkpoint.schedule()


def _grid_arrays(grid: TimestepGrid) -> Dict[str, Tensor]:
    arrays = {"grid.timesteps": grid.timesteps}
    if grid.midpoints is not None:
        arrays["grid.midpoints"] = grid.midpoints
    return arrays


def _grid_from(metadata: Mapping[str, object], arrays: Mapping[str, Tensor]) -> TimestepGrid:
    info = metadata["grid"]
    assert isinstance(info, dict)
    return TimestepGrid(
        kind=str(info["kind"]),
        timesteps=arrays["grid.timesteps"],
        midpoints=arrays.get("grid.midpoints"),
        spacing=str(info["spacing"]),
    )


def save_table(path: PathLike, table: CorrectionTable, schedule: Optional[NoiseSchedule] = None) -> Path:
    meta = table.to_dict()
    meta.update(_schedule_meta(schedule))
    arrays = {
        "K": table.K,
        "K_mid": table.K_mid,
        "B": table.B,
        "tau": table.tau,
        "mask_coverage": table.mask_coverage,
    }
    arrays.update(_grid_arrays(table.grid))
    return write_checkpoint(path, "table", meta, arrays)


def load_table(path: PathLike) -> Tuple[CorrectionTable, Optional[NoiseSchedule]]:
    checkpoint = read_checkpoint(path).require("table")
    meta, arrays = checkpoint.metadata, checkpoint.arrays
    config = meta["config"]
    assert isinstance(config, dict)
    table = CorrectionTable(
        K=arrays["K"],
        K_mid=arrays["K_mid"],
        B=arrays["B"],
        tau=arrays["tau"],
        mask_coverage=arrays["mask_coverage"],
        config=CorrectionConfig.from_dict(config),
        grid=_grid_from(meta, arrays),
        variant=str(meta["variant"]),
    )
    return table, checkpoint.schedule()


def save_samples(
    path: PathLike,
    samples: Tensor,
    metadata: Optional[Mapping[str, object]] = None,
    schedule: Optional[NoiseSchedule] = None,
) -> Path:
    meta = dict(metadata or {})
    meta.update(_schedule_meta(schedule))
    return write_checkpoint(path, "samples", meta, {"samples": samples})


def load_samples(path: PathLike) -> Tuple[Tensor, Dict[str, object]]:
    checkpoint = read_checkpoint(path).require("samples")
    return checkpoint.arrays["samples"], checkpoint.metadata


def save_trace(path: PathLike, run: SampleRun, schedule: Optional[NoiseSchedule] = None) -> Path:
    """Dump the trajectory and recorded activations of a sampling run."""

    run_info = {key: value for key, value in run.to_dict().items() if key != "seconds"}
    meta: Dict[str, object] = {"run": run_info, "records": []}
    arrays: Dict[str, Tensor] = dict(_grid_arrays(run.grid))
    meta["grid"] = run.grid.to_dict()
    if run.trajectory is not None:
        arrays["trajectory"] = run.trajectory
    records = []
    for (layer, position), value in sorted(run.activations.items(), key=lambda item: (item[0][1], item[0][0])):
        key = f"act/{layer}/{position}"
        arrays[key] = value
        records.append([layer, position, float(run.grid.timesteps[position])])
    meta["records"] = records
    meta.update(_schedule_meta(schedule))
    return write_checkpoint(path, "trace", meta, arrays)


def load_trace(path: PathLike) -> Tuple[Dict[Tuple[str, int], Tensor], Dict[str, object], TimestepGrid]:
    """Activation records keyed by ``(layer, grid position)``."""

    checkpoint = read_checkpoint(path).require("trace")
    records = {
        (str(layer), int(position)): checkpoint.arrays[f"act/{layer}/{position}"]
        for layer, position, _ in checkpoint.metadata.get("records", [])  # type: ignore[union-attr]
    }
    return records, checkpoint.metadata, _grid_from(checkpoint.metadata, checkpoint.arrays)
