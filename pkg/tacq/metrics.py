"""Discrepancy diagnostics on paired traces and two-sample distances.

All norms are Euclidean norms of the flattened per-sample tensors averaged
over the batch.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial.distance import cdist
from scipy.stats import wasserstein_distance

from .correction import PairedTrace, rqnsr
from .diffusion import NoiseSchedule
from .errors import MetricsError, TensorShapeError
from .samplers import ddim_coefficients
from .tensors import Rng, Tensor

logger = logging.getLogger(__name__)

__all__ = [
    "TraceReport",
    "DistReport",
    "AblationRow",
    "AblationTable",
    "trace_diagnostics",
    "energy_distance",
    "sliced_wasserstein",
    "distribution_report",
    "ablation_summary",
    "histogram",
    "write_csv",
    "read_csv",
    "write_key_values",
    "batch_norm",
]

DEFAULT_BLOCK = 1024
DEFAULT_PROJECTIONS = 128
DEFAULT_BINS = 64


def batch_norm(values: Tensor) -> float:
    """Batch mean of per-sample Euclidean norms."""

    values = np.asarray(values, dtype=np.float64)
    return float(np.mean(np.linalg.norm(values.reshape(values.shape[0], -1), axis=1)))


@dataclass
class TraceReport:
    """Per-step discrepancy norms of a paired trace."""

    timesteps: Tensor
    dx_in: Tensor
    deps: Tensor
    dx_next: Tensor
    bound: Tensor
    identity_error: Tensor
    rqnsr: Tensor
    final: Dict[str, float] = field(default_factory=dict)

    @property
    def slack(self) -> Tensor:
        return self.bound - self.dx_next

    def rows(self) -> List[Dict[str, float]]:
        rows = []
        for i, t in enumerate(self.timesteps):
            row = {
                "step": float(i),
                "t": float(t),
                "dx_in": float(self.dx_in[i]),
                "deps": float(self.deps[i]),
                "dx_next": float(self.dx_next[i]),
                "bound": float(self.bound[i]),
                "slack": float(self.slack[i]),
                "identity_error": float(self.identity_error[i]),
            }
            for channel, value in enumerate(self.rqnsr[i]):
                row[f"rqnsr_c{channel}"] = float(value)
            rows.append(row)
        return rows


@dataclass
class DistReport:
    """Distance between generated samples and a reference set."""

    energy: float
    mean_gap: Tensor
    std_gap: Tensor
    n: int
    m: int
    sliced_w: Optional[float] = None

    def to_dict(self) -> Dict[str, float]:
        data = {
            "energy_distance": self.energy,
            "n": float(self.n),
            "m": float(self.m),
            "mean_gap_max": float(np.max(np.abs(self.mean_gap))),
            "std_gap_max": float(np.max(np.abs(self.std_gap))),
        }
        if self.sliced_w is not None:
            data["sliced_wasserstein"] = self.sliced_w
        return data


def _flatten(samples: Tensor, name: str) -> Tensor:
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim < 1 or samples.shape[0] == 0:
        raise MetricsError(f"{name}: leere Stichprobe")
    return samples.reshape(samples.shape[0], -1)


def trace_diagnostics(trace: PairedTrace, schedule: NoiseSchedule) -> TraceReport:
    """Both sides of the one-step error bound and the decomposition residual.

    With shared noise, ``x_hat[i+1] - x[i+1] = c_x (x_hat_in[i] - x[i]) - c_eps (eps_used[i] - eps[i])``
    holds exactly; ``identity_error`` is its largest absolute residual.
    """

    if not trace.shared_z:
        raise MetricsError("Zerlegung ungültig: Spuren verwenden unterschiedliches Rauschen")
    respaced = schedule.respace(trace.grid.timesteps.astype(np.int64))
    steps = trace.n_steps
    channels = trace.eps.shape[2]
    report = TraceReport(
        timesteps=trace.grid.timesteps.copy(),
        dx_in=np.zeros(steps),
        deps=np.zeros(steps),
        dx_next=np.zeros(steps),
        bound=np.zeros(steps),
        identity_error=np.zeros(steps),
        rqnsr=np.zeros((steps, channels)),
    )
    for i in range(steps):
        c_x, c_eps, _ = ddim_coefficients(respaced, i, trace.eta, trace.form)
        dx_in = trace.x_hat_in[i] - trace.x[i]
        deps = trace.eps_used[i] - trace.eps[i]
        measured = trace.x_hat[i + 1] - trace.x[i + 1]
        predicted = c_x * dx_in - c_eps * deps
        report.dx_in[i] = batch_norm(dx_in)
        report.deps[i] = batch_norm(deps)
        report.dx_next[i] = batch_norm(measured)
        report.bound[i] = abs(c_x) * report.dx_in[i] + abs(c_eps) * report.deps[i]
        report.identity_error[i] = float(np.max(np.abs(predicted - measured)))
        for channel in range(channels):
            report.rqnsr[i, channel] = rqnsr(trace.eps_used[i], trace.eps[i], channel)

    final = np.linalg.norm((trace.x_hat_in[-1] - trace.x[-1]).reshape(trace.x.shape[1], -1), axis=1)
    report.final = {"mean": float(final.mean()), "std": float(final.std()), "max": float(final.max())}
    logger.debug("Spurdiagnose: |dx_0| Mittelwert %.5f", report.final["mean"])
    return report


def _pairwise_mean(a: Tensor, b: Tensor, block: int) -> float:
    total = 0.0
    for start in range(0, a.shape[0], block):
        total += float(cdist(a[start : start + block], b).sum())
    return total / (a.shape[0] * b.shape[0])


def energy_distance(a: Tensor, b: Tensor, *, block: int = DEFAULT_BLOCK) -> float:
    """``2 E|A-B| - E|A-A'| - E|B-B'|`` over all pairs (V-statistic).

    Row blocks are summed in a fixed order.
    """

    a = _flatten(a, "energy_distance")
    b = _flatten(b, "energy_distance")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise MetricsError("energy_distance benötigt mindestens zwei Proben je Seite")
    if a.shape[1] != b.shape[1]:
        raise TensorShapeError("energy_distance", a.shape, b.shape)
    return 2.0 * _pairwise_mean(a, b, block) - _pairwise_mean(a, a, block) - _pairwise_mean(b, b, block)


def sliced_wasserstein(
    a: Tensor, b: Tensor, *, n_projections: int = DEFAULT_PROJECTIONS, seed: int = 0
) -> float:
    """Mean 1-D Wasserstein-1 distance over random unit directions."""

    a = _flatten(a, "sliced_wasserstein")
    b = _flatten(b, "sliced_wasserstein")
    if a.shape[1] != b.shape[1]:
        raise TensorShapeError("sliced_wasserstein", a.shape, b.shape)
    directions = Rng(seed).normal((n_projections, a.shape[1]))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    projected_a = a @ directions.T
    projected_b = b @ directions.T
    distances = [wasserstein_distance(projected_a[:, k], projected_b[:, k]) for k in range(n_projections)]
    return float(np.mean(distances))


def distribution_report(
    samples: Tensor,
    reference: Tensor,
    *,
    block: int = DEFAULT_BLOCK,
    projections: Optional[int] = DEFAULT_PROJECTIONS,
    seed: int = 0,
) -> DistReport:
    """Energy distance plus marginal mean/std gaps (and sliced Wasserstein)."""

    a = _flatten(samples, "distribution_report")
    b = _flatten(reference, "distribution_report")
    energy = energy_distance(a, b, block=block)
    sliced = sliced_wasserstein(a, b, n_projections=projections, seed=seed) if projections else None
    return DistReport(
        energy=energy,
        mean_gap=a.mean(axis=0) - b.mean(axis=0),
        std_gap=a.std(axis=0) - b.std(axis=0),
        n=a.shape[0],
        m=b.shape[0],
        sliced_w=sliced,
    )


@dataclass
class AblationRow:
    label: str
    energy: float
    delta: float
    sliced_w: Optional[float] = None


@dataclass
class AblationTable:
    """Runs sorted by energy distance with deltas against the baseline run."""

    rows: List[AblationRow]
    baseline: str

    def to_text(self) -> str:
        lines = [f"# ablation baseline={self.baseline}"]
        for row in self.rows:
            line = f"label={row.label} energy_distance={row.energy:.10g} delta={row.delta:.10g}"
            if row.sliced_w is not None:
                line += f" sliced_wasserstein={row.sliced_w:.10g}"
            lines.append(line)
        return "\n".join(lines) + "\n"

    def to_rows(self) -> List[Dict[str, object]]:
        return [
            {"label": row.label, "energy_distance": row.energy, "delta": row.delta}
            for row in self.rows
        ]


def ablation_summary(
    runs: Sequence[Tuple[str, DistReport]], baseline: str = "baseline"
) -> AblationTable:
    """Compare labelled runs; the first run stands in when no baseline label exists."""

    if not runs:
        raise MetricsError("ablation_summary benötigt mindestens einen Lauf")
    reference = next((report for label, report in runs if label == baseline), None)
    reference_label = baseline
    if reference is None:
        reference_label, reference = runs[0]
    rows = [
        AblationRow(label=label, energy=report.energy, delta=report.energy - reference.energy, sliced_w=report.sliced_w)
        for label, report in runs
    ]
    rows.sort(key=lambda row: (row.energy, row.label))
    return AblationTable(rows=rows, baseline=reference_label)


def histogram(values: Tensor, bins: int = DEFAULT_BINS) -> Tuple[Tensor, Tensor]:
    """Counts and edges; a constant tensor yields a single bin."""

    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.size == 0:
        raise MetricsError("histogram: keine Werte")
    low, high = float(values.min()), float(values.max())
    if low == high:
        return np.array([values.size]), np.array([low, high])
    counts, edges = np.histogram(values, bins=bins, range=(low, high))
    return counts, edges


# ----------------------------------------------------------------------
# report files
def write_csv(path: Union[str, Path], rows: Iterable[Mapping[str, object]]) -> Path:
    path = Path(path)
    rows = list(rows)
    path.parent.mkdir(parents=True, exist_ok=True)
    fieldnames: List[str] = []
    for row in rows:
        fieldnames.extend(key for key in row if key not in fieldnames)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow({key: _format(value) for key, value in row.items()})
    return path


def read_csv(path: Union[str, Path]) -> List[Dict[str, str]]:
    with Path(path).open(newline="", encoding="utf-8") as handle:
        return list(csv.DictReader(handle))


def write_key_values(path: Union[str, Path], values: Mapping[str, object]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{key}={_format(value)}" for key, value in values.items()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _format(value: object) -> object:
    if isinstance(value, float):
        return repr(value)
    return value
