"""Experiment pipelines behind the command line.

Every stage reads its inputs from and writes its artifacts to the output
directory, so stages can be re-run independently.  Stage seeds are derived
from the root seed with fixed labels.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from tacq.checkpoint import (
    load_model,
    load_qmodel,
    load_samples,
    load_table,
    load_trace,
    read_checkpoint,
    save_model,
    save_qmodel,
    save_samples,
    save_table,
    save_trace,
)
from tacq.correction import ABLATION_VARIANTS, CorrectionConfig, CorrectionTable, precalculate, variant_config
from tacq.diffusion import NoiseSchedule, make_linear_schedule
from tacq.errors import CheckpointError, ConfigError, MetricsError
from tacq.metrics import (
    AblationTable,
    DistReport,
    ablation_summary,
    distribution_report,
    histogram,
    write_csv,
    write_key_values,
)
from tacq.models import NoiseEstimator, NoiseModel, TrainConfig, init_model, make_toy_dataset, train
from tacq.quant import QuantizedModel, calibrate_activations, quantize_model
from tacq.samplers import SamplerConfig, sample
from tacq.tensors import Rng, derive_seed

from .schemas import RunConfig

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

MODEL_FILE = "model.tacq"
QMODEL_FILE = "qmodel.tacq"
REFERENCE_FILE = "reference.tacq"
LOSS_CURVE_FILE = "loss_curve.csv"
SEED_LABELS = ("train", "calib", "correct", "sample", "reference", "eval")


@dataclass
class EvalOutcome:
    report: DistReport
    passed: bool
    text_path: Path
    csv_path: Path


def stage_seed(config: RunConfig, label: str) -> int:
    if label not in SEED_LABELS:
        raise ConfigError(f"Unbekanntes Seed-Label '{label}'")
    return derive_seed(config.seed, label)


def build_schedule(config: RunConfig) -> NoiseSchedule:
    return make_linear_schedule(config.schedule.T, config.schedule.beta_start, config.schedule.beta_end)


def sampler_config(config: RunConfig, table: Optional[CorrectionTable] = None) -> SamplerConfig:
    section = config.sampler
    return SamplerConfig(
        kind=section.kind,
        steps=section.steps,
        eta=section.eta,
        form=section.form,
        spacing=section.spacing,
        grid=table.grid if table is not None else None,
        correction=table,
    )


def correction_config(config: RunConfig, variant: Optional[str] = None, **overrides: float) -> Optional[CorrectionConfig]:
    section = config.correction
    base = CorrectionConfig(
        lambda1=section.lambda1,
        lambda2=section.lambda2,
        k_threshold=section.k_threshold,
        calib_batch=section.calib_batch,
        eps_floor=section.eps_floor,
        signed_mask=section.signed_mask,
        sequential=section.sequential,
        dpm_apply_ibc=section.dpm_apply_ibc,
    )
    for key, value in overrides.items():
        setattr(base, key, value)
    return variant_config(variant or section.variant, base)


def _check_schedule(path: Path, stored: Optional[NoiseSchedule], schedule: NoiseSchedule) -> None:
    if stored is not None and stored.to_dict() != schedule.to_dict():
        raise ConfigError(f"{path}: Zeitplan {stored.to_dict()} passt nicht zur Konfiguration {schedule.to_dict()}")


def _load_estimator(path: Path, schedule: NoiseSchedule) -> NoiseEstimator:
    kind = read_checkpoint(path).kind
    if kind == "model":
        model, stored = load_model(path)
    elif kind == "qmodel":
        model, stored = load_qmodel(path)  # type: ignore[assignment]
    else:
        raise CheckpointError(f"{path}: Modell-Checkpoint erwartet, gefunden '{kind}'")
    _check_schedule(path, stored, schedule)
    return model


# ----------------------------------------------------------------------
# stages
def run_train(config: RunConfig, out: Path) -> Path:
    schedule = build_schedule(config)
    seed = stage_seed(config, "train")
    dataset = make_toy_dataset(config.dataset.kind, config.dataset.n, derive_seed(seed, "data"))
    model = init_model(
        config.model.arch,
        dataset.shape[1:],
        derive_seed(seed, "init"),
        zero_init_output=config.model.zero_init_output,
    )
    section = config.train
    trained = train(
        model,
        dataset,
        schedule,
        TrainConfig(
            steps=section.steps,
            batch=section.batch,
            lr=section.lr,
            beta1=section.beta1,
            beta2=section.beta2,
            seed=derive_seed(seed, "steps"),
            log_every=section.log_every,
        ),
    )
    path = save_model(out / MODEL_FILE, trained, schedule)
    write_csv(out / LOSS_CURVE_FILE, ({"step": step, "loss": loss} for step, loss in trained.history))
    logger.info("Modell gespeichert: %s", path)
    return path


def run_quantize(config: RunConfig, out: Path, model_path: Optional[PathLike] = None) -> Path:
    schedule = build_schedule(config)
    source = Path(model_path) if model_path else out / MODEL_FILE
    model, stored = load_model(source)
    _check_schedule(source, stored, schedule)
    section = config.quant
    qmodel = quantize_model(
        model,
        section.weight_bits,
        section.act_bits,
        scheme=section.scheme,
        per_channel=section.per_channel_weights,
    )
    qmodel = calibrate_activations(
        qmodel,
        schedule,
        sampler_config(config),
        section.n_calib,
        rng=Rng(stage_seed(config, "calib")),
    )
    path = save_qmodel(out / QMODEL_FILE, qmodel, schedule)
    logger.info("Quantisiertes Modell W%dA%d gespeichert: %s", section.weight_bits, section.act_bits, path)
    return path


def build_table(
    config: RunConfig,
    model: NoiseModel,
    qmodel: QuantizedModel,
    variant: str,
    **overrides: float,
) -> Optional[CorrectionTable]:
    cfg = correction_config(config, variant, **overrides)
    if cfg is None:
        return None
    schedule = build_schedule(config)
    sampler = sampler_config(config)
    grid = sampler.resolve_grid(schedule)
    return precalculate(
        model,
        qmodel,
        schedule,
        grid,
        sampler,
        cfg,
        Rng(stage_seed(config, "correct")),
        variant=variant,
    )


def run_correct(
    config: RunConfig,
    out: Path,
    model_path: Optional[PathLike] = None,
    qmodel_path: Optional[PathLike] = None,
    variant: Optional[str] = None,
) -> Optional[Path]:
    schedule = build_schedule(config)
    model_file = Path(model_path) if model_path else out / MODEL_FILE
    qmodel_file = Path(qmodel_path) if qmodel_path else out / QMODEL_FILE
    model, stored = load_model(model_file)
    _check_schedule(model_file, stored, schedule)
    qmodel, stored_q = load_qmodel(qmodel_file)
    _check_schedule(qmodel_file, stored_q, schedule)
    variant = variant or config.correction.variant
    table = build_table(config, model, qmodel, variant)
    if table is None:
        logger.info("Variante 'baseline' benötigt keine Tabelle")
        return None
    path = save_table(out / f"table-{variant}.tacq", table, schedule)
    for position, t in enumerate(table.grid.timesteps[: table.n_steps]):
        logger.info(
            "t=%-7g K=[%.4f, %.4f] Abdeckung=%.3f",
            t,
            table.K[position].min(),
            table.K[position].max(),
            table.mask_coverage[position],
        )
    summary = table.summary()
    logger.info("Tabelle %s gespeichert: %s", variant, ", ".join(f"{k}={v:.4g}" for k, v in summary.items()))
    return path


def run_sample(
    config: RunConfig,
    out: Path,
    model_path: PathLike,
    table_path: Optional[PathLike] = None,
    *,
    label: str = "samples",
    n: Optional[int] = None,
    dump_trace: bool = False,
    seed_label: str = "sample",
) -> Path:
    schedule = build_schedule(config)
    model = _load_estimator(Path(model_path), schedule)
    table = None
    if table_path is not None:
        table, stored = load_table(table_path)
        _check_schedule(Path(table_path), stored, schedule)
    sampler = sampler_config(config, table)
    sampler.record_trajectory = dump_trace
    sampler.record_activations = dump_trace
    count = n or config.eval.n_samples
    seed = stage_seed(config, seed_label)
    run = sample(model, schedule, sampler, count, Rng(seed))
    path = save_samples(
        out / f"{label}.tacq",
        run.samples,
        {"seed": seed, "label": label, "grid": run.grid.to_dict(), "variant": table.variant if table else None},
        schedule,
    )
    write_key_values(out / f"{label}-timing.txt", {"label": label, "n": count, "seconds": run.seconds})
    if dump_trace:
        save_trace(out / f"trace-{label}.tacq", run, schedule)
    logger.info("%d Proben gespeichert (%.2f s): %s", count, run.seconds, path)
    return path


def _ensure_reference(config: RunConfig, out: Path) -> Path:
    path = out / REFERENCE_FILE
    if not path.exists():
        run_sample(
            config,
            out,
            out / MODEL_FILE,
            label="reference",
            n=config.eval.n_reference,
            seed_label="reference",
        )
    return path


def evaluate_samples(config: RunConfig, samples: np.ndarray, reference: np.ndarray) -> DistReport:
    return distribution_report(
        samples,
        reference,
        projections=config.eval.projections,
        seed=stage_seed(config, "eval"),
    )


def run_eval(
    config: RunConfig,
    out: Path,
    samples_path: PathLike,
    reference_path: Optional[PathLike] = None,
    *,
    threshold: Optional[float] = None,
) -> EvalOutcome:
    samples, meta = load_samples(samples_path)
    reference, _ = load_samples(reference_path or _ensure_reference(config, out))
    if samples.shape[1:] != reference.shape[1:]:
        raise MetricsError(f"Formen passen nicht: {samples.shape[1:]} vs. {reference.shape[1:]}")
    report = evaluate_samples(config, samples, reference)
    label = str(meta.get("label") or Path(samples_path).stem)
    limit = threshold if threshold is not None else config.eval.threshold
    passed = limit is None or report.energy <= limit
    values = dict(report.to_dict())
    text_path = write_key_values(out / f"report-{label}.txt", {"label": label, **values, "passed": passed})
    rows = [
        {"dim": dim, "mean_gap": float(mean_gap), "std_gap": float(std_gap)}
        for dim, (mean_gap, std_gap) in enumerate(zip(report.mean_gap, report.std_gap))
    ]
    csv_path = write_csv(out / f"report-{label}.csv", [{"label": label, **values}] + rows)
    logger.info("Energiedistanz %s: %.6g (%s)", label, report.energy, "ok" if passed else "über Schwelle")
    return EvalOutcome(report=report, passed=passed, text_path=text_path, csv_path=csv_path)


def _ensure_models(config: RunConfig, out: Path) -> Tuple[NoiseModel, QuantizedModel]:
    if not (out / MODEL_FILE).exists():
        run_train(config, out)
    if not (out / QMODEL_FILE).exists():
        run_quantize(config, out)
    schedule = build_schedule(config)
    model, stored = load_model(out / MODEL_FILE)
    _check_schedule(out / MODEL_FILE, stored, schedule)
    qmodel, stored_q = load_qmodel(out / QMODEL_FILE)
    _check_schedule(out / QMODEL_FILE, stored_q, schedule)
    return model, qmodel


def _variant_energy(
    config: RunConfig,
    qmodel: QuantizedModel,
    table: Optional[CorrectionTable],
    reference: np.ndarray,
) -> Tuple[DistReport, np.ndarray]:
    schedule = build_schedule(config)
    run = sample(qmodel, schedule, sampler_config(config, table), config.eval.n_samples, Rng(stage_seed(config, "sample")))
    return evaluate_samples(config, run.samples, reference), run.samples


def run_ablate(config: RunConfig, out: Path, variants: Sequence[str] = ABLATION_VARIANTS) -> AblationTable:
    model, qmodel = _ensure_models(config, out)
    reference, _ = load_samples(_ensure_reference(config, out))
    runs: List[Tuple[str, DistReport]] = []
    for variant in variants:
        table = build_table(config, model, qmodel, variant)
        report, _ = _variant_energy(config, qmodel, table, reference)
        logger.info("Variante %s: Energiedistanz %.6g", variant, report.energy)
        runs.append((variant, report))
    summary = ablation_summary(runs)
    (out / "ablation.txt").write_text(summary.to_text(), encoding="utf-8")
    write_csv(out / "ablation.csv", summary.to_rows())
    return summary


def run_sweep_lambda(config: RunConfig, out: Path, values: Optional[Sequence[float]] = None) -> Path:
    grid = list(values) if values is not None else list(config.eval.sweep_lambda1)
    for value in grid:
        if not 0.0 <= value < 1.0:
            raise ConfigError(f"lambda1 = {value} liegt nicht in [0, 1)", key="eval.sweep_lambda1")
    model, qmodel = _ensure_models(config, out)
    reference, _ = load_samples(_ensure_reference(config, out))
    variant = config.correction.variant
    rows: List[Dict[str, object]] = []
    for value in grid:
        table = build_table(config, model, qmodel, variant, lambda1=float(value))
        report, _ = _variant_energy(config, qmodel, table, reference)
        logger.info("lambda1=%.2f: Energiedistanz %.6g", value, report.energy)
        rows.append({"lambda1": float(value), "energy_distance": report.energy})
    return write_csv(out / "sweep_lambda1.csv", rows)


def run_hist(
    trace_path: PathLike,
    out: Path,
    *,
    layer: Optional[str] = None,
    position: Optional[int] = None,
    bins: int = 64,
) -> Path:
    records, _, grid = load_trace(trace_path)
    selected = {
        key: value
        for key, value in records.items()
        if (layer is None or key[0] == layer) and (position is None or key[1] == position)
    }
    if not selected:
        raise CheckpointError(f"Keine Aktivierungen für Schicht {layer!r}, Position {position!r} im Mitschnitt")
    rows: List[Dict[str, object]] = []
    for (name, index), values in sorted(selected.items(), key=lambda item: (item[0][1], item[0][0])):
        counts, edges = histogram(values, bins)
        for bin_index, count in enumerate(counts):
            rows.append(
                {
                    "layer": name,
                    "position": index,
                    "t": float(grid.timesteps[index]),
                    "low": float(edges[bin_index]),
                    "high": float(edges[bin_index + 1]),
                    "count": int(count),
                }
            )
    return write_csv(out / "hist.csv", rows)


__all__ = [
    "EvalOutcome",
    "stage_seed",
    "build_schedule",
    "sampler_config",
    "correction_config",
    "build_table",
    "run_train",
    "run_quantize",
    "run_correct",
    "run_sample",
    "run_eval",
    "run_ablate",
    "run_sweep_lambda",
    "run_hist",
]
