from __future__ import annotations

from pathlib import Path
from typing import Dict, List

import numpy as np
import pytest

from app.cli import EXIT_FAILURE, EXIT_OK, EXIT_THRESHOLD, EXIT_USAGE, main
from tacq.checkpoint import load_qmodel, load_table, load_trace
from tacq.metrics import read_csv

from .utils import SMALL_CONFIG, write_config


def _run(config: Path, out: Path, *args: str) -> int:
    command, *rest = args
    return main([command, "--config", str(config), "--out", str(out), "--log-level", "WARNING", *rest])


def _key_values(path: Path) -> Dict[str, str]:
    pairs = (line.split("=", 1) for line in path.read_text(encoding="utf-8").splitlines() if line)
    return {key: value for key, value in pairs}


def test_train_is_byte_deterministic(tmp_path: Path) -> None:
    config = write_config(tmp_path / "run.cfg")

    assert _run(config, tmp_path / "a", "train") == EXIT_OK
    assert _run(config, tmp_path / "b", "train") == EXIT_OK

    assert (tmp_path / "a" / "model.tacq").read_bytes() == (tmp_path / "b" / "model.tacq").read_bytes()
    curve = read_csv(tmp_path / "a" / "loss_curve.csv")
    assert [int(row["step"]) for row in curve] == [10, 20, 30, 40, 50, 60]


def test_full_pipeline(tmp_path: Path) -> None:
    config = write_config(tmp_path / "run.cfg")
    out = tmp_path / "out"

    assert _run(config, out, "train") == EXIT_OK
    assert _run(config, out, "quantize") == EXIT_OK
    assert _run(config, out, "correct", "--variant", "tac") == EXIT_OK
    assert _run(
        config, out, "sample", "--model", str(out / "qmodel.tacq"), "--table", str(out / "table-tac.tacq"), "--label", "tac"
    ) == EXIT_OK
    assert _run(config, out, "eval", "--samples", str(out / "tac.tacq")) == EXIT_OK

    report = _key_values(out / "report-tac.txt")
    assert float(report["energy_distance"]) >= 0.0
    assert report["passed"] == "True"
    assert (out / "reference.tacq").exists()
    assert "seconds" in _key_values(out / "tac-timing.txt")
    table, _ = load_table(out / "table-tac.tacq")
    assert table.K.shape == (8, 2)


def test_sampling_is_byte_deterministic(tmp_path: Path) -> None:
    config = write_config(tmp_path / "run.cfg")
    out = tmp_path / "out"
    assert _run(config, out, "train") == EXIT_OK

    for label in ("one", "two"):
        assert _run(config, out, "sample", "--model", str(out / "model.tacq"), "--n", "16", "--label", label) == EXIT_OK

    assert (out / "one.tacq").read_bytes() != b""
    one, two = (out / "one.tacq").read_bytes(), (out / "two.tacq").read_bytes()
    assert one.replace(b'"one"', b'"two"') == two


def test_eval_threshold_and_self_distance(tmp_path: Path) -> None:
    config = write_config(tmp_path / "run.cfg")
    out = tmp_path / "out"
    assert _run(config, out, "train") == EXIT_OK
    assert _run(config, out, "sample", "--model", str(out / "model.tacq")) == EXIT_OK
    samples = str(out / "samples.tacq")

    assert _run(config, out, "eval", "--samples", samples, "--reference", samples) == EXIT_OK
    assert abs(float(_key_values(out / "report-samples.txt")["energy_distance"])) <= 1e-12

    assert _run(config, out, "eval", "--samples", samples, "--threshold", "0") == EXIT_THRESHOLD
    assert _key_values(out / "report-samples.txt")["passed"] == "False"


def test_pass_through_quantization_gives_identity_table(tmp_path: Path) -> None:
    config = write_config(tmp_path / "run.cfg")
    out = tmp_path / "out"

    assert _run(config, out, "train") == EXIT_OK
    assert _run(config, out, "quantize", "--bits-w", "32", "--bits-a", "32") == EXIT_OK
    assert _run(config, out, "correct", "--bits-w", "32", "--bits-a", "32") == EXIT_OK

    qmodel, _ = load_qmodel(out / "qmodel.tacq")
    table, _ = load_table(out / "table-tac.tacq")
    assert qmodel.passthrough
    assert np.all(table.K == 1.0)
    assert np.all(table.B == 0.0)


def test_ablation_lists_every_variant(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    config = write_config(tmp_path / "run.cfg")
    out = tmp_path / "out"

    assert _run(config, out, "ablate") == EXIT_OK

    text = (out / "ablation.txt").read_text(encoding="utf-8")
    labels = {line.split()[0] for line in text.splitlines()[1:]}
    assert labels == {"label=baseline", "label=first-step", "label=ner-ibc", "label=tac"}
    assert capsys.readouterr().out == text
    rows = read_csv(out / "ablation.csv")
    baseline = next(row for row in rows if row["label"] == "baseline")
    assert float(baseline["delta"]) == 0.0


def test_sweep_lambda(tmp_path: Path) -> None:
    config = write_config(tmp_path / "run.cfg")
    out = tmp_path / "out"

    assert _run(config, out, "sweep-lambda", "--values", "0.0", "0.5") == EXIT_OK

    rows = read_csv(out / "sweep_lambda1.csv")
    assert [float(row["lambda1"]) for row in rows] == [0.0, 0.5]
    assert all(float(row["energy_distance"]) >= 0.0 for row in rows)
    assert _run(config, out, "sweep-lambda", "--values", "1.0") == EXIT_USAGE


def test_sweep_reruns_identically_and_matches_the_single_pipeline(tmp_path: Path) -> None:
    config = write_config(tmp_path / "run.cfg")
    first, second = tmp_path / "a", tmp_path / "b"

    assert _run(config, first, "sweep-lambda", "--values", "0.3") == EXIT_OK
    assert _run(config, second, "sweep-lambda", "--values", "0.3") == EXIT_OK
    assert (first / "sweep_lambda1.csv").read_bytes() == (second / "sweep_lambda1.csv").read_bytes()

    assert _run(config, first, "correct", "--lambda1", "0.3") == EXIT_OK
    assert _run(
        config, first, "sample", "--model", str(first / "qmodel.tacq"), "--table", str(first / "table-tac.tacq"), "--label", "tac"
    ) == EXIT_OK
    assert _run(config, first, "eval", "--samples", str(first / "tac.tacq")) == EXIT_OK

    swept = float(read_csv(first / "sweep_lambda1.csv")[0]["energy_distance"])
    single = float(_key_values(first / "report-tac.txt")["energy_distance"])
    assert abs(swept - single) <= 1e-12


def test_hist_from_a_dumped_trace(tmp_path: Path) -> None:
    config = write_config(tmp_path / "run.cfg")
    out = tmp_path / "out"
    assert _run(config, out, "train") == EXIT_OK
    assert _run(config, out, "sample", "--model", str(out / "model.tacq"), "--n", "4", "--label", "dump", "--dump-trace") == EXIT_OK
    records, _, _ = load_trace(out / "trace-dump.tacq")

    assert _run(config, out, "hist", "--trace", str(out / "trace-dump.tacq")) == EXIT_OK
    rows = read_csv(out / "hist.csv")
    assert sum(int(row["count"]) for row in rows) == sum(value.size for value in records.values())

    assert _run(config, out, "hist", "--trace", str(out / "trace-dump.tacq"), "--layer", "out.input", "--position", "0", "--bins", "8") == EXIT_OK
    rows = read_csv(out / "hist.csv")
    assert len(rows) == 8
    assert sum(int(row["count"]) for row in rows) == 4 * 128
    assert _run(config, out, "hist", "--trace", str(out / "trace-dump.tacq"), "--layer", "nope") == EXIT_FAILURE


def test_configuration_errors_exit_with_usage_code(tmp_path: Path) -> None:
    values = dict(SMALL_CONFIG)
    values.pop("dataset.kind")
    config = write_config(tmp_path / "run.cfg", values)

    assert _run(config, tmp_path / "out", "train") == EXIT_USAGE
    assert main(["train", "--variant", "magic"]) == EXIT_USAGE
    assert main([]) == EXIT_USAGE


def test_missing_model_is_a_failure(tmp_path: Path) -> None:
    config = write_config(tmp_path / "run.cfg")

    assert _run(config, tmp_path / "out", "quantize") == EXIT_FAILURE


@pytest.mark.slow
def test_acceptance_sized_ablation(tmp_path: Path) -> None:
    config = write_config(tmp_path / "run.cfg", {"dataset.kind": "gauss2d"})
    energies: Dict[str, List[float]] = {}

    for seed in (0, 1, 2):
        out = tmp_path / f"seed-{seed}"
        assert _run(config, out, "ablate", "--seed", str(seed)) == EXIT_OK
        for row in read_csv(out / "ablation.csv"):
            energies.setdefault(row["label"], []).append(float(row["energy_distance"]))

    assert all(tac <= 1.05 * base for tac, base in zip(energies["tac"], energies["baseline"]))
    mean = {label: float(np.mean(values)) for label, values in energies.items()}
    assert mean["tac"] <= 1.05 * mean["first-step"]
    assert mean["first-step"] <= 1.05 * mean["baseline"]


@pytest.mark.slow
def test_full_lambda_sweep_is_deterministic(tmp_path: Path) -> None:
    config = write_config(tmp_path / "run.cfg")

    assert _run(config, tmp_path / "a", "sweep-lambda") == EXIT_OK
    assert _run(config, tmp_path / "b", "sweep-lambda") == EXIT_OK

    data = (tmp_path / "a" / "sweep_lambda1.csv").read_bytes()
    assert data == (tmp_path / "b" / "sweep_lambda1.csv").read_bytes()
    rows = read_csv(tmp_path / "a" / "sweep_lambda1.csv")
    assert [float(row["lambda1"]) for row in rows] == [round(0.1 * i, 1) for i in range(10)]
