from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from tacq.correction import CorrectionConfig, precalculate, record_paired_trace, variant_config
from tacq.errors import MetricsError, TensorShapeError
from tacq.metrics import (
    DistReport,
    ablation_summary,
    distribution_report,
    energy_distance,
    histogram,
    read_csv,
    sliced_wasserstein,
    trace_diagnostics,
    write_csv,
)
from tacq.tensors import Rng

from .utils import calibrated_qmodel, ddim_sampler, random_model, small_schedule


def _naive_energy(a: np.ndarray, b: np.ndarray) -> float:
    def mean_distance(left: np.ndarray, right: np.ndarray) -> float:
        total = 0.0
        for x in left:
            for y in right:
                total += float(np.linalg.norm(x - y))
        return total / (len(left) * len(right))

    return 2 * mean_distance(a, b) - mean_distance(a, a) - mean_distance(b, b)


def test_energy_distance_of_a_sample_with_itself_is_zero() -> None:
    a = Rng(0).normal((300, 2))

    assert abs(energy_distance(a, a)) <= 1e-12


def test_energy_distance_is_symmetric_and_matches_the_double_loop() -> None:
    rng = Rng(1)
    a, b = rng.normal((60, 3)), rng.normal((45, 3)) + 0.5

    forward = energy_distance(a, b, block=7)

    assert forward == pytest.approx(energy_distance(b, a), abs=1e-12)
    assert forward == pytest.approx(_naive_energy(a, b), abs=1e-12)
    assert forward > 0.0


def test_energy_distance_of_shifted_gaussians() -> None:
    rng = Rng(2)
    a = rng.normal((2000, 1))
    b = rng.normal((2000, 1)) + 1.0

    assert 0.45 <= energy_distance(a, b) <= 0.65


def test_energy_distance_input_checks() -> None:
    with pytest.raises(MetricsError):
        energy_distance(np.zeros((1, 2)), np.zeros((5, 2)))
    with pytest.raises(MetricsError):
        energy_distance(np.zeros((0, 2)), np.zeros((5, 2)))
    with pytest.raises(TensorShapeError):
        energy_distance(np.zeros((3, 2)), np.zeros((3, 4)))


def test_sliced_wasserstein() -> None:
    a = Rng(3).normal((500, 1))

    assert sliced_wasserstein(a, a, n_projections=4) == 0.0
    assert sliced_wasserstein(a, a + 1.0, n_projections=4) == pytest.approx(1.0, abs=1e-9)


def test_distribution_report_gaps() -> None:
    a = Rng(4).normal((400, 2, 1, 1))

    report = distribution_report(a + np.array([0.5, 0.0]).reshape(1, 2, 1, 1), a, projections=8)

    assert report.n == report.m == 400
    assert report.mean_gap == pytest.approx([0.5, 0.0], abs=1e-12)
    assert np.allclose(report.std_gap, 0.0, atol=1e-12)
    assert report.sliced_w is not None
    assert set(report.to_dict()) >= {"energy_distance", "mean_gap_max", "sliced_wasserstein"}


def _trace(variant: str = "tac", eta: float = 0.0, form: str = "ddim"):
    schedule = small_schedule()
    model = random_model(seed=6)
    sampler = ddim_sampler(8, eta=eta, form=form)
    grid = sampler.resolve_grid(schedule)
    qmodel = calibrated_qmodel(model, schedule, 3, 8, sampler=sampler)
    cfg = variant_config(variant, CorrectionConfig(calib_batch=16))
    table = precalculate(model, qmodel, schedule, grid, sampler, cfg, Rng(1), variant=variant)
    return schedule, record_paired_trace(model, qmodel, schedule, sampler, 16, Rng(2), table)


@pytest.mark.parametrize("eta, form", [(0.0, "ddim"), (1.0, "ddpm"), (0.5, "ddim")])
def test_decomposition_identity_and_one_step_bound(eta: float, form: str) -> None:
    schedule, trace = _trace(eta=eta, form=form)

    report = trace_diagnostics(trace, schedule)

    assert np.all(report.identity_error <= 1e-10)
    assert np.all(report.slack >= -1e-9)
    assert report.rqnsr.shape == (8, 2)
    assert set(report.final) == {"mean", "std", "max"}
    assert len(report.rows()) == 8


def test_identical_lanes_have_zero_discrepancy() -> None:
    schedule = small_schedule()
    model = random_model(seed=1)

    trace = record_paired_trace(model, model, schedule, ddim_sampler(6), 8, Rng(0))
    report = trace_diagnostics(trace, schedule)

    assert np.all(report.dx_in == 0.0)
    assert np.all(report.deps == 0.0)
    assert np.all(report.rqnsr == 0.0)
    assert report.final["max"] == 0.0


def test_unshared_noise_is_rejected() -> None:
    schedule, trace = _trace(variant="eq22", eta=1.0, form="ddpm")

    assert not trace.shared_z
    with pytest.raises(MetricsError):
        trace_diagnostics(trace, schedule)


def _report(energy: float) -> DistReport:
    return DistReport(energy=energy, mean_gap=np.zeros(2), std_gap=np.zeros(2), n=10, m=10)


def test_ablation_summary_sorts_and_reports_deltas() -> None:
    table = ablation_summary([("baseline", _report(0.5)), ("tac", _report(0.2)), ("first-step", _report(0.4))])

    assert [row.label for row in table.rows] == ["tac", "first-step", "baseline"]
    assert [row.delta for row in table.rows] == pytest.approx([-0.3, -0.1, 0.0])
    text = table.to_text()
    assert text.startswith("# ablation baseline=baseline")
    assert "label=tac energy_distance=0.2 delta=-0.3" in text


def test_ablation_with_a_single_run_has_zero_delta() -> None:
    table = ablation_summary([("tac", _report(0.2))])

    assert table.rows[0].delta == 0.0
    assert table.baseline == "tac"
    with pytest.raises(MetricsError):
        ablation_summary([])


def test_histogram() -> None:
    values = Rng(5).normal((1000,))

    counts, edges = histogram(values, bins=16)

    assert counts.sum() == 1000
    assert len(edges) == 17
    constant_counts, constant_edges = histogram(np.full(10, 0.3))
    assert constant_counts.tolist() == [10]
    assert constant_edges.tolist() == [0.3, 0.3]


def test_csv_round_trip_keeps_floats(tmp_path: Path) -> None:
    rows = [{"label": "tac", "energy": 0.1 + 0.2}, {"label": "baseline", "energy": 1e-17}]

    path = write_csv(tmp_path / "report.csv", rows)

    loaded = read_csv(path)
    assert [row["label"] for row in loaded] == ["tac", "baseline"]
    assert [float(row["energy"]) for row in loaded] == [0.1 + 0.2, 1e-17]
