import math

from dataclasses import replace

import pandas as pd
import pytest

from contingency import Scenario, ScenarioSet, generate
from conic import SolverStatus
from preprocess import HazardKind
from report import (
    BIN_COUNT,
    BatchRecord,
    RESULT_COLUMNS,
    batch_gap,
    compare_summaries,
    format_summary,
    histogram_bins,
    make_record,
    mean_gap,
    read_records,
    run_batch,
    solve_scenario,
    summarize,
    timings_path,
    write_histogram,
    write_parquet,
    write_records,
)


OPTIMAL = SolverStatus.OPTIMAL.value


def record(scenario_id: int = 0, served_fraction: float = 1.0, status: str = OPTIMAL, runtime_s: float = 0.1):
    return BatchRecord(
        scenario_id=scenario_id,
        status=status,
        iterations=100,
        runtime_s=runtime_s,
        objective=1.0,
        served_active_pu=served_fraction,
        served_mw=100.0 * served_fraction,
        served_fraction=served_fraction,
        buses_on=5.0,
        gens_on=2.0,
        shunt_retention=1.0,
        hazards="",
    )


def test_histogram_bins():
    fractions = pd.Series([0.0, 0.019, 0.02, 0.06, 0.5, 0.999, 1.0])
    assert histogram_bins(fractions).tolist() == [0, 0, 1, 3, 25, 49, 50]


def test_summarize_full_delivery():
    summary = summarize([record(i) for i in range(4)])
    assert summary.histogram["count"].iloc[BIN_COUNT - 1] == 4
    assert summary.histogram["count"].sum() == 4
    assert summary.histogram["count"].iloc[-1] == 0
    assert summary.served_mean == 1.0
    assert summary.served_variance == 0.0
    assert summary.status_counts[OPTIMAL] == 4
    assert summary.status_share[OPTIMAL] == 100.0


def test_summarize_statistics():
    records = [record(0, 0.5, runtime_s=1.0), record(1, 1.0, runtime_s=3.0)]
    records.append(record(2, math.nan, status=SolverStatus.TIME_LIMIT.value, runtime_s=10.0))
    summary = summarize(records)
    assert summary.served_mean == pytest.approx(0.75)
    assert summary.served_variance == pytest.approx(0.0625)
    assert summary.records == 3
    # the timed-out record lands in the trailing missing-value row
    assert summary.histogram["count"].sum() == 3
    assert summary.histogram["count"].iloc[-1] == 1
    assert summary.histogram["bin_lo"].iloc[:BIN_COUNT].notna().all()
    assert summary.histogram["count"].iloc[25] == 1
    assert summary.runtime.loc[OPTIMAL, "mean"] == pytest.approx(2.0)
    assert summary.runtime.loc[SolverStatus.TIME_LIMIT.value, "median"] == pytest.approx(10.0)
    assert summary.status_share[SolverStatus.TIME_LIMIT.value] == pytest.approx(100.0 / 3)

    text = format_summary(summary)
    assert "Records: 3" in text
    assert "TimeLimit" in text

    table = compare_summaries([("a.csv", summary), ("b.csv", summarize([record()])), ("a.csv", summary)])
    assert table["file"].tolist() == ["a.csv", "b.csv", "a.csv"]
    assert table["optimal_pct"].tolist() == pytest.approx([200.0 / 3, 100.0, 200.0 / 3])


def test_summarize_empty():
    with pytest.raises(ValueError):
        summarize([])


def test_write_histogram(tmp_path):
    path = tmp_path / "hist.csv"
    write_histogram(summarize([record(0, 0.06)]), str(path))
    df = pd.read_csv(path)
    assert len(df) == BIN_COUNT + 1
    assert df["count"].tolist()[3] == 1
    assert df["bin_hi"].iloc[-2] == pytest.approx(1.02)
    assert math.isnan(df["bin_lo"].iloc[-1]) and df["count"].iloc[-1] == 0


def test_histogram_counts_every_record(tmp_path):
    records = [record(0, 0.5), record(1, math.nan, status=SolverStatus.NUMERICAL_ERROR.value)]
    records.append(record(2, math.nan, status=SolverStatus.ITER_LIMIT.value))
    path = tmp_path / "hist.csv"
    write_histogram(summarize(records), str(path))
    df = pd.read_csv(path)
    assert df["count"].sum() == len(records)
    assert df["count"].iloc[-1] == 2


@pytest.mark.parametrize(
    "removed, hazards",
    [
        ((1, 2), "ShuntIsland"),
        ((2, 3), "GenMinInjection"),
        ((3, 5), "GenMinInjection;LineChargingIsland"),
        ((1, 5), ""),
    ],
)
def test_pathology_scenarios_solve(five_bus, settings, removed, hazards):
    outcome = solve_scenario(five_bus, Scenario(id=0, removed_branches=removed), settings)
    assert outcome.status == OPTIMAL
    row = make_record(0, outcome, five_bus)
    assert row.hazards == hazards
    assert 0.0 <= row.served_fraction <= 1.0 + 1e-5
    assert row.served_mw == pytest.approx(100.0 * row.served_active_pu)


def test_isolated_generator_served_by_main_component(five_bus, settings):
    outcome = solve_scenario(five_bus, Scenario(id=0, removed_branches=(2, 3)), settings)
    assert [h.kind for h in outcome.hazards] == [HazardKind.GEN_MIN_INJECTION]
    assert make_record(0, outcome, five_bus).served_fraction == pytest.approx(1.0, abs=1e-4)


def test_empty_reduction_record(five_bus, settings):
    dark = five_bus.with_components(buses=[replace(b, in_service=False) for b in five_bus.buses])
    outcome = solve_scenario(dark, None, settings)
    assert outcome.solution is None
    row = make_record(7, outcome, five_bus)
    assert (row.status, row.served_fraction, row.shunt_retention) == (OPTIMAL, 0.0, 1.0)


@pytest.fixture
def fixture_batch(five_bus, settings):
    scenario_set = generate(five_bus, 0.3, 3, seed=42)
    return scenario_set, run_batch(five_bus, scenario_set, settings)


def test_run_batch(fixture_batch):
    _, records = fixture_batch
    assert [r.scenario_id for r in records] == [0, 1, 2]
    assert {r.status for r in records} == {OPTIMAL}


@pytest.mark.parametrize("parallelism", [2, 8])
def test_results_file_is_reproducible(five_bus, settings, fixture_batch, tmp_path, parallelism):
    scenario_set, records = fixture_batch
    first, second, pooled = tmp_path / "a.csv", tmp_path / "b.csv", tmp_path / "c.csv"
    write_records(records, str(first))
    write_records(run_batch(five_bus, scenario_set, settings), str(second))
    write_records(run_batch(five_bus, scenario_set, settings, parallelism=parallelism), str(pooled))
    assert first.read_bytes() == second.read_bytes() == pooled.read_bytes()
    assert pd.read_csv(first).columns.tolist() == RESULT_COLUMNS
    assert pd.read_csv(timings_path(str(first))).columns.tolist() == ["scenario_id", "runtime_s"]


def test_read_records(fixture_batch, tmp_path):
    _, records = fixture_batch
    path = tmp_path / "results.csv"
    write_records(records, str(path))
    again = read_records(str(path))
    assert [(r.scenario_id, r.status, r.hazards) for r in again] == [
        (r.scenario_id, r.status, r.hazards) for r in records
    ]
    for old, new in zip(records, again):
        assert new.served_fraction == pytest.approx(old.served_fraction, rel=1e-7)
        assert new.runtime_s == pytest.approx(old.runtime_s, rel=1e-7)


def test_read_records_keeps_missing_values(tmp_path):
    path = tmp_path / "results.csv"
    write_records([record(0, math.nan, status=SolverStatus.NUMERICAL_ERROR.value)], str(path))
    (row,) = read_records(str(path))
    assert math.isnan(row.served_fraction)
    assert row.hazards == ""


def test_write_parquet(fixture_batch, tmp_path):
    _, records = fixture_batch
    path = tmp_path / "results.parquet"
    write_parquet(records, str(path))
    df = pd.read_parquet(path)
    assert df["scenario_id"].tolist() == [0, 1, 2]
    assert "runtime_s" in df.columns


def test_batch_gap(five_bus, settings):
    scenarios = ScenarioSet(
        seed=0,
        fraction=0.3,
        count=2,
        scenarios=(Scenario(id=0, removed_branches=()), Scenario(id=1, removed_branches=(1, 5))),
    )
    gaps = batch_gap(five_bus, scenarios, settings)
    assert gaps["scenario_id"].tolist() == [0, 1]
    assert (gaps["status"] == OPTIMAL).all()
    assert mean_gap(gaps) == pytest.approx(gaps["gap_pct"].mean())
    assert math.isnan(mean_gap(gaps.iloc[0:0]))


@pytest.mark.slow
def test_case14_acceptance(case14, settings):
    records = run_batch(case14, generate(case14, 0.3, 100, seed=2024), settings)
    assert {r.status for r in records} == {OPTIMAL}
    runtimes = pd.Series([r.runtime_s for r in records])
    assert runtimes.max() <= 20.0
    assert runtimes.median() <= 2.0
