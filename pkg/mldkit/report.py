import os
import math
import logging

from multiprocessing import Pool
from dataclasses import asdict, dataclass, field, fields
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from netmodel import Network, total_demand
from contingency import Scenario, ScenarioSet, apply
from preprocess import HazardReport, preprocess_pipeline
from conic import SolverSettings, SolverStatus, solve
from formulation import (
    Z_TOLERANCE,
    ExtractionError,
    MldSolution,
    build_soc_mld_c,
    extract_solution,
    objective_weights,
)
from validate import gap_estimate


logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.8e"
BIN_WIDTH = 0.02
# [1.0, 1.02) is the last bin so full delivery gets a bin of its own
BIN_COUNT = 51

worker_net: Optional[Network] = None
worker_settings: Optional[SolverSettings] = None


@dataclass
class BatchRecord:
    scenario_id: int
    status: str
    iterations: int
    runtime_s: float
    objective: float
    served_active_pu: float
    served_mw: float
    served_fraction: float
    buses_on: float
    gens_on: float
    shunt_retention: float
    hazards: str


# runtime is wall-clock dependent and lives in the timings companion file
RESULT_COLUMNS = [f.name for f in fields(BatchRecord) if f.name != "runtime_s"]


@dataclass
class ScenarioOutcome:
    status: str
    solution: Optional[MldSolution]
    reduced: Network
    hazards: List[HazardReport] = field(default_factory=list)
    iterations: int = 0
    runtime_s: float = 0.0


@dataclass
class BatchSummary:
    status_counts: pd.Series
    status_share: pd.Series
    runtime: pd.DataFrame
    histogram: pd.DataFrame
    served_mean: float
    served_variance: float
    records: int


def solve_scenario(
    net: Network, scenario: Optional[Scenario], settings: Optional[SolverSettings] = None
) -> ScenarioOutcome:
    """Damage, preprocess, relax, solve and read back one scenario."""
    settings = settings or SolverSettings()
    damaged = apply(net, scenario) if scenario is not None else net
    reduced, hazards = preprocess_pipeline(damaged)
    if not reduced.active_buses:
        logger.info("Nothing left to serve after preprocessing")
        return ScenarioOutcome(status=SolverStatus.OPTIMAL.value, solution=None, reduced=reduced, hazards=hazards)

    prob = build_soc_mld_c(reduced, objective_weights(reduced))
    result = solve(prob, settings)
    outcome = ScenarioOutcome(
        status=result.status.value,
        solution=None,
        reduced=reduced,
        hazards=hazards,
        iterations=result.iterations,
        runtime_s=result.runtime_s,
    )
    if result.status != SolverStatus.OPTIMAL:
        return outcome

    # indicator tolerance follows the primal residual actually certified
    z_tol = max(Z_TOLERANCE, 10.0 * settings.eps_primal * (1.0 + float(np.abs(prob.b).max(initial=0.0))))
    try:
        outcome.solution = extract_solution(prob, result.x, result, reduced, z_tol=z_tol)
    except ExtractionError as e:
        logger.warning(f"Discarding solver point: {str(e)}")
        outcome.status = SolverStatus.NUMERICAL_ERROR.value
    return outcome


def make_record(scenario_id: int, outcome: ScenarioOutcome, base: Network) -> BatchRecord:
    """Batch row; served_fraction is relative to the intact case's total active demand."""
    base_total = total_demand(base).real
    hazards = ";".join(sorted({h.kind.value for h in outcome.hazards}))
    solution = outcome.solution
    if solution is None:
        solved = outcome.status == SolverStatus.OPTIMAL.value
        return BatchRecord(
            scenario_id=scenario_id,
            status=outcome.status,
            iterations=outcome.iterations,
            runtime_s=outcome.runtime_s,
            objective=0.0 if solved else math.nan,
            served_active_pu=0.0 if solved else math.nan,
            served_mw=0.0 if solved else math.nan,
            served_fraction=0.0 if solved and base_total > 0 else (1.0 if solved else math.nan),
            buses_on=0.0 if solved else math.nan,
            gens_on=0.0 if solved else math.nan,
            shunt_retention=1.0 if solved else math.nan,
            hazards=hazards,
        )
    shunts = len(outcome.reduced.active_shunts)
    return BatchRecord(
        scenario_id=scenario_id,
        status=outcome.status,
        iterations=outcome.iterations,
        runtime_s=outcome.runtime_s,
        objective=solution.objective,
        served_active_pu=solution.served_active,
        served_mw=solution.served_active * base.base_mva,
        served_fraction=solution.served_active / base_total if base_total > 0 else 1.0,
        buses_on=solution.terms.buses_on,
        gens_on=solution.terms.gens_on,
        shunt_retention=solution.terms.shunts_on / shunts if shunts else 1.0,
        hazards=hazards,
    )


def init_worker(net: Network, settings: SolverSettings):
    global worker_net
    global worker_settings
    worker_net = net
    worker_settings = settings


def _failed_record(scenario_id: int) -> BatchRecord:
    return BatchRecord(
        scenario_id=scenario_id,
        status=SolverStatus.NUMERICAL_ERROR.value,
        iterations=0,
        runtime_s=0.0,
        objective=math.nan,
        served_active_pu=math.nan,
        served_mw=math.nan,
        served_fraction=math.nan,
        buses_on=math.nan,
        gens_on=math.nan,
        shunt_retention=math.nan,
        hazards="",
    )


def scenario_record(scenario: Scenario) -> BatchRecord:
    try:
        outcome = solve_scenario(worker_net, scenario, worker_settings)
        return make_record(scenario.id, outcome, worker_net)
    except Exception as e:
        logger.error(f"Scenario {scenario.id} failed: {str(e)}", exc_info=True)
        return _failed_record(scenario.id)


def run_batch(
    net: Network, scenario_set: ScenarioSet, settings: Optional[SolverSettings] = None, parallelism: int = 1
) -> List[BatchRecord]:
    """Solve every scenario; records come back in scenario-id order whatever the worker count."""
    settings = settings or SolverSettings()
    scenarios = sorted(scenario_set.scenarios, key=lambda s: s.id)
    step = max(1, len(scenarios) // 10)
    records: List[BatchRecord] = []

    if parallelism <= 1:
        init_worker(net, settings)
        for k, scenario in enumerate(scenarios, start=1):
            records.append(scenario_record(scenario))
            if k % step == 0:
                logger.info(f"Solved {k}/{len(scenarios)} scenarios")
        return records

    logger.info(f"Process count: {parallelism}")
    with Pool(parallelism, initializer=init_worker, initargs=(net, settings)) as pool:
        results = [pool.apply_async(scenario_record, args=(scenario,)) for scenario in scenarios]
        for k, (scenario, result) in enumerate(zip(scenarios, results), start=1):
            try:
                records.append(result.get())
            except Exception as e:
                logger.error(f"Error in process for scenario {scenario.id}: {e}")
                records.append(_failed_record(scenario.id))
            if k % step == 0:
                logger.info(f"Solved {k}/{len(scenarios)} scenarios")

        pool.close()
        pool.join()
    return records


def records_frame(records: Sequence[BatchRecord]) -> pd.DataFrame:
    columns = [f.name for f in fields(BatchRecord)]
    return pd.DataFrame([asdict(r) for r in records], columns=columns)


def timings_path(filename: str) -> str:
    root, _ = os.path.splitext(filename)
    return f"{root}.timings.csv"


def write_records(records: Sequence[BatchRecord], filename: str) -> None:
    """Results CSV (byte-stable for identical inputs) plus a `.timings.csv` companion."""
    df = records_frame(records)
    df[RESULT_COLUMNS].to_csv(filename, index=False, float_format=FLOAT_FORMAT, na_rep="nan")
    df[["scenario_id", "runtime_s"]].to_csv(timings_path(filename), index=False, float_format=FLOAT_FORMAT)
    logger.info(f"Saved {len(df)} records to {filename}")


def write_parquet(records: Sequence[BatchRecord], filename: str) -> None:
    records_frame(records).to_parquet(filename, engine="pyarrow", compression="zstd")
    logger.info(f"Saved {len(records)} records to {filename}")


def read_records(filename: str) -> List[BatchRecord]:
    df = pd.read_csv(filename, keep_default_na=False, na_values=["nan"])
    df["hazards"] = df["hazards"].fillna("").astype(str)
    timings = timings_path(filename)
    if os.path.exists(timings):
        df = df.merge(pd.read_csv(timings), on="scenario_id", how="left")
    else:
        df["runtime_s"] = math.nan
    return [
        BatchRecord(**{f.name: row[f.name] for f in fields(BatchRecord)})
        for row in df.astype(object).to_dict(orient="records")
    ]


def histogram_bins(fractions: pd.Series) -> pd.Series:
    # rounding first keeps values such as 0.06 out of the bin below
    return np.floor(np.round(fractions / BIN_WIDTH, 9)).clip(0, BIN_COUNT - 1).astype(int)


def summarize(records: Sequence[BatchRecord]) -> BatchSummary:
    """Status breakdown, runtime per status and the served-fraction distribution.

    The histogram has one row per served-fraction bin followed by a row with
    empty bounds counting the records that carry no served fraction, so its
    counts always add up to the number of records.
    """
    if not records:
        raise ValueError("Cannot summarize an empty batch")
    df = records_frame(records)

    counts = df["status"].value_counts().sort_index()
    share = 100.0 * counts / len(df)
    runtime = df.groupby("status")["runtime_s"].agg(["mean", "median"]).sort_index()

    served = df["served_fraction"].dropna()
    bins = histogram_bins(served).value_counts().reindex(range(BIN_COUNT), fill_value=0)
    histogram = pd.DataFrame(
        {
            "bin_lo": [k * BIN_WIDTH for k in range(BIN_COUNT)] + [math.nan],
            "bin_hi": [(k + 1) * BIN_WIDTH for k in range(BIN_COUNT)] + [math.nan],
            "count": list(bins.values) + [len(df) - len(served)],
        }
    )
    return BatchSummary(
        status_counts=counts,
        status_share=share,
        runtime=runtime,
        histogram=histogram,
        served_mean=float(served.mean()) if len(served) else math.nan,
        served_variance=float(served.var(ddof=0)) if len(served) else math.nan,
        records=len(df),
    )


def write_histogram(summary: BatchSummary, filename: str) -> None:
    summary.histogram.to_csv(filename, index=False, float_format=FLOAT_FORMAT, na_rep="nan")
    logger.info(f"Saved served-fraction histogram to {filename}")


def format_summary(summary: BatchSummary) -> str:
    table = pd.DataFrame(
        {
            "count": summary.status_counts,
            "share_pct": summary.status_share,
            "runtime_mean_s": summary.runtime["mean"],
            "runtime_median_s": summary.runtime["median"],
        }
    )
    lines = [
        f"Records: {summary.records}",
        table.to_string(float_format=lambda v: f"{v:.4f}"),
        f"Served fraction: mean {summary.served_mean:.6f}, variance {summary.served_variance:.6e}",
    ]
    return "\n".join(lines)


def compare_summaries(summaries: Sequence[Tuple[str, BatchSummary]]) -> pd.DataFrame:
    """One row per (name, summary) pair, in order: Optimal share, runtimes and served load."""
    rows = []
    for name, summary in summaries:
        optimal = SolverStatus.OPTIMAL.value
        rows.append(
            {
                "file": name,
                "records": summary.records,
                "optimal_pct": float(summary.status_share.get(optimal, 0.0)),
                "runtime_mean_s": float(summary.runtime["mean"].get(optimal, math.nan)),
                "runtime_median_s": float(summary.runtime["median"].get(optimal, math.nan)),
                "served_mean": summary.served_mean,
                "served_variance": summary.served_variance,
            }
        )
    return pd.DataFrame(rows)


def batch_gap(net: Network, scenario_set: ScenarioSet, settings: Optional[SolverSettings] = None) -> pd.DataFrame:
    """gap_estimate per scenario; the mean is taken over scenarios whose relaxation solved to optimality."""
    rows = []
    for scenario in sorted(scenario_set.scenarios, key=lambda s: s.id):
        estimate = gap_estimate(apply(net, scenario), settings)
        rows.append({"scenario_id": scenario.id, **asdict(estimate)})
    return pd.DataFrame(rows, columns=["scenario_id", "upper", "lower", "gap_pct", "gamma", "status"])


def mean_gap(gaps: pd.DataFrame) -> float:
    solved = gaps[gaps["status"] == SolverStatus.OPTIMAL.value]
    return float(solved["gap_pct"].mean()) if len(solved) else math.nan
