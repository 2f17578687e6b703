import sys
import json
import logging
import argparse

from typing import Callable, Dict, Optional

import config
import util

from config import parse_delta, print_config
from netmodel import CaseParseError, Network, NetworkValidationError, load_case, with_priorities
from contingency import ScenarioError, Scenario, apply, generate, load_scenarios, write_scenarios
from preprocess import detect_hazards, preprocess_pipeline, propagate_outages
from conic import ConicProblem, SolverArgumentError, SolverSettings, SolverStatus, solve
from formulation import build_soc_mld_c, export_conic, objective_weights, solution_to_dict
from validate import gap_estimate
from report import (
    batch_gap,
    compare_summaries,
    format_summary,
    mean_gap,
    read_records,
    run_batch,
    solve_scenario,
    summarize,
    write_histogram,
    write_parquet,
    write_records,
)


logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INPUT = 2
EXIT_SOLVER = 3


class ArgumentParser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; here 2 means bad input data."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _duration(value: str) -> float:
    try:
        return parse_delta(value).total_seconds()
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e))


class Application:
    """Command-line front end over the relaxation pipeline."""

    def __init__(self, argv: Optional[list] = None):
        self.config = self._parse_arguments(argv)
        self.handlers: Dict[str, Callable[[], int]] = {
            "check": self.check,
            "scenarios": self.scenarios,
            "solve": self.solve,
            "solve-conic": self.solve_conic,
            "batch": self.batch,
            "gap": self.gap,
            "export-conic": self.export_conic,
            "summarize": self.summarize,
        }

    def _parse_arguments(self, argv: Optional[list]) -> argparse.Namespace:
        """Parse command line arguments."""
        parser = ArgumentParser(prog="mldkit", description="mldkit | maximal load delivery in damaged grids")
        commands = parser.add_subparsers(dest="command", required=True)

        solver = ArgumentParser(add_help=False)
        solver_group = solver.add_argument_group("Solver Settings")
        solver_group.add_argument("--eps", type=float, default=config.EPS, help="Primal, dual and gap tolerance")
        solver_group.add_argument(
            "--time-limit", type=_duration, default=config.TIME_LIMIT_SECONDS, help="Wall-clock limit, e.g. 150 or 2m"
        )
        solver_group.add_argument("--max-iters", type=int, default=config.MAX_ITERS, help="Iteration limit")

        scenario = ArgumentParser(add_help=False)
        scenario_group = scenario.add_argument_group("Scenario Selection")
        scenario_group.add_argument("--scenario", help="Scenario set JSON")
        scenario_group.add_argument("--id", type=int, help="Scenario id within the set")
        scenario_group.add_argument("--priorities", help="JSON object mapping load id to priority")

        check = commands.add_parser("check", help="Parse, validate and scan the base case for hazards")
        check.add_argument("case", help="Case file")

        scen = commands.add_parser("scenarios", help="Generate N-k branch outage scenarios")
        scen.add_argument("case", help="Case file")
        scen.add_argument("--fraction", type=float, default=config.FRACTION, help="Share of branches removed")
        scen.add_argument("--count", type=int, default=config.SCENARIO_COUNT, help="Number of scenarios")
        scen.add_argument("--seed", type=int, default=config.SEED, help="64-bit seed")
        scen.add_argument("-o", "--output", help="Scenario set JSON")

        sol = commands.add_parser("solve", parents=[solver, scenario], help="Solve one scenario")
        sol.add_argument("case", help="Case file")
        sol.add_argument("-o", "--output", help="Solution JSON")

        conic = commands.add_parser("solve-conic", parents=[solver], help="Solve an exported conic problem")
        conic.add_argument("problem", help="Conic problem JSON")

        batch = commands.add_parser("batch", parents=[solver], help="Solve every scenario of a set")
        batch.add_argument("case", help="Case file")
        batch.add_argument("scenarios", help="Scenario set JSON")
        batch.add_argument("-o", "--output", help="Results CSV")
        batch.add_argument(
            "--parallel", type=int, default=config.PARALLEL, help="Worker processes, 0 for one per spare core"
        )
        batch.add_argument("--hist", help="Served-fraction histogram CSV")
        batch.add_argument("--parquet", help="Also archive the records as parquet")
        batch.add_argument("--priorities", help="JSON object mapping load id to priority")

        gap = commands.add_parser("gap", parents=[solver, scenario], help="Relaxation gap against an AC point")
        gap.add_argument("case", help="Case file")

        export = commands.add_parser("export-conic", parents=[scenario], help="Write the conic problem as JSON")
        export.add_argument("case", help="Case file")
        export.add_argument("-o", "--output", help="Conic problem JSON")

        summary = commands.add_parser("summarize", help="Summarize one or more results CSV files")
        summary.add_argument("results", nargs="+", help="Results CSV files")

        args = parser.parse_args(argv)
        if getattr(args, "id", None) is not None and not getattr(args, "scenario", None):
            parser.error("--id requires --scenario")
        if args.command == "solve" and args.scenario and args.id is None:
            parser.error("solve needs --id together with --scenario")
        if args.command == "export-conic" and args.scenario and args.id is None:
            parser.error("export-conic needs --id together with --scenario")
        if getattr(args, "eps", 1.0) <= 0:
            parser.error("--eps must be positive")
        return args

    def _settings(self) -> SolverSettings:
        return SolverSettings(
            eps_primal=self.config.eps,
            eps_dual=self.config.eps,
            eps_gap=self.config.eps,
            max_iters=self.config.max_iters,
            time_limit_s=self.config.time_limit,
        )

    def _network(self) -> Network:
        net = load_case(self.config.case)
        if getattr(self.config, "priorities", None):
            priorities = util.read_json(self.config.priorities)
            net = with_priorities(net, {int(k): float(v) for k, v in priorities.items()})
        return net

    def _scenario(self, net: Network) -> Optional[Scenario]:
        if not getattr(self.config, "scenario", None) or self.config.id is None:
            return None
        return load_scenarios(self.config.scenario, net).by_id(self.config.id)

    def check(self) -> int:
        net = self._network()
        print(
            f"{net.name}: {len(net.active_buses)} buses, {len(net.active_branches)} branches, "
            f"{len(net.active_generators)} generators, {len(net.active_loads)} loads, "
            f"{len(net.active_shunts)} shunts (base {net.base_mva} MVA)"
        )
        hazards = detect_hazards(propagate_outages(net))
        for hazard in hazards:
            print(f"{hazard.kind.value}: buses {sorted(hazard.component_ids)} {hazard.detail}")
        if not hazards:
            print("No hazards")
        return EXIT_OK

    def scenarios(self) -> int:
        net = self._network()
        scenario_set = generate(net, self.config.fraction, self.config.count, self.config.seed)
        output = self.config.output or util.default_output(config.SCENARIO_DIR, net.name, ".json")
        write_scenarios(output, scenario_set)
        return EXIT_OK

    def solve(self) -> int:
        net = self._network()
        outcome = solve_scenario(net, self._scenario(net), self._settings())
        for hazard in outcome.hazards:
            logger.warning(f"{hazard.kind.value} on buses {sorted(hazard.component_ids)}: {hazard.detail}")
        if outcome.status != SolverStatus.OPTIMAL.value:
            logger.error(f"Solver finished with status {outcome.status}")
            return EXIT_SOLVER
        if outcome.solution is None:
            print("Nothing left to serve after preprocessing")
            return EXIT_OK

        solution = outcome.solution
        print(
            f"Status {solution.status}: objective {solution.objective:.6f}, "
            f"served {solution.served_active * net.base_mva:.4f} MW ({100 * solution.served_fraction:.2f}%), "
            f"{solution.iterations} iterations in {solution.runtime_s:.2f}s"
        )
        if self.config.output:
            util.write_json(self.config.output, solution_to_dict(solution, net.base_mva))
        return EXIT_OK

    def solve_conic(self) -> int:
        prob = ConicProblem.from_dict(util.read_json(self.config.problem))
        result = solve(prob, self._settings())
        print(
            f"Status {result.status.value}: objective {result.objective:.8e}, "
            f"residuals primal {result.residuals.primal:.2e} dual {result.residuals.dual:.2e} "
            f"gap {result.residuals.gap:.2e}, {result.iterations} iterations"
        )
        return EXIT_OK if result.status == SolverStatus.OPTIMAL else EXIT_SOLVER

    def batch(self) -> int:
        net = self._network()
        scenario_set = load_scenarios(self.config.scenarios, net)
        workers = self.config.parallel if self.config.parallel > 0 else util.cpu_count()
        records = run_batch(net, scenario_set, self._settings(), workers)
        output = self.config.output or util.default_output(config.RESULTS_DIR, net.name, ".csv")
        write_records(records, output)
        summary = summarize(records)
        print(format_summary(summary))
        if self.config.hist:
            write_histogram(summary, self.config.hist)
        if self.config.parquet:
            write_parquet(records, self.config.parquet)
        return EXIT_OK

    def gap(self) -> int:
        net = self._network()
        if self.config.scenario and self.config.id is None:
            gaps = batch_gap(net, load_scenarios(self.config.scenario, net), self._settings())
            print(gaps.to_string(index=False))
            print(f"Mean gap over Optimal scenarios: {mean_gap(gaps):.4f}%")
            return EXIT_OK

        scenario = self._scenario(net)
        if scenario is not None:
            net = apply(net, scenario)
        estimate = gap_estimate(net, self._settings())
        print(
            f"Upper {estimate.upper:.6f}, lower {estimate.lower:.6f}, gap {estimate.gap_pct:.4f}% "
            f"(gamma {estimate.gamma:.6f}, relaxation {estimate.status})"
        )
        return EXIT_OK if estimate.status == SolverStatus.OPTIMAL.value else EXIT_SOLVER

    def export_conic(self) -> int:
        net = self._network()
        scenario = self._scenario(net)
        damaged = apply(net, scenario) if scenario is not None else net
        reduced, _ = preprocess_pipeline(damaged)
        prob = build_soc_mld_c(reduced, objective_weights(reduced))
        output = self.config.output or util.default_output(config.RESULTS_DIR, f"{net.name}-conic", ".json")
        util.write_json(output, export_conic(prob))
        return EXIT_OK

    def summarize(self) -> int:
        summaries = []
        for filename in self.config.results:
            summary = summarize(read_records(filename))
            summaries.append((filename, summary))
            print(f"== {filename}")
            print(format_summary(summary))
        if len(summaries) > 1:
            print(compare_summaries(summaries).to_string(index=False))
        return EXIT_OK

    def run(self) -> int:
        """Run the selected command and map failures to exit codes."""
        print_config()
        try:
            return self.handlers[self.config.command]()
        except CaseParseError as e:
            logger.error(f"Cannot parse case: {str(e)}")
        except (NetworkValidationError, ScenarioError, SolverArgumentError) as e:
            logger.error(f"Invalid input: {str(e)}")
        except (OSError, json.JSONDecodeError, KeyError, TypeError) as e:
            logger.error(f"Cannot read input: {str(e)}")
        except ValueError as e:
            logger.error(f"Invalid input: {str(e)}")
        return EXIT_INPUT


def main() -> None:
    """Main entry point for the application."""
    app = Application()
    sys.exit(app.run())


if __name__ == "__main__":
    main()
