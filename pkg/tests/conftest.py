import os

import pytest

from netmodel import Branch, Bus, Generator, Load, Network, five_bus_fixture, load_case
from contingency import Scenario, apply
from conic import Solver, SolverSettings, SolverStatus


TEST_DATA_FOLDER = os.path.join(os.path.dirname(__file__), "data")


def damaged(net: Network, *branch_ids: int) -> Network:
    return apply(net, Scenario(id=0, removed_branches=tuple(branch_ids)))


def path_network(n: int, gens=(), loads=()) -> Network:
    """Buses 1..n joined in a line, generators and loads placed at the given buses."""
    return Network(
        base_mva=100.0,
        buses=tuple(Bus(id=i, v_min=0.9, v_max=1.1) for i in range(1, n + 1)),
        branches=tuple(Branch(id=i, from_bus=i, to_bus=i + 1, r=0.01, x=0.1, b=0.0) for i in range(1, n)),
        generators=tuple(
            Generator(id=k, bus=b, p_min=0.0, p_max=2.0, q_min=-2.0, q_max=2.0) for k, b in enumerate(gens, start=1)
        ),
        loads=tuple(Load(id=k, bus=b, demand=complex(0.3, 0.05)) for k, b in enumerate(loads, start=1)),
        name=f"path{n}",
    )


@pytest.fixture
def five_bus() -> Network:
    return five_bus_fixture()


@pytest.fixture(scope="session")
def case9() -> Network:
    return load_case(os.path.join(TEST_DATA_FOLDER, "case9.m"))


@pytest.fixture(scope="session")
def case14() -> Network:
    return load_case(os.path.join(TEST_DATA_FOLDER, "case14.m"))


@pytest.fixture
def settings() -> SolverSettings:
    return SolverSettings(time_limit_s=60.0)


@pytest.fixture
def tight_settings() -> SolverSettings:
    return SolverSettings(eps_primal=1e-8, eps_dual=1e-8, eps_gap=1e-8, time_limit_s=60.0)


@pytest.fixture(autouse=True)
def optimal_within_tolerances(monkeypatch):
    """Any Optimal status reported during a test must meet the tolerances it was solved with."""
    solve = Solver.solve

    def checked(self, prob):
        result = solve(self, prob)
        if result.status == SolverStatus.OPTIMAL:
            assert result.residuals.primal <= self.settings.eps_primal
            assert result.residuals.dual <= self.settings.eps_dual
            assert result.residuals.gap <= self.settings.eps_gap
        return result

    monkeypatch.setattr(Solver, "solve", checked)
