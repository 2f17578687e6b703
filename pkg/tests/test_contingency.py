from collections import Counter

import pytest

from scipy.stats import chisquare

from contingency import (
    Scenario,
    ScenarioError,
    ScenarioSet,
    SplitMix64,
    apply,
    damage_count,
    generate,
    load_scenarios,
    write_scenarios,
)


@pytest.mark.parametrize(
    "branches, k",
    [(120, 36), (448, 134), (1991, 597), (2531, 759), (2896, 869), (3693, 1108), (9000, 2700), (5, 2)],
)
def test_damage_count(branches, k):
    assert damage_count(branches, 0.3) == k


@pytest.mark.parametrize("fraction", [-0.1, 1.5])
def test_damage_count_bounds(fraction):
    with pytest.raises(ScenarioError):
        damage_count(10, fraction)


def test_splitmix64_reference():
    rng = SplitMix64(1234567)
    assert [rng.next() for _ in range(3)] == [6457827717110365317, 3203168211198807973, 9817491932198370423]


def test_generate_is_deterministic(five_bus):
    first = generate(five_bus, 0.3, 3, seed=42)
    second = generate(five_bus, 0.3, 3, seed=42)
    assert first == second
    assert first.to_json() == second.to_json()
    assert [s.id for s in first.scenarios] == [0, 1, 2]
    for scenario in first.scenarios:
        assert len(scenario.removed_branches) == 2
        assert list(scenario.removed_branches) == sorted(set(scenario.removed_branches))
    assert generate(five_bus, 0.3, 3, seed=43) != first


def test_generate_everything(five_bus):
    (scenario,) = generate(five_bus, 1.0, 1, seed=7).scenarios
    assert scenario.removed_branches == (1, 2, 3, 4, 5)


def test_generate_frequencies(five_bus):
    scenarios = generate(five_bus, 0.3, 10_000, seed=2024).scenarios
    counts = Counter(b for s in scenarios for b in s.removed_branches)
    assert set(counts) == {1, 2, 3, 4, 5}
    # each branch lands in a 2-of-5 draw with probability 0.4
    observed = [counts[b] for b in range(1, 6)]
    assert chisquare(observed, [4000] * 5).pvalue > 0.001


def test_generate_only_in_service(five_bus):
    cut = apply(five_bus, Scenario(id=0, removed_branches=(5,)))
    for scenario in generate(cut, 0.5, 50, seed=1).scenarios:
        assert 5 not in scenario.removed_branches


@pytest.mark.parametrize("fraction, count", [(0.3, 0), (0.05, 3)])
def test_generate_errors(five_bus, fraction, count):
    with pytest.raises(ScenarioError):
        generate(five_bus, fraction, count, seed=0)


def test_apply(five_bus):
    assert apply(five_bus, Scenario(id=0, removed_branches=())) == five_bus
    scenario = Scenario(id=0, removed_branches=(2, 3))
    once = apply(five_bus, scenario)
    assert {br.id for br in once.active_branches} == {1, 4, 5}
    assert all(bus.in_service for bus in once.buses)
    assert apply(once, scenario) == once

    with pytest.raises(ScenarioError):
        apply(five_bus, Scenario(id=0, removed_branches=(9,)))
    with pytest.raises(ScenarioError):
        Scenario(id=0, removed_branches=(1, 1))


def test_scenario_file(five_bus, tmp_path):
    scenario_set = generate(five_bus, 0.3, 4, seed=3)
    path = tmp_path / "scen.json"
    write_scenarios(str(path), scenario_set)
    assert load_scenarios(str(path), five_bus) == scenario_set
    assert scenario_set.by_id(2) == scenario_set.scenarios[2]
    with pytest.raises(ScenarioError):
        scenario_set.by_id(9)

    other = ScenarioSet.from_dict({**scenario_set.to_dict(), "scenarios": [{"id": 0, "removed": [8]}], "count": 1})
    path.write_text(other.to_json())
    with pytest.raises(ScenarioError):
        load_scenarios(str(path), five_bus)

    path.write_text("{not json")
    with pytest.raises(ScenarioError):
        load_scenarios(str(path))
