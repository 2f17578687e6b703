import itertools

import numpy as np
import pytest

from dataclasses import replace

from conftest import damaged, path_network
from netmodel import Branch, Bus, Network, Shunt
from contingency import generate, apply
from preprocess import (
    HazardKind,
    connected_components,
    deactivate_dangling_buses,
    deactivate_dead_components,
    detect_hazards,
    largest_component,
    preprocess_pipeline,
    propagate_outages,
)


def active_bus_ids(net: Network):
    return {bus.id for bus in net.active_buses}


def test_propagate_outages(five_bus):
    buses = [replace(b, in_service=False) if b.id == 3 else b for b in five_bus.buses]
    net = propagate_outages(five_bus.with_components(buses=buses))
    assert not net.generators[1].in_service
    assert {br.id for br in net.active_branches} == {1, 4, 5}

    assert propagate_outages(five_bus) is five_bus
    cut = damaged(five_bus, 2, 3)
    assert propagate_outages(cut) is cut
    assert 3 in active_bus_ids(cut)


def test_dangling_buses():
    net = path_network(3, gens=[3], loads=[1])
    assert deactivate_dangling_buses(net) == net

    net = deactivate_dangling_buses(path_network(3, gens=[1]))
    assert active_bus_ids(net) == {1}
    assert not net.active_branches


def test_shunt_does_not_protect_dangling_bus():
    net = path_network(3, gens=[1], loads=[2])
    net = net.with_components(shunts=[Shunt(id=1, bus=3, admittance=complex(0.0, 0.2))])
    reduced = deactivate_dangling_buses(net)
    assert active_bus_ids(reduced) == {1, 2}
    assert not reduced.active_shunts


def test_intact_cycle_unchanged(five_bus):
    assert deactivate_dangling_buses(five_bus) == five_bus
    assert preprocess_pipeline(five_bus) == (five_bus, [])


def test_connected_components(five_bus):
    assert connected_components(five_bus).components == (frozenset({1, 2, 3, 4, 5}),)
    partition = connected_components(damaged(five_bus, 2, 3))
    assert partition.components == (frozenset({1, 2, 4, 5}), frozenset({3}))
    assert partition.component_of[3] == 1

    empty = five_bus.with_components(buses=[replace(b, in_service=False) for b in five_bus.buses])
    assert len(connected_components(propagate_outages(empty))) == 0


def transitive_closure(n: int, edges):
    reach = np.eye(n, dtype=bool)
    for i, j in edges:
        reach[i, j] = reach[j, i] = True
    for k in range(n):
        reach |= reach[:, [k]] & reach[[k], :]
    return {frozenset(int(j) + 1 for j in np.flatnonzero(reach[i])) for i in range(n)}


@pytest.mark.parametrize("seed", range(20))
def test_components_match_closure(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 51))
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    count = int(rng.integers(0, min(len(pairs), 2 * n) + 1))
    edges = [pairs[k] for k in rng.choice(len(pairs), size=count, replace=False)] if count else []
    net = Network(
        base_mva=100.0,
        buses=tuple(Bus(id=i + 1, v_min=0.9, v_max=1.1) for i in range(n)),
        branches=tuple(
            Branch(id=k + 1, from_bus=i + 1, to_bus=j + 1, r=0.01, x=0.1, b=0.0) for k, (i, j) in enumerate(edges)
        ),
    )
    assert set(connected_components(net).components) == transitive_closure(n, edges)


def test_dead_components(five_bus):
    bare = five_bus.with_components(buses=five_bus.buses + (Bus(id=6, v_min=0.9, v_max=1.1),))
    assert 6 not in active_bus_ids(deactivate_dead_components(bare))

    # charged branch 4-5 keeps its loads
    cut = damaged(five_bus, 3, 5)
    assert {4, 5} <= active_bus_ids(deactivate_dead_components(cut))

    # bus 2 left with only its shunt
    cut = deactivate_dead_components(damaged(five_bus, 1, 2))
    assert 2 not in active_bus_ids(cut)
    assert not cut.active_shunts


def test_largest_component(five_bus):
    assert active_bus_ids(largest_component(damaged(five_bus, 2, 3))) == {1, 2, 4, 5}
    assert largest_component(five_bus) == five_bus

    # 1-2 | 3-5-4 minus 4-5 leaves {1,2} {3,5} {4}: ties go to bus 1
    net = largest_component(damaged(five_bus, 2, 4, 5))
    assert active_bus_ids(net) == {1, 2}


HAZARD_TABLE = {
    (1, 2): {HazardKind.SHUNT_ISLAND: (2,)},
    (1, 3): {HazardKind.GEN_MIN_INJECTION: (2, 3)},
    (2, 3): {HazardKind.GEN_MIN_INJECTION: (3,)},
    (3, 5): {HazardKind.LINE_CHARGING_ISLAND: (4, 5), HazardKind.GEN_MIN_INJECTION: (1, 2, 3)},
}


@pytest.mark.parametrize("pair", list(itertools.combinations(range(1, 6), 2)))
def test_hazards_on_every_double_outage(five_bus, pair):
    hazards = detect_hazards(propagate_outages(damaged(five_bus, *pair)))
    found = {h.kind: h.component_ids for h in hazards}
    assert found == HAZARD_TABLE.get(pair, {})
    assert len(hazards) == len(found)


def test_line_charging_reports_branch(five_bus):
    (hazard,) = [
        h for h in detect_hazards(damaged(five_bus, 3, 5)) if h.kind == HazardKind.LINE_CHARGING_ISLAND
    ]
    assert hazard.branch_ids == (4,)


def test_line_charging_flagged_with_generator():
    net = path_network(2, gens=[1])
    net = net.with_components(branches=[replace(net.branches[0], b=0.2)])
    (hazard,) = detect_hazards(net)
    assert hazard.kind == HazardKind.LINE_CHARGING_ISLAND
    assert hazard.component_ids == (1, 2)

    floorless = net.with_components(buses=[replace(net.buses[1], v_min=0.0)])
    assert detect_hazards(floorless) == []


def test_hazards_leave_network_untouched(five_bus):
    cut = damaged(five_bus, 2, 3)
    before = cut.with_components()
    detect_hazards(cut)
    assert cut == before


def test_pipeline_isolated_generator(five_bus):
    reduced, hazards = preprocess_pipeline(damaged(five_bus, 2, 3))
    # bus 2 keeps only its shunt once 2-3 is gone, so it is stripped as dangling
    assert active_bus_ids(reduced) == {1, 4, 5}
    assert [h.kind for h in hazards] == [HazardKind.GEN_MIN_INJECTION]
    assert not reduced.generators[1].in_service


def test_pipeline_idempotent(five_bus, case14):
    for net in (five_bus, damaged(five_bus, 2, 3), damaged(five_bus, 3, 5)):
        once, _ = preprocess_pipeline(net)
        assert preprocess_pipeline(once)[0] == once

    for scenario in generate(case14, 0.3, 200, seed=11).scenarios:
        once, _ = preprocess_pipeline(apply(case14, scenario))
        assert preprocess_pipeline(once)[0] == once
        assert len(connected_components(once)) <= 1


def test_pipeline_keeps_served_buses(case14):
    """A bus with load or generation only goes when its whole component goes."""
    for scenario in generate(case14, 0.3, 100, seed=5).scenarios:
        net = propagate_outages(apply(case14, scenario))
        reduced, _ = preprocess_pipeline(net)
        kept = active_bus_ids(reduced)
        partition = connected_components(net)
        for bus in net.active_buses:
            if net.loads_at[bus.id] or net.gens_at[bus.id]:
                comp = partition.components[partition.component_of[bus.id]]
                assert (bus.id in kept) == bool(comp & kept)
