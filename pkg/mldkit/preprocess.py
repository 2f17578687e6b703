import logging

from enum import Enum
from dataclasses import dataclass, replace
from typing import Dict, FrozenSet, Iterable, List, Set, Tuple

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components as csgraph_components

from netmodel import Network


logger = logging.getLogger(__name__)


class HazardKind(str, Enum):
    GEN_MIN_INJECTION = "GenMinInjection"
    SHUNT_ISLAND = "ShuntIsland"
    LINE_CHARGING_ISLAND = "LineChargingIsland"


@dataclass(frozen=True)
class HazardReport:
    kind: HazardKind
    component_ids: Tuple[int, ...]
    detail: str
    branch_ids: Tuple[int, ...] = ()

    def __post_init__(self):
        if not self.component_ids:
            raise ValueError("A hazard must name at least one bus")


@dataclass(frozen=True)
class ComponentPartition:
    components: Tuple[FrozenSet[int], ...]
    component_of: Dict[int, int]

    def __len__(self) -> int:
        return len(self.components)


def deactivate_buses(net: Network, buses: Iterable[int]) -> Network:
    """Take buses out of service along with everything attached to them."""
    dead = set(buses)
    if not dead:
        return net
    return propagate_outages(
        net.with_components(buses=[replace(b, in_service=False) if b.id in dead else b for b in net.buses])
    )


def propagate_outages(net: Network) -> Network:
    live = {bus.id for bus in net.active_buses}

    def off(item, attached: bool):
        return replace(item, in_service=False) if item.in_service and not attached else item

    branches = [off(br, br.from_bus in live and br.to_bus in live) for br in net.branches]
    generators = [off(gen, gen.bus in live) for gen in net.generators]
    loads = [off(load, load.bus in live) for load in net.loads]
    shunts = [off(shunt, shunt.bus in live) for shunt in net.shunts]

    changed = (
        any(a is not b for a, b in zip(branches, net.branches))
        or any(a is not b for a, b in zip(generators, net.generators))
        or any(a is not b for a, b in zip(loads, net.loads))
        or any(a is not b for a, b in zip(shunts, net.shunts))
    )
    if not changed:
        return net
    return net.with_components(branches=branches, generators=generators, loads=loads, shunts=shunts)


def _degrees(net: Network) -> Dict[int, int]:
    degree = {bus.id: 0 for bus in net.active_buses}
    for br in net.active_branches:
        if br.from_bus in degree and br.to_bus in degree:
            degree[br.from_bus] += 1
            degree[br.to_bus] += 1
    return degree


def deactivate_dangling_buses(net: Network) -> Network:
    """Strip degree-1 buses without load or generation until none are left.

    A shunt does not keep a bus alive.
    """
    removed = 0
    while True:
        degree = _degrees(net)
        dangling = [
            bus_id
            for bus_id, d in degree.items()
            if d == 1 and not net.loads_at[bus_id] and not net.gens_at[bus_id]
        ]
        if not dangling:
            break
        removed += len(dangling)
        net = deactivate_buses(net, dangling)
    if removed:
        logger.debug(f"Removed {removed} dangling buses")
    return net


def connected_components(net: Network) -> ComponentPartition:
    """Connected components over in-service buses and branches, ordered by smallest bus id."""
    bus_ids = [bus.id for bus in net.active_buses]
    if not bus_ids:
        return ComponentPartition(components=(), component_of={})

    position = {bus_id: k for k, bus_id in enumerate(bus_ids)}
    links = [br for br in net.active_branches if br.from_bus in position and br.to_bus in position]
    rows = [position[br.from_bus] for br in links]
    cols = [position[br.to_bus] for br in links]
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(bus_ids), len(bus_ids)))
    _, labels = csgraph_components(graph, directed=False)

    groups: Dict[int, Set[int]] = {}
    for bus_id, label in zip(bus_ids, labels):
        groups.setdefault(int(label), set()).add(bus_id)
    components = tuple(sorted((frozenset(g) for g in groups.values()), key=min))
    component_of = {bus_id: k for k, comp in enumerate(components) for bus_id in comp}
    return ComponentPartition(components=components, component_of=component_of)


def deactivate_dead_components(net: Network) -> Network:
    dead: List[int] = []
    for comp in connected_components(net).components:
        if not any(net.loads_at[b] or net.gens_at[b] for b in comp):
            dead.extend(comp)
    if dead:
        logger.debug(f"Deactivating {len(dead)} buses in components without load or generation")
    return deactivate_buses(net, dead)


def largest_component(net: Network) -> Network:
    partition = connected_components(net)
    if len(partition) <= 1:
        return net
    # max() keeps the first of equal sizes, i.e. the one holding the smallest bus id
    keep = max(partition.components, key=len)
    others = [b for comp in partition.components if comp is not keep for b in comp]
    return deactivate_buses(net, others)


def detect_hazards(net: Network) -> List[HazardReport]:
    """Scan each connected component for the three known infeasibility patterns.

    Advisory only; the network is never modified.
    """
    hazards: List[HazardReport] = []
    for comp in connected_components(net).components:
        buses = sorted(comp)
        gens = [g for b in buses for g in net.gens_at[b]]
        shunts = [s for b in buses for s in net.shunts_at[b]]
        load_p = sum(load.demand.real for b in buses for load in net.loads_at[b])
        absorption = sum(abs(s.admittance.real) * net.bus_index[s.bus].v_max ** 2 for s in shunts)

        min_injection = sum(g.p_min for g in gens)
        if gens and min_injection > load_p + absorption:
            hazards.append(
                HazardReport(
                    kind=HazardKind.GEN_MIN_INJECTION,
                    component_ids=tuple(buses),
                    detail=(
                        f"minimum generation {min_injection:.6g} p.u. exceeds load {load_p:.6g} p.u. "
                        f"plus shunt absorption {absorption:.6g} p.u."
                    ),
                )
            )

        if shunts and not gens:
            hazards.append(
                HazardReport(
                    kind=HazardKind.SHUNT_ISLAND,
                    component_ids=tuple(buses),
                    detail=f"{len(shunts)} fixed shunt(s) with no generator to balance them",
                )
            )

        if len(buses) == 2:
            inner = [br for br in net.active_branches if br.from_bus in comp and br.to_bus in comp]
            if (
                len(inner) == 1
                and (inner[0].charge_from != 0 or inner[0].charge_to != 0)
                and all(net.bus_index[b].v_min > 0 for b in buses)
            ):
                hazards.append(
                    HazardReport(
                        kind=HazardKind.LINE_CHARGING_ISLAND,
                        component_ids=tuple(buses),
                        detail=f"branch {inner[0].id} is charged but no power can flow",
                        branch_ids=(inner[0].id,),
                    )
                )
    for hazard in hazards:
        logger.debug(f"{hazard.kind.value} on buses {list(hazard.component_ids)}: {hazard.detail}")
    return hazards


def preprocess_pipeline(net: Network) -> Tuple[Network, List[HazardReport]]:
    """Propagate outages, report hazards, then reduce to the largest live component."""
    net = propagate_outages(net)
    hazards = detect_hazards(net)
    net = deactivate_dangling_buses(net)
    net = deactivate_dead_components(net)
    net = largest_component(net)
    return net, hazards
