import json
import logging

from decimal import Decimal, ROUND_HALF_UP
from dataclasses import dataclass, replace
from typing import Any, Dict, List, Optional, Tuple

from netmodel import Network


logger = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15


class ScenarioError(ValueError):
    pass


class SplitMix64:
    """splitmix64 generator; every step is reduced modulo 2^64."""

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)


@dataclass(frozen=True)
class Scenario:
    id: int
    removed_branches: Tuple[int, ...]

    def __post_init__(self):
        if len(set(self.removed_branches)) != len(self.removed_branches):
            raise ScenarioError(f"Scenario {self.id} removes a branch twice")


@dataclass(frozen=True)
class ScenarioSet:
    seed: int
    fraction: float
    count: int
    scenarios: Tuple[Scenario, ...]
    case: str = "case"

    def __post_init__(self):
        if len(self.scenarios) != self.count:
            raise ScenarioError(f"Expected {self.count} scenarios, found {len(self.scenarios)}")

    def by_id(self, scenario_id: int) -> Scenario:
        for scenario in self.scenarios:
            if scenario.id == scenario_id:
                return scenario
        raise ScenarioError(f"No scenario with id {scenario_id}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "fraction": self.fraction,
            "count": self.count,
            "case": self.case,
            "scenarios": [{"id": s.id, "removed": list(s.removed_branches)} for s in self.scenarios],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "ScenarioSet":
        try:
            scenarios = tuple(
                Scenario(id=int(s["id"]), removed_branches=tuple(int(b) for b in s["removed"]))
                for s in payload["scenarios"]
            )
            return cls(
                seed=int(payload["seed"]),
                fraction=float(payload["fraction"]),
                count=int(payload["count"]),
                scenarios=scenarios,
                case=str(payload.get("case", "case")),
            )
        except (KeyError, TypeError) as e:
            raise ScenarioError(f"Malformed scenario file: {e}")


def damage_count(branch_total: int, fraction: float) -> int:
    """Number of branches to remove, rounded half up.

    The product is taken in decimal so that e.g. 0.3 * 5 rounds to 2 rather
    than falling just below the half.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ScenarioError(f"Damage fraction must be within [0, 1], got {fraction}")
    k = (Decimal(str(fraction)) * Decimal(branch_total)).quantize(Decimal(1), rounding=ROUND_HALF_UP)
    return int(k)


def _scenario_seed(seed: int, scenario_id: int) -> int:
    return (seed ^ ((scenario_id * GOLDEN_GAMMA) & MASK64)) & MASK64


def _draw(candidates: List[int], k: int, rng: SplitMix64) -> Tuple[int, ...]:
    # partial Fisher-Yates, first k slots
    pool = list(candidates)
    n = len(pool)
    for i in range(k):
        j = i + rng.next() % (n - i)
        pool[i], pool[j] = pool[j], pool[i]
    return tuple(sorted(pool[:k]))


def generate(net: Network, fraction: float, count: int, seed: int) -> ScenarioSet:
    """Draw `count` N-k branch outage scenarios over the in-service branches.

    Args:
        net: base network; only in-service branches are candidates
        fraction: share of in-service branches removed per scenario
        count: number of scenarios, ids 0..count-1
        seed: 64-bit seed; scenario i uses its own stream derived from it

    Returns:
        ScenarioSet whose regeneration from the same arguments is bit-identical
    """
    candidates = sorted(br.id for br in net.active_branches)
    if not candidates:
        raise ScenarioError("Network has no in-service branch to remove")
    if count <= 0:
        raise ScenarioError(f"Scenario count must be positive, got {count}")
    k = damage_count(len(candidates), fraction)
    if k == 0:
        raise ScenarioError(f"Fraction {fraction} removes no branch out of {len(candidates)}")

    scenarios = tuple(
        Scenario(id=i, removed_branches=_draw(candidates, k, SplitMix64(_scenario_seed(seed, i))))
        for i in range(count)
    )
    logger.info(f"Generated {count} N-{k} scenarios on {net.name} (seed {seed})")
    return ScenarioSet(seed=seed & MASK64, fraction=fraction, count=count, scenarios=scenarios, case=net.name)


def apply(net: Network, scenario: Scenario) -> Network:
    """Mark the scenario's branches out of service; nothing else changes."""
    removed = set(scenario.removed_branches)
    unknown = sorted(removed - set(net.branch_index))
    if unknown:
        raise ScenarioError(f"Scenario {scenario.id} removes unknown branches {unknown}")
    if not removed:
        return net
    branches = [replace(br, in_service=False) if br.id in removed else br for br in net.branches]
    return net.with_components(branches=branches)


def write_scenarios(filename: str, scenario_set: ScenarioSet) -> None:
    with open(filename, "w") as f:
        f.write(scenario_set.to_json())
    logger.info(f"Saved {scenario_set.count} scenarios to {filename}")


def load_scenarios(filename: str, net: Optional[Network] = None) -> ScenarioSet:
    try:
        with open(filename, "r") as f:
            payload = json.load(f)
    except json.JSONDecodeError as e:
        raise ScenarioError(f"{filename} is not valid JSON: {e}")
    scenario_set = ScenarioSet.from_dict(payload)
    if net is not None:
        known = set(net.branch_index)
        for scenario in scenario_set.scenarios:
            unknown = sorted(set(scenario.removed_branches) - known)
            if unknown:
                raise ScenarioError(f"Scenario {scenario.id} references unknown branches {unknown}")
    return scenario_set
