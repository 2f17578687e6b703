import re
import math
import cmath
import logging

from pathlib import Path
from functools import cached_property
from dataclasses import dataclass, replace
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Tuple


logger = logging.getLogger(__name__)

# Bounds at or beyond this magnitude (MW / MVAr) are read as infinite.
INFINITE_BOUND = 1e9

BUS_COLUMNS = 13
GEN_COLUMNS = 10
BRANCH_COLUMNS = 11
ISOLATED_BUS_TYPE = 4


def _stable(value: float, to_file: Callable[[float], float], from_file: Callable[[float], float]) -> float:
    """Settle a unit conversion so that writing and re-reading reproduces the value exactly."""
    for _ in range(4):
        settled = from_file(to_file(value))
        if settled == value:
            break
        value = settled
    return value


def _per_unit(value: float, base: float) -> float:
    if math.isinf(value) or abs(value) >= INFINITE_BOUND:
        return math.copysign(math.inf, value)
    return _stable(value / base, lambda v: v * base, lambda v: v / base)


def _radians(degrees: float) -> float:
    return _stable(math.radians(degrees), math.degrees, math.radians)


# Angle-difference bounds are clamped to +/- 60 degrees, strictly inside (-pi/2, pi/2).
ANGLE_LIMIT = _radians(math.degrees(1.0472))


class CaseParseError(ValueError):
    def __init__(self, message: str, line: int = 0):
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line


class NetworkValidationError(ValueError):
    pass


@dataclass(frozen=True)
class Bus:
    id: int
    v_min: float
    v_max: float
    in_service: bool = True
    bus_type: int = 1
    base_kv: float = 0.0


@dataclass(frozen=True)
class Generator:
    id: int
    bus: int
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    cost_c0: float = 0.0
    cost_c1: float = 0.0
    cost_c2: float = 0.0
    in_service: bool = True


@dataclass(frozen=True)
class Load:
    id: int
    bus: int
    demand: complex
    priority: float = 1.0
    in_service: bool = True


@dataclass(frozen=True)
class Shunt:
    id: int
    bus: int
    admittance: complex
    in_service: bool = True


@dataclass(frozen=True)
class Branch:
    """A pi-model branch with an ideal transformer on the from side.

    r, x and b are kept as read so the case file can be written back exactly;
    the admittances used by the formulation are derived from them.

    Args:
        ratio: off-nominal tap magnitude (1.0 when the file says 0)
        shift: phase shift in radians
        rating: apparent power limit in p.u., math.inf when unlimited
        angmin/angmax: angle-difference bounds in radians
    """

    id: int
    from_bus: int
    to_bus: int
    r: float
    x: float
    b: float
    ratio: float = 1.0
    shift: float = 0.0
    rating: float = math.inf
    angmin: float = -ANGLE_LIMIT
    angmax: float = ANGLE_LIMIT
    in_service: bool = True

    @property
    def series_admittance(self) -> complex:
        return series_admittance(self.r, self.x)

    @property
    def charge_from(self) -> complex:
        return complex(0.0, self.b / 2.0)

    @property
    def charge_to(self) -> complex:
        return complex(0.0, self.b / 2.0)

    @property
    def tap(self) -> complex:
        return self.ratio * cmath.exp(1j * self.shift)


@dataclass(frozen=True)
class Network:
    """Per-unit network model.

    Components are stored as tuples in case-file order. The adjacency maps only
    cover in-service components; they are computed lazily and never change
    since the network itself is immutable. Use `with_components` to derive
    modified copies.
    """

    base_mva: float
    buses: Tuple[Bus, ...]
    branches: Tuple[Branch, ...] = ()
    generators: Tuple[Generator, ...] = ()
    loads: Tuple[Load, ...] = ()
    shunts: Tuple[Shunt, ...] = ()
    name: str = "case"

    def __post_init__(self):
        validate_network(self)

    def with_components(self, **changes) -> "Network":
        return replace(self, **{k: tuple(v) for k, v in changes.items()})

    @cached_property
    def bus_index(self) -> Dict[int, Bus]:
        return {bus.id: bus for bus in self.buses}

    @cached_property
    def branch_index(self) -> Dict[int, Branch]:
        return {br.id: br for br in self.branches}

    @cached_property
    def active_buses(self) -> Tuple[Bus, ...]:
        return tuple(bus for bus in self.buses if bus.in_service)

    @cached_property
    def active_branches(self) -> Tuple[Branch, ...]:
        return tuple(br for br in self.branches if br.in_service)

    @cached_property
    def active_generators(self) -> Tuple[Generator, ...]:
        return tuple(gen for gen in self.generators if gen.in_service)

    @cached_property
    def active_loads(self) -> Tuple[Load, ...]:
        return tuple(load for load in self.loads if load.in_service)

    @cached_property
    def active_shunts(self) -> Tuple[Shunt, ...]:
        return tuple(shunt for shunt in self.shunts if shunt.in_service)

    def _group(self, items: Iterable, key: Callable) -> Dict[int, Tuple]:
        grouped: Dict[int, List] = {bus.id: [] for bus in self.active_buses}
        for item in items:
            if key(item) in grouped:
                grouped[key(item)].append(item)
        return {k: tuple(v) for k, v in grouped.items()}

    @cached_property
    def gens_at(self) -> Dict[int, Tuple[Generator, ...]]:
        """G_i"""
        return self._group(self.active_generators, lambda g: g.bus)

    @cached_property
    def loads_at(self) -> Dict[int, Tuple[Load, ...]]:
        """L_i"""
        return self._group(self.active_loads, lambda l: l.bus)

    @cached_property
    def shunts_at(self) -> Dict[int, Tuple[Shunt, ...]]:
        """H_i"""
        return self._group(self.active_shunts, lambda s: s.bus)

    @cached_property
    def branches_from(self) -> Dict[int, Tuple[Branch, ...]]:
        """E_i: in-service branches oriented from bus i."""
        return self._group(self.active_branches, lambda br: br.from_bus)

    @cached_property
    def branches_to(self) -> Dict[int, Tuple[Branch, ...]]:
        """E^R_i: in-service branches arriving at bus i."""
        return self._group(self.active_branches, lambda br: br.to_bus)


def series_admittance(r: float, x: float) -> complex:
    if r == 0.0 and x == 0.0:
        raise NetworkValidationError("Zero impedance branches are not supported")
    return 1.0 / complex(r, x)


def validate_network(net: Network) -> None:
    if not net.base_mva > 0:
        raise NetworkValidationError(f"baseMVA must be positive, got {net.base_mva}")

    for label, items in [
        ("bus", net.buses),
        ("branch", net.branches),
        ("generator", net.generators),
        ("load", net.loads),
        ("shunt", net.shunts),
    ]:
        ids = [item.id for item in items]
        if len(ids) != len(set(ids)):
            raise NetworkValidationError(f"Duplicate {label} ids")

    bus_ids = {bus.id for bus in net.buses}
    for bus in net.buses:
        if not (0 <= bus.v_min <= bus.v_max):
            raise NetworkValidationError(f"Bus {bus.id}: voltage bounds [{bus.v_min}, {bus.v_max}] are invalid")

    for br in net.branches:
        if br.from_bus not in bus_ids or br.to_bus not in bus_ids:
            raise NetworkValidationError(f"Branch {br.id} references a missing bus ({br.from_bus}, {br.to_bus})")
        if br.from_bus == br.to_bus:
            raise NetworkValidationError(f"Branch {br.id} is a self loop on bus {br.from_bus}")
        if br.ratio <= 0:
            raise NetworkValidationError(f"Branch {br.id}: tap ratio must be positive")
        if br.r == 0.0 and br.x == 0.0:
            raise NetworkValidationError(f"Branch {br.id}: zero impedance branches are not supported")
        if not (-math.pi / 2 < br.angmin <= br.angmax < math.pi / 2):
            raise NetworkValidationError(f"Branch {br.id}: angle bounds [{br.angmin}, {br.angmax}] are invalid")
        if br.rating < 0:
            raise NetworkValidationError(f"Branch {br.id}: negative rating")

    for gen in net.generators:
        if gen.bus not in bus_ids:
            raise NetworkValidationError(f"Generator {gen.id} references missing bus {gen.bus}")
        if gen.p_min > gen.p_max or gen.q_min > gen.q_max:
            raise NetworkValidationError(f"Generator {gen.id}: inconsistent injection bounds")

    for load in net.loads:
        if load.bus not in bus_ids:
            raise NetworkValidationError(f"Load {load.id} references missing bus {load.bus}")
        if load.priority < 0:
            raise NetworkValidationError(f"Load {load.id}: negative priority {load.priority}")

    for shunt in net.shunts:
        if shunt.bus not in bus_ids:
            raise NetworkValidationError(f"Shunt {shunt.id} references missing bus {shunt.bus}")


TABLE_PATTERN = re.compile(r"^\s*mpc\.(\w+)\s*=\s*\[(.*)$")
SCALAR_PATTERN = re.compile(r"^\s*mpc\.(\w+)\s*=\s*([^\[\{;]+);?")
FUNCTION_PATTERN = re.compile(r"^\s*function\s+\w+\s*=\s*(\w+)")


def _read_tables(text: str) -> Tuple[Dict[str, float], Dict[str, List[Tuple[int, List[float]]]], Optional[str]]:
    scalars: Dict[str, float] = {}
    tables: Dict[str, List[Tuple[int, List[float]]]] = {}
    name = None
    current = None

    def take_rows(chunk: str, lineno: int):
        for row in chunk.split(";"):
            tokens = row.replace(",", " ").split()
            if not tokens:
                continue
            try:
                tables[current].append((lineno, [float(t) for t in tokens]))
            except ValueError:
                raise CaseParseError(f"non-numeric entry in table '{current}': {row.strip()}", lineno)

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("%", 1)[0]
        if current is not None:
            if "]" in line:
                take_rows(line.split("]", 1)[0], lineno)
                current = None
            else:
                take_rows(line, lineno)
            continue

        match = FUNCTION_PATTERN.match(line)
        if match:
            name = match.group(1)
            continue
        match = TABLE_PATTERN.match(line)
        if match:
            current = match.group(1)
            tables[current] = []
            rest = match.group(2)
            if "]" in rest:
                take_rows(rest.split("]", 1)[0], lineno)
                current = None
            else:
                take_rows(rest, lineno)
            continue
        match = SCALAR_PATTERN.match(line)
        if match:
            try:
                scalars[match.group(1)] = float(match.group(2).strip())
            except ValueError:
                # version strings and other non-numeric scalars
                pass

    if current is not None:
        raise CaseParseError(f"table '{current}' is never closed", len(text.splitlines()))
    return scalars, tables, name


def _require(tables, key: str, width: int) -> List[Tuple[int, List[float]]]:
    if key not in tables:
        raise CaseParseError(f"missing '{key}' table")
    for lineno, row in tables[key]:
        if len(row) < width:
            raise CaseParseError(f"'{key}' row has {len(row)} columns, expected at least {width}", lineno)
    return tables[key]


def parse_case(text: str, name: Optional[str] = None) -> Network:
    """Parse a matrix-style case file into a per-unit Network.

    Args:
        text: the case file contents
        name: case name, defaults to the `function mpc = <name>` header

    Returns:
        A validated Network. Loads and shunts are numbered in bus-table order,
        generators and branches by their row in the respective table.

    Note:
        - Only polynomial gencost rows are read; piecewise rows leave the
          coefficients at zero.
        - A rateA of 0 means the branch has no thermal limit.
    """
    scalars, tables, header = _read_tables(text)
    if "baseMVA" not in scalars:
        raise CaseParseError("missing baseMVA")
    base = scalars["baseMVA"]

    buses, loads, shunts = [], [], []
    for lineno, row in _require(tables, "bus", BUS_COLUMNS):
        bus_id = int(row[0])
        bus_type = int(row[1])
        buses.append(
            Bus(
                id=bus_id,
                v_min=row[12],
                v_max=row[11],
                in_service=bus_type != ISOLATED_BUS_TYPE,
                bus_type=bus_type,
                base_kv=row[9],
            )
        )
        if row[2] != 0 or row[3] != 0:
            demand = complex(_per_unit(row[2], base), _per_unit(row[3], base))
            loads.append(Load(id=len(loads) + 1, bus=bus_id, demand=demand))
        if row[4] != 0 or row[5] != 0:
            admittance = complex(_per_unit(row[4], base), _per_unit(row[5], base))
            shunts.append(Shunt(id=len(shunts) + 1, bus=bus_id, admittance=admittance))

    costs: List[Tuple[float, float, float]] = []
    for lineno, row in tables.get("gencost", []):
        if len(row) < 4:
            raise CaseParseError("'gencost' row is too short", lineno)
        model, n = int(row[0]), int(row[3])
        coefficients = row[4 : 4 + n]
        if model != 2 or len(coefficients) != n or n > 3:
            logger.warning(f"Line {lineno}: ignoring unsupported gencost row (model {model}, n {n})")
            costs.append((0.0, 0.0, 0.0))
            continue
        padded = [0.0] * (3 - n) + list(coefficients)
        costs.append((padded[2], padded[1], padded[0]))

    generators = []
    for index, (lineno, row) in enumerate(_require(tables, "gen", GEN_COLUMNS)):
        c0, c1, c2 = costs[index] if index < len(costs) else (0.0, 0.0, 0.0)
        generators.append(
            Generator(
                id=index + 1,
                bus=int(row[0]),
                p_min=_per_unit(row[9], base),
                p_max=_per_unit(row[8], base),
                q_min=_per_unit(row[4], base),
                q_max=_per_unit(row[3], base),
                cost_c0=c0,
                cost_c1=c1,
                cost_c2=c2,
                in_service=row[7] > 0,
            )
        )

    branches = []
    for index, (lineno, row) in enumerate(_require(tables, "branch", BRANCH_COLUMNS)):
        angmin, angmax = -ANGLE_LIMIT, ANGLE_LIMIT
        if len(row) >= 13 and not (row[11] == 0 and row[12] == 0):
            angmin = min(max(_radians(row[11]), -ANGLE_LIMIT), ANGLE_LIMIT)
            angmax = min(max(_radians(row[12]), -ANGLE_LIMIT), ANGLE_LIMIT)
            if angmin != _radians(row[11]) or angmax != _radians(row[12]):
                logger.debug(f"Line {lineno}: angle bounds clamped to +/-{ANGLE_LIMIT} rad")
        branches.append(
            Branch(
                id=index + 1,
                from_bus=int(row[0]),
                to_bus=int(row[1]),
                r=row[2],
                x=row[3],
                b=row[4],
                ratio=row[8] if row[8] != 0 else 1.0,
                shift=_radians(row[9]),
                rating=_per_unit(row[5], base) if row[5] != 0 else math.inf,
                angmin=angmin,
                angmax=angmax,
                in_service=row[10] > 0,
            )
        )

    return Network(
        base_mva=base,
        buses=tuple(buses),
        branches=tuple(branches),
        generators=tuple(generators),
        loads=tuple(loads),
        shunts=tuple(shunts),
        name=name or header or "case",
    )


def load_case(filename: str) -> Network:
    with open(filename, "r") as f:
        text = f.read()
    net = parse_case(text)
    if net.name == "case":
        net = replace(net, name=Path(filename).stem)
    logger.info(
        f"Parsed {net.name}: {len(net.buses)} buses, {len(net.branches)} branches, "
        f"{len(net.generators)} generators, {len(net.loads)} loads, {len(net.shunts)} shunts"
    )
    return net


def _fmt(value: float) -> str:
    if math.isinf(value):
        return "Inf" if value > 0 else "-Inf"
    if value == int(value) and abs(value) < 1e15:
        return str(int(value))
    return repr(value)


def _to_file(value: float, base: float) -> float:
    return value if math.isinf(value) else value * base


def write_case(net: Network) -> str:
    """Serialize a Network back into the case-file format read by parse_case."""
    base = net.base_mva
    demand: Dict[int, complex] = {}
    admittance: Dict[int, complex] = {}
    for load in net.loads:
        if load.in_service:
            demand[load.bus] = demand.get(load.bus, 0j) + load.demand
    for shunt in net.shunts:
        if shunt.in_service:
            admittance[shunt.bus] = admittance.get(shunt.bus, 0j) + shunt.admittance

    lines = [f"function mpc = {net.name}", "mpc.version = '2';", f"mpc.baseMVA = {_fmt(base)};", "", "mpc.bus = ["]
    for bus in net.buses:
        s = demand.get(bus.id, 0j)
        y = admittance.get(bus.id, 0j)
        bus_type = bus.bus_type if bus.in_service else ISOLATED_BUS_TYPE
        if bus.in_service and bus_type == ISOLATED_BUS_TYPE:
            bus_type = 1
        cells = [bus.id, bus_type, _to_file(s.real, base), _to_file(s.imag, base)]
        cells += [_to_file(y.real, base), _to_file(y.imag, base), 1, 1.0, 0, bus.base_kv, 1, bus.v_max, bus.v_min]
        lines.append("\t" + "\t".join(_fmt(float(c)) for c in cells) + ";")
    lines += ["];", "", "mpc.gen = ["]
    for gen in net.generators:
        cells = [gen.bus, 0, 0, _to_file(gen.q_max, base), _to_file(gen.q_min, base), 1.0, base]
        cells += [1 if gen.in_service else 0, _to_file(gen.p_max, base), _to_file(gen.p_min, base)]
        lines.append("\t" + "\t".join(_fmt(float(c)) for c in cells) + ";")
    lines += ["];", "", "mpc.branch = ["]
    for br in net.branches:
        rating = 0.0 if math.isinf(br.rating) else br.rating * base
        cells = [br.from_bus, br.to_bus, br.r, br.x, br.b, rating, rating, rating]
        cells += [0.0 if br.ratio == 1.0 else br.ratio, math.degrees(br.shift), 1 if br.in_service else 0]
        cells += [math.degrees(br.angmin), math.degrees(br.angmax)]
        lines.append("\t" + "\t".join(_fmt(float(c)) for c in cells) + ";")
    lines += ["];", "", "mpc.gencost = ["]
    for gen in net.generators:
        cells = [2, 0, 0, 3, gen.cost_c2, gen.cost_c1, gen.cost_c0]
        lines.append("\t" + "\t".join(_fmt(float(c)) for c in cells) + ";")
    lines += ["];", ""]
    return "\n".join(lines)


def with_priorities(net: Network, priorities: Mapping[int, float]) -> Network:
    """Override load restoration priorities (omega) by load id."""
    known = {load.id for load in net.loads}
    unknown = sorted(set(priorities) - known)
    if unknown:
        raise NetworkValidationError(f"Priorities given for unknown loads: {unknown}")
    loads = [replace(load, priority=float(priorities.get(load.id, load.priority))) for load in net.loads]
    return net.with_components(loads=loads)


def total_demand(net: Network) -> complex:
    return sum((load.demand for load in net.active_loads), 0j)


def five_bus_fixture() -> Network:
    """Five-bus cycle 1-2-3-5-4-1 with a bus shunt and a charged line.

    Branch ids follow the order 1-2, 2-3, 3-5, 4-5, 1-4. Removing 2-3 and 3-5
    isolates the generator at bus 3, removing 1-2 and 2-3 isolates the shunt at
    bus 2, and removing 1-4 and 3-5 isolates the charged line 4-5.
    """
    buses = tuple(Bus(id=i, v_min=0.9, v_max=1.1, bus_type=3 if i == 1 else 1) for i in range(1, 6))
    branches = (
        Branch(id=1, from_bus=1, to_bus=2, r=0.01, x=0.1, b=0.0),
        Branch(id=2, from_bus=2, to_bus=3, r=0.01, x=0.1, b=0.0),
        Branch(id=3, from_bus=3, to_bus=5, r=0.01, x=0.1, b=0.0),
        Branch(id=4, from_bus=4, to_bus=5, r=0.0, x=0.04, b=0.08),
        Branch(id=5, from_bus=1, to_bus=4, r=0.01, x=0.1, b=0.0),
    )
    generators = (
        Generator(id=1, bus=1, p_min=0.0, p_max=10.0, q_min=-10.0, q_max=10.0),
        Generator(id=2, bus=3, p_min=0.10, p_max=1.00, q_min=-math.inf, q_max=math.inf),
    )
    loads = (
        Load(id=1, bus=4, demand=complex(0.5, 0.1)),
        Load(id=2, bus=5, demand=complex(0.5, 0.1)),
    )
    shunts = (Shunt(id=1, bus=2, admittance=complex(0.05, 0.30)),)
    return Network(
        base_mva=100.0,
        buses=buses,
        branches=branches,
        generators=generators,
        loads=loads,
        shunts=shunts,
        name="five_bus",
    )
