import math
import logging

from dataclasses import dataclass
from typing import Any, Dict, List, NamedTuple, Optional, Tuple

import numpy as np
import scipy.sparse as sp

from netmodel import Branch, Network
from preprocess import connected_components
from conic import Cone, ConeType, ConicProblem, SolverResult


logger = logging.getLogger(__name__)

SQRT2 = math.sqrt(2.0)
Z_TOLERANCE = 1e-7
# retention weight used when no load carries positive weight
FALLBACK_SHUNT_WEIGHT = 10.0

Expr = Tuple[Dict[int, float], float]


class FormulationError(ValueError):
    pass


class ExtractionError(ValueError):
    pass


@dataclass(frozen=True)
class ObjectiveWeights:
    m_v: float
    m_g: float
    m_s: float


@dataclass(frozen=True)
class ObjectiveTerms:
    """The four parts of the load delivery objective before weighting."""

    buses_on: float
    gens_on: float
    shunts_on: float
    load_served: float

    def weighted(self, weights: ObjectiveWeights) -> float:
        return (
            weights.m_v * self.buses_on
            + weights.m_g * self.gens_on
            + weights.m_s * self.shunts_on
            + self.load_served
        )


@dataclass(frozen=True)
class VarMap:
    """Column index of every variable of the relaxation, keyed by component id."""

    w_diag: Dict[int, int]
    w_re: Dict[int, int]
    w_im: Dict[int, int]
    p_fr: Dict[int, int]
    q_fr: Dict[int, int]
    p_to: Dict[int, int]
    q_to: Dict[int, int]
    pg: Dict[int, int]
    qg: Dict[int, int]
    zg: Dict[int, int]
    zd: Dict[int, int]
    zs: Dict[int, int]
    ws: Dict[int, int]
    zv: Dict[int, int]
    size: int

    FAMILIES = ("w_diag", "w_re", "w_im", "p_fr", "q_fr", "p_to", "q_to", "pg", "qg", "zg", "zd", "zs", "ws", "zv")

    @classmethod
    def from_network(cls, net: Network) -> "VarMap":
        counter = iter(range(1 << 62))

        def block(items) -> Dict[int, int]:
            return {item.id: next(counter) for item in items}

        buses, branches = net.active_buses, net.active_branches
        gens, loads, shunts = net.active_generators, net.active_loads, net.active_shunts
        families = {
            "w_diag": block(buses),
            "w_re": block(branches),
            "w_im": block(branches),
            "p_fr": block(branches),
            "q_fr": block(branches),
            "p_to": block(branches),
            "q_to": block(branches),
            "pg": block(gens),
            "qg": block(gens),
            "zg": block(gens),
            "zd": block(loads),
            "zs": block(shunts),
            "ws": block(shunts),
            "zv": block(buses),
        }
        size = 2 * len(buses) + 6 * len(branches) + 3 * len(gens) + len(loads) + 2 * len(shunts)
        return cls(size=size, **families)

    def to_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {name: {str(k): v for k, v in getattr(self, name).items()} for name in self.FAMILIES}
        out["size"] = self.size
        return out


@dataclass(frozen=True)
class AcCandidate:
    """A full AC operating point: complex voltages, generator outputs and indicator values."""

    V: Dict[int, complex]
    sg: Dict[int, complex]
    zv: Dict[int, float]
    zg: Dict[int, float]
    zd: Dict[int, float]
    zs: Dict[int, float]


@dataclass
class MldSolution:
    w_diag: Dict[int, float]
    w_branch: Dict[int, complex]
    s_from: Dict[int, complex]
    s_to: Dict[int, complex]
    s_gen: Dict[int, complex]
    w_shunt: Dict[int, float]
    zv: Dict[int, float]
    zg: Dict[int, float]
    zd: Dict[int, float]
    zs: Dict[int, float]
    objective: float
    served_active: float
    served_fraction: float
    status: str
    iterations: int
    runtime_s: float
    terms: ObjectiveTerms


@dataclass
class AcReport:
    violations: Dict[str, float]
    max_violation: float
    feasible: bool
    terms: ObjectiveTerms
    objective: float


class McCormickPlane(NamedTuple):
    """w <= x_coef*x + y_coef*y + constant when `upper`, otherwise w >= the same."""

    x_coef: float
    y_coef: float
    constant: float
    upper: bool

    def slack(self, x: float, y: float, w: float) -> float:
        value = self.x_coef * x + self.y_coef * y + self.constant
        return value - w if self.upper else w - value


def mccormick(xl: float, xu: float, yl: float, yu: float) -> List[McCormickPlane]:
    """Convex envelope of w = x*y over the box [xl, xu] x [yl, yu]."""
    if not all(math.isfinite(v) for v in (xl, xu, yl, yu)):
        raise FormulationError("McCormick envelope needs finite bounds")
    if xl > xu or yl > yu:
        raise FormulationError(f"Empty box [{xl}, {xu}] x [{yl}, {yu}]")
    return [
        McCormickPlane(yl, xl, -xl * yl, False),
        McCormickPlane(yu, xu, -xu * yu, False),
        McCormickPlane(yu, xl, -xl * yu, True),
        McCormickPlane(yl, xu, -xu * yl, True),
    ]


def objective_weights(net: Network) -> ObjectiveWeights:
    heaviest = max((load.priority * abs(load.demand.real) for load in net.active_loads), default=0.0)
    m_s = 10.0 * heaviest if heaviest > 0 else FALLBACK_SHUNT_WEIGHT
    return ObjectiveWeights(m_v=10.0 * m_s, m_g=m_s, m_s=m_s)


def objective_terms(
    net: Network,
    zv: Dict[int, float],
    zg: Dict[int, float],
    zd: Dict[int, float],
    zs: Dict[int, float],
) -> ObjectiveTerms:
    return ObjectiveTerms(
        buses_on=float(sum(zv[bus.id] for bus in net.active_buses)),
        gens_on=float(sum(zg[gen.id] for gen in net.active_generators)),
        shunts_on=float(sum(zs[shunt.id] for shunt in net.active_shunts)),
        load_served=float(sum(load.priority * abs(load.demand.real) * zd[load.id] for load in net.active_loads)),
    )


def branch_flows(br: Branch, vi: complex, vj: complex) -> Tuple[complex, complex]:
    """Complex power entering the branch at its from and to ends."""
    y, tap = br.series_admittance, br.tap
    w = vi * vj.conjugate()
    s_from = (y + br.charge_from).conjugate() * abs(vi) ** 2 / abs(tap) ** 2 - y.conjugate() * w / tap
    s_to = (y + br.charge_to).conjugate() * abs(vj) ** 2 - y.conjugate() * w.conjugate() / tap.conjugate()
    return s_from, s_to


class _ConeRows:
    """Collects affine expressions a'x + const per cone family, each meaning s = a'x + const."""

    def __init__(self):
        self.zero: List[Expr] = []
        self.nonneg: List[Expr] = []
        self.soc: List[List[Expr]] = []
        self.rsoc: List[List[Expr]] = []

    def equal(self, coeffs: Dict[int, float], const: float = 0.0) -> None:
        self.zero.append((coeffs, const))

    def at_least_zero(self, coeffs: Dict[int, float], const: float = 0.0) -> None:
        self.nonneg.append((coeffs, const))

    def unit_box(self, index: int) -> None:
        self.at_least_zero({index: 1.0})
        self.at_least_zero({index: -1.0}, 1.0)

    def assemble(self, c: np.ndarray, varmap: VarMap) -> ConicProblem:
        rows, cols, vals, b = [], [], [], []
        cones: List[Cone] = []

        def emit(expr: Expr) -> None:
            coeffs, const = expr
            row = len(b)
            for col, val in coeffs.items():
                if val != 0.0:
                    rows.append(row)
                    cols.append(col)
                    vals.append(-val)
            b.append(const)

        for family, cone_type in ((self.zero, ConeType.ZERO), (self.nonneg, ConeType.NONNEG)):
            if family:
                for expr in family:
                    emit(expr)
                cones.append(Cone(cone_type, len(family)))
        for family, cone_type in ((self.soc, ConeType.SOC), (self.rsoc, ConeType.RSOC)):
            for block in family:
                for expr in block:
                    emit(expr)
                cones.append(Cone(cone_type, len(block)))

        A = sp.coo_matrix((vals, (rows, cols)), shape=(len(b), varmap.size)).tocsc()
        return ConicProblem(c=c, A=A, b=np.asarray(b, dtype=float), cones=cones, varmap=varmap)


def build_soc_mld_c(net: Network, weights: Optional[ObjectiveWeights] = None) -> ConicProblem:
    """Second order cone relaxation of maximal load delivery with continuous indicators.

    Args:
        net: a preprocessed network with exactly one live component
        weights: objective weights, computed from the network when omitted

    Returns:
        ConicProblem minimizing the negated weighted delivery objective, with
        its VarMap attached.
    """
    if weights is None:
        weights = objective_weights(net)
    partition = connected_components(net)
    if len(partition) == 0:
        raise FormulationError("Network has no in-service bus")
    if len(partition) > 1:
        raise FormulationError(f"Network has {len(partition)} components; preprocess it first")

    vm = VarMap.from_network(net)
    rows = _ConeRows()
    c = np.zeros(vm.size)

    for bus in net.active_buses:
        if not math.isfinite(bus.v_max):
            raise FormulationError(f"Bus {bus.id} has no upper voltage bound")
        w, z = vm.w_diag[bus.id], vm.zv[bus.id]
        if bus.v_min == bus.v_max:
            rows.equal({w: 1.0, z: -bus.v_max**2})
        else:
            rows.at_least_zero({w: 1.0, z: -bus.v_min**2})
            rows.at_least_zero({z: bus.v_max**2, w: -1.0})
        rows.unit_box(z)
        c[z] = -weights.m_v

    for shunt in net.active_shunts:
        zs, ws = vm.zs[shunt.id], vm.ws[shunt.id]
        w = vm.w_diag[shunt.bus]
        for plane in mccormick(0.0, 1.0, 0.0, net.bus_index[shunt.bus].v_max ** 2):
            if plane.upper:
                rows.at_least_zero({zs: plane.x_coef, w: plane.y_coef, ws: -1.0}, plane.constant)
            else:
                rows.at_least_zero({ws: 1.0, zs: -plane.x_coef, w: -plane.y_coef}, -plane.constant)
        rows.unit_box(zs)
        c[zs] = -weights.m_s

    for bus in net.active_buses:
        p: Dict[int, float] = {}
        q: Dict[int, float] = {}
        for gen in net.gens_at[bus.id]:
            p[vm.pg[gen.id]] = 1.0
            q[vm.qg[gen.id]] = 1.0
        for br in net.branches_from[bus.id]:
            p[vm.p_fr[br.id]] = -1.0
            q[vm.q_fr[br.id]] = -1.0
        for br in net.branches_to[bus.id]:
            p[vm.p_to[br.id]] = -1.0
            q[vm.q_to[br.id]] = -1.0
        for load in net.loads_at[bus.id]:
            p[vm.zd[load.id]] = -load.demand.real
            q[vm.zd[load.id]] = -load.demand.imag
        for shunt in net.shunts_at[bus.id]:
            # conj(Y^s) * W^s
            p[vm.ws[shunt.id]] = -shunt.admittance.real
            q[vm.ws[shunt.id]] = shunt.admittance.imag
        rows.equal(p)
        rows.equal(q)

    for br in net.active_branches:
        wi, wj = vm.w_diag[br.from_bus], vm.w_diag[br.to_bus]
        wr, wm = vm.w_re[br.id], vm.w_im[br.id]
        y, tap = br.series_admittance, br.tap
        a_from = (y + br.charge_from).conjugate() / abs(tap) ** 2
        a_to = (y + br.charge_to).conjugate()
        alpha = y.conjugate() / tap
        beta = y.conjugate() / tap.conjugate()

        rows.equal({vm.p_fr[br.id]: 1.0, wi: -a_from.real, wr: alpha.real, wm: -alpha.imag})
        rows.equal({vm.q_fr[br.id]: 1.0, wi: -a_from.imag, wm: alpha.real, wr: alpha.imag})
        rows.equal({vm.p_to[br.id]: 1.0, wj: -a_to.real, wr: beta.real, wm: beta.imag})
        rows.equal({vm.q_to[br.id]: 1.0, wj: -a_to.imag, wr: beta.imag, wm: -beta.real})

        rows.at_least_zero({wm: 1.0, wr: -math.tan(br.angmin)})
        rows.at_least_zero({wr: math.tan(br.angmax), wm: -1.0})

        rows.rsoc.append([({wi: 1.0 / SQRT2}, 0.0), ({wj: 1.0 / SQRT2}, 0.0), ({wr: 1.0}, 0.0), ({wm: 1.0}, 0.0)])
        if math.isfinite(br.rating):
            for pv, qv in ((vm.p_fr[br.id], vm.q_fr[br.id]), (vm.p_to[br.id], vm.q_to[br.id])):
                rows.soc.append([({}, br.rating), ({pv: 1.0}, 0.0), ({qv: 1.0}, 0.0)])

    for gen in net.active_generators:
        z = vm.zg[gen.id]
        for var, low, high in ((vm.pg[gen.id], gen.p_min, gen.p_max), (vm.qg[gen.id], gen.q_min, gen.q_max)):
            if math.isfinite(low):
                rows.at_least_zero({var: 1.0, z: -low})
            if math.isfinite(high):
                rows.at_least_zero({z: high, var: -1.0})
        rows.unit_box(z)
        c[z] = -weights.m_g

    for load in net.active_loads:
        z = vm.zd[load.id]
        rows.unit_box(z)
        c[z] = -load.priority * abs(load.demand.real)

    prob = rows.assemble(c, vm)
    logger.debug(f"Built relaxation for {net.name}: {prob.n} variables, {prob.m} rows, {len(prob.cones)} cones")
    return prob


def _indicator(name: str, key: int, value: float, tol: float) -> float:
    if value < -tol or value > 1.0 + tol:
        raise ExtractionError(f"{name}[{key}] = {value:.3e} lies outside [0, 1]")
    return min(max(value, 0.0), 1.0)


def extract_solution(
    prob: ConicProblem,
    x: np.ndarray,
    meta: SolverResult,
    net: Network,
    z_tol: float = Z_TOLERANCE,
) -> MldSolution:
    """Read network quantities back out of a solver point.

    Indicators slightly outside [0, 1] (within z_tol) are clamped; anything
    further out means the solver did not deliver a feasible point.
    """
    vm: VarMap = prob.varmap
    if x.shape != (vm.size,):
        raise ExtractionError(f"Point has shape {x.shape}, expected ({vm.size},)")

    zv = {k: _indicator("z_v", k, x[i], z_tol) for k, i in vm.zv.items()}
    zg = {k: _indicator("z_g", k, x[i], z_tol) for k, i in vm.zg.items()}
    zd = {k: _indicator("z_d", k, x[i], z_tol) for k, i in vm.zd.items()}
    zs = {k: _indicator("z_s", k, x[i], z_tol) for k, i in vm.zs.items()}

    served = float(sum(zd[load.id] * load.demand.real for load in net.active_loads))
    total = float(sum(load.demand.real for load in net.active_loads))
    return MldSolution(
        w_diag={k: float(x[i]) for k, i in vm.w_diag.items()},
        w_branch={k: complex(x[i], x[vm.w_im[k]]) for k, i in vm.w_re.items()},
        s_from={k: complex(x[i], x[vm.q_fr[k]]) for k, i in vm.p_fr.items()},
        s_to={k: complex(x[i], x[vm.q_to[k]]) for k, i in vm.p_to.items()},
        s_gen={k: complex(x[i], x[vm.qg[k]]) for k, i in vm.pg.items()},
        w_shunt={k: float(x[i]) for k, i in vm.ws.items()},
        zv=zv,
        zg=zg,
        zd=zd,
        zs=zs,
        objective=-float(prob.c @ x),
        served_active=served,
        served_fraction=served / total if total > 0 else 1.0,
        status=meta.status.value,
        iterations=meta.iterations,
        runtime_s=meta.runtime_s,
        terms=objective_terms(net, zv, zg, zd, zs),
    )


def solution_to_dict(solution: MldSolution, base_mva: float = 100.0) -> Dict[str, Any]:
    def pair(value: complex) -> List[float]:
        return [value.real, value.imag]

    return {
        "status": solution.status,
        "objective": solution.objective,
        "served_active_pu": solution.served_active,
        "served_mw": solution.served_active * base_mva,
        "served_fraction": solution.served_fraction,
        "iterations": solution.iterations,
        "runtime_s": solution.runtime_s,
        "terms": {
            "buses_on": solution.terms.buses_on,
            "gens_on": solution.terms.gens_on,
            "shunts_on": solution.terms.shunts_on,
            "load_served": solution.terms.load_served,
        },
        "buses": {str(k): {"w": solution.w_diag[k], "z": solution.zv[k]} for k in solution.w_diag},
        "branches": {
            str(k): {
                "w": pair(solution.w_branch[k]),
                "s_from": pair(solution.s_from[k]),
                "s_to": pair(solution.s_to[k]),
            }
            for k in solution.w_branch
        },
        "generators": {str(k): {"s": pair(solution.s_gen[k]), "z": solution.zg[k]} for k in solution.s_gen},
        "loads": {str(k): {"z": v} for k, v in solution.zd.items()},
        "shunts": {str(k): {"w": solution.w_shunt[k], "z": solution.zs[k]} for k in solution.zs},
    }


def _box_violation(value: float, z: float, low: float, high: float) -> float:
    worst = 0.0
    if math.isfinite(low):
        worst = max(worst, z * low - value)
    if math.isfinite(high):
        worst = max(worst, value - z * high)
    return worst


def evaluate_ac_mld(net: Network, cand: AcCandidate, tol: float = 1e-9) -> AcReport:
    """Evaluate every AC load delivery constraint at a candidate point, without lifting.

    Returns the largest absolute violation per constraint family together
    with the objective terms and the weighted objective. Never raises on an
    infeasible point.
    """
    violations = {"voltage": 0.0, "generator": 0.0, "balance": 0.0, "thermal": 0.0, "angle": 0.0, "indicator": 0.0}

    for bus in net.active_buses:
        v, z = abs(cand.V[bus.id]), cand.zv[bus.id]
        violations["voltage"] = max(violations["voltage"], z * bus.v_min - v, v - z * bus.v_max)

    for gen in net.active_generators:
        s, z = cand.sg[gen.id], cand.zg[gen.id]
        worst = max(_box_violation(s.real, z, gen.p_min, gen.p_max), _box_violation(s.imag, z, gen.q_min, gen.q_max))
        violations["generator"] = max(violations["generator"], worst)

    mismatch = {bus.id: 0j for bus in net.active_buses}
    for gen in net.active_generators:
        mismatch[gen.bus] += cand.sg[gen.id]
    for load in net.active_loads:
        mismatch[load.bus] -= cand.zd[load.id] * load.demand
    for shunt in net.active_shunts:
        mismatch[shunt.bus] -= cand.zs[shunt.id] * shunt.admittance.conjugate() * abs(cand.V[shunt.bus]) ** 2

    for br in net.active_branches:
        vi, vj = cand.V[br.from_bus], cand.V[br.to_bus]
        s_from, s_to = branch_flows(br, vi, vj)
        mismatch[br.from_bus] -= s_from
        mismatch[br.to_bus] -= s_to
        if math.isfinite(br.rating):
            violations["thermal"] = max(violations["thermal"], abs(s_from) - br.rating, abs(s_to) - br.rating)
        w = vi * vj.conjugate()
        if abs(w) > tol:
            theta = math.atan2(w.imag, w.real)
            violations["angle"] = max(violations["angle"], br.angmin - theta, theta - br.angmax)

    for value in mismatch.values():
        violations["balance"] = max(violations["balance"], abs(value.real), abs(value.imag))

    for family in (cand.zv, cand.zg):
        for value in family.values():
            violations["indicator"] = max(violations["indicator"], min(abs(value), abs(value - 1.0)))
    for family in (cand.zd, cand.zs):
        for value in family.values():
            violations["indicator"] = max(violations["indicator"], -value, value - 1.0)

    worst = max(violations.values())
    terms = objective_terms(net, cand.zv, cand.zg, cand.zd, cand.zs)
    return AcReport(
        violations=violations,
        max_violation=worst,
        feasible=worst <= tol,
        terms=terms,
        objective=terms.weighted(objective_weights(net)),
    )


def lift_candidate(net: Network, cand: AcCandidate, varmap: Optional[VarMap] = None) -> np.ndarray:
    """Map an AC point into the lifted variable space of the relaxation."""
    vm = varmap or VarMap.from_network(net)
    x = np.zeros(vm.size)
    for bus in net.active_buses:
        x[vm.w_diag[bus.id]] = abs(cand.V[bus.id]) ** 2
        x[vm.zv[bus.id]] = cand.zv[bus.id]
    for br in net.active_branches:
        vi, vj = cand.V[br.from_bus], cand.V[br.to_bus]
        w = vi * vj.conjugate()
        s_from, s_to = branch_flows(br, vi, vj)
        x[vm.w_re[br.id]], x[vm.w_im[br.id]] = w.real, w.imag
        x[vm.p_fr[br.id]], x[vm.q_fr[br.id]] = s_from.real, s_from.imag
        x[vm.p_to[br.id]], x[vm.q_to[br.id]] = s_to.real, s_to.imag
    for gen in net.active_generators:
        s = cand.sg[gen.id]
        x[vm.pg[gen.id]], x[vm.qg[gen.id]] = s.real, s.imag
        x[vm.zg[gen.id]] = cand.zg[gen.id]
    for load in net.active_loads:
        x[vm.zd[load.id]] = cand.zd[load.id]
    for shunt in net.active_shunts:
        x[vm.zs[shunt.id]] = cand.zs[shunt.id]
        x[vm.ws[shunt.id]] = cand.zs[shunt.id] * abs(cand.V[shunt.bus]) ** 2
    return x


def export_conic(prob: ConicProblem) -> Dict[str, Any]:
    return prob.to_dict()
