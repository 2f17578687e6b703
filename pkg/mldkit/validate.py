import math
import logging
import warnings

from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Mapping, NamedTuple, Optional, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import MatrixRankWarning, spsolve

from netmodel import Generator, Network
from preprocess import connected_components, deactivate_buses, preprocess_pipeline
from conic import SolverSettings, SolverStatus, solve
from formulation import AcCandidate, build_soc_mld_c, evaluate_ac_mld, objective_weights


logger = logging.getLogger(__name__)

PF_TOLERANCE = 1e-9
CANDIDATE_TOLERANCE = 1e-8


class Setpoint(NamedTuple):
    p: float
    vm: float


@dataclass
class PfResult:
    converged: bool
    V: Dict[int, complex]
    mismatch_inf: float
    iterations: int
    history: List[float] = field(default_factory=list)
    # generation each bus must supply at the solution (load included)
    injection: Dict[int, complex] = field(default_factory=dict)

    @property
    def contraction(self) -> float:
        """Mismatch ratio of the last Newton step, 0.0 when there is no step to compare."""
        if len(self.history) < 2 or self.history[-2] <= 0:
            return 0.0
        return self.history[-1] / self.history[-2]


@dataclass(frozen=True)
class Dispatch:
    slack_bus: int
    slack_gen: int
    setpoints: Dict[int, Setpoint]
    pg: Dict[int, float]


@dataclass(frozen=True)
class GapEstimate:
    upper: float
    lower: float
    gap_pct: float
    gamma: float
    status: str


def build_ybus(net: Network) -> Tuple[sp.csr_matrix, List[int]]:
    """Bus admittance matrix over in-service buses, shunts included at full value."""
    order = [bus.id for bus in net.active_buses]
    pos = {bus_id: k for k, bus_id in enumerate(order)}
    rows, cols, vals = [], [], []
    for br in net.active_branches:
        f, t = pos[br.from_bus], pos[br.to_bus]
        y, tap = br.series_admittance, br.tap
        rows += [f, f, t, t]
        cols += [f, t, f, t]
        vals += [(y + br.charge_from) / abs(tap) ** 2, -y / tap.conjugate(), -y / tap, y + br.charge_to]
    for shunt in net.active_shunts:
        rows.append(pos[shunt.bus])
        cols.append(pos[shunt.bus])
        vals.append(shunt.admittance)
    n = len(order)
    ybus = sp.coo_matrix((np.asarray(vals, dtype=complex), (rows, cols)), shape=(n, n)).tocsr()
    return ybus, order


def _jacobian(ybus: sp.csr_matrix, V: np.ndarray) -> sp.csr_matrix:
    """Polar power-flow Jacobian blocks [[dP/dVa, dP/dVm], [dQ/dVa, dQ/dVm]] for all buses."""
    ibus = ybus @ V
    diag_v = sp.diags(V)
    diag_i = sp.diags(ibus)
    diag_vnorm = sp.diags(V / np.abs(V))
    ds_dvm = diag_v @ (ybus @ diag_vnorm).conj() + diag_i.conj() @ diag_vnorm
    ds_dva = 1j * diag_v @ (diag_i - ybus @ diag_v).conj()
    return sp.bmat([[ds_dva.real, ds_dvm.real], [ds_dva.imag, ds_dvm.imag]], format="csr")


def newton_power_flow(
    net: Network,
    slack_bus: int,
    setpoints: Mapping[int, Setpoint],
    tol: float = PF_TOLERANCE,
    max_iter: int = 30,
    load_scale: float = 1.0,
) -> PfResult:
    """Polar Newton-Raphson power flow.

    Args:
        net: a network whose in-service buses form one connected component
        slack_bus: reference bus, its magnitude taken from setpoints
        setpoints: generation and voltage magnitude of every voltage-controlled bus
        tol: infinity norm bound on the active/reactive mismatch
        max_iter: Newton step limit
        load_scale: factor applied to every load (constant power)

    Returns:
        PfResult; a singular Jacobian is reported as non-convergence.
    """
    ybus, order = build_ybus(net)
    n = len(order)
    pos = {bus_id: k for k, bus_id in enumerate(order)}

    load = np.zeros(n, dtype=complex)
    for item in net.active_loads:
        load[pos[item.bus]] += load_scale * item.demand
    scheduled = -load.copy()
    vm = np.ones(n)
    for bus_id, point in setpoints.items():
        if bus_id in pos:
            vm[pos[bus_id]] = point.vm
            if bus_id != slack_bus:
                scheduled[pos[bus_id]] += point.p

    ref = pos[slack_bus]
    pv = sorted(pos[b] for b in setpoints if b in pos and b != slack_bus)
    pq = sorted(set(range(n)) - set(pv) - {ref})
    pvpq = np.asarray(pv + pq, dtype=np.int64)
    pq = np.asarray(pq, dtype=np.int64)
    unknowns = np.concatenate([pvpq, n + pq])

    V = vm.astype(complex)
    history: List[float] = []
    converged = False
    steps = 0
    while True:
        mis = V * np.conj(ybus @ V) - scheduled
        F = np.concatenate([mis[pvpq].real, mis[pq].imag])
        norm = float(np.abs(F).max(initial=0.0))
        history.append(norm)
        if norm <= tol:
            converged = True
            break
        if steps >= max_iter:
            break
        J = _jacobian(ybus, V)[unknowns][:, unknowns]
        with warnings.catch_warnings():
            warnings.simplefilter("error", MatrixRankWarning)
            try:
                dx = np.atleast_1d(spsolve(J.tocsc(), -F))
            except MatrixRankWarning:
                logger.debug("Singular power flow Jacobian")
                break
        if not np.all(np.isfinite(dx)):
            break
        va, vmag = np.angle(V), np.abs(V)
        va[pvpq] += dx[: len(pvpq)]
        vmag[pq] += dx[len(pvpq) :]
        V = vmag * np.exp(1j * va)
        steps += 1

    calc = V * np.conj(ybus @ V)
    result = PfResult(
        converged=converged,
        V={bus_id: complex(V[k]) for bus_id, k in pos.items()},
        mismatch_inf=history[-1],
        iterations=steps,
        history=history,
        injection={bus_id: complex(calc[k] + load[k]) for bus_id, k in pos.items()},
    )
    if converged and result.iterations >= 2:
        logger.debug(f"Newton contraction in the last step: {result.contraction:.2e}")
    return result


def _setpoint_magnitude(net: Network, bus_id: int) -> float:
    bus = net.bus_index[bus_id]
    return max(min(bus.v_max, 1.0), bus.v_min)


def default_setpoints(net: Network, component: FrozenSet[int], gamma: float) -> Optional[Dispatch]:
    """Slack and PV assignment plus a proportional active dispatch for one component.

    The generator with the largest p_max (smallest id on ties) is the slack;
    the remaining generators share gamma times the component load in
    proportion to p_max, clamped into their active bounds.
    """
    gens: List[Generator] = [g for b in sorted(component) for g in net.gens_at[b]]
    if not gens:
        return None
    slack = min(gens, key=lambda g: (-g.p_max, g.id))
    demand = gamma * sum(load.demand.real for b in component for load in net.loads_at[b])
    capacity = sum(g.p_max for g in gens)

    pg: Dict[int, float] = {}
    for gen in gens:
        if math.isfinite(capacity) and capacity > 0:
            share = gen.p_max / capacity
        else:
            share = 1.0 / len(gens)
        pg[gen.id] = min(max(demand * share, gen.p_min), gen.p_max)

    setpoints: Dict[int, Setpoint] = {}
    for gen in gens:
        total = setpoints[gen.bus].p if gen.bus in setpoints else 0.0
        setpoints[gen.bus] = Setpoint(p=total + pg[gen.id], vm=_setpoint_magnitude(net, gen.bus))
    return Dispatch(slack_bus=slack.bus, slack_gen=slack.id, setpoints=setpoints, pg=pg)


def _zero_output_allowed(gen: Generator) -> float:
    return 1.0 if gen.p_min <= 0 <= gen.p_max and gen.q_min <= 0 <= gen.q_max else 0.0


def _rest_state(net: Network, component: FrozenSet[int], energized: bool, cand: Dict[str, Dict]) -> None:
    """Fill candidate entries for a component that carries no load.

    Energized keeps every bus on at its setpoint magnitude with shunts shed;
    otherwise the component is shut down, which is always AC feasible.
    """
    for b in component:
        cand["V"][b] = complex(_setpoint_magnitude(net, b)) if energized else 0j
        cand["zv"][b] = 1.0 if energized else 0.0
        for gen in net.gens_at[b]:
            cand["sg"][gen.id] = 0j
            cand["zg"][gen.id] = _zero_output_allowed(gen)
        for load in net.loads_at[b]:
            cand["zd"][load.id] = 0.0
        for shunt in net.shunts_at[b]:
            cand["zs"][shunt.id] = 0.0 if energized else 1.0


def _empty() -> Dict[str, Dict]:
    return {"V": {}, "sg": {}, "zv": {}, "zg": {}, "zd": {}, "zs": {}}


def _main_component(net: Network) -> Tuple[Optional[FrozenSet[int]], List[FrozenSet[int]]]:
    components = list(connected_components(net).components)
    if not components:
        return None, []
    main = max(components, key=len)
    return main, [comp for comp in components if comp is not main]


def candidate_at(net: Network, gamma: float, tol: float = CANDIDATE_TOLERANCE) -> Optional[AcCandidate]:
    """AC candidate serving gamma of every load in the main component, or None.

    The main component is the largest one; it is solved by Newton power flow
    with the default dispatch. Every other component is shut down. The result
    is only returned when it passes evaluate_ac_mld at tol.
    """
    main, others = _main_component(net)
    if main is None:
        return None
    dispatch = default_setpoints(net, main, gamma)
    if dispatch is None:
        return None

    island = deactivate_buses(net, [b.id for b in net.active_buses if b.id not in main])
    pf = newton_power_flow(island, dispatch.slack_bus, dispatch.setpoints, load_scale=gamma)
    if not pf.converged:
        logger.debug(f"Power flow did not converge at gamma={gamma:.6f}")
        return None

    cand = _empty()
    for comp in others:
        _rest_state(net, comp, False, cand)
    for b in main:
        cand["V"][b] = pf.V[b]
        cand["zv"][b] = 1.0
        for load in net.loads_at[b]:
            cand["zd"][load.id] = gamma
        for shunt in net.shunts_at[b]:
            cand["zs"][shunt.id] = 1.0
        gens = net.gens_at[b]
        if not gens:
            continue
        injection = pf.injection[b]
        share_q = injection.imag / len(gens)
        fixed = sum(dispatch.pg[g.id] for g in gens if g.id != dispatch.slack_gen)
        for gen in gens:
            p = injection.real - fixed if gen.id == dispatch.slack_gen else dispatch.pg[gen.id]
            cand["sg"][gen.id] = complex(p, share_q)
            cand["zg"][gen.id] = 1.0

    candidate = AcCandidate(**cand)
    report = evaluate_ac_mld(net, candidate, tol)
    if not report.feasible:
        worst = max(report.violations, key=report.violations.get)
        logger.debug(f"gamma={gamma:.6f} rejected: {worst} violation {report.max_violation:.3e}")
        return None
    return candidate


def _resting_candidate(net: Network, main: FrozenSet[int], others: List[FrozenSet[int]], tol: float) -> AcCandidate:
    weights = objective_weights(net)
    best, best_value = None, -math.inf
    for energized in (True, False):
        cand = _empty()
        for comp in others:
            _rest_state(net, comp, False, cand)
        _rest_state(net, main, energized, cand)
        candidate = AcCandidate(**cand)
        report = evaluate_ac_mld(net, candidate, tol)
        if report.feasible and report.terms.weighted(weights) > best_value:
            best, best_value = candidate, report.terms.weighted(weights)
    return best


def uniform_shed_bound(net: Network, steps: int = 40, tol: float = CANDIDATE_TOLERANCE) -> Tuple[float, AcCandidate]:
    """Largest uniform load scale gamma with a certified AC feasible point.

    Full delivery is tried first, then bisection over [0, 1]. When no power
    flow point passes, the main component is left energized without load or
    shut down, whichever is feasible and scores higher, and gamma is 0.
    """
    main, others = _main_component(net)
    if main is None:
        return 0.0, AcCandidate(**_empty())

    full = candidate_at(net, 1.0, tol)
    if full is not None:
        return 1.0, full

    best: Optional[Tuple[float, AcCandidate]] = None
    floor = candidate_at(net, 0.0, tol)
    if floor is not None:
        best = (0.0, floor)
    lo, hi = 0.0, 1.0
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        cand = candidate_at(net, mid, tol)
        if cand is not None:
            lo, best = mid, (mid, cand)
        else:
            hi = mid
    if best is not None:
        logger.debug(f"Uniform shedding bound gamma={best[0]:.6f}")
        return best

    return 0.0, _resting_candidate(net, main, others, tol)


def gap_estimate(net: Network, settings: Optional[SolverSettings] = None) -> GapEstimate:
    """Relaxation upper bound against the uniform shedding lower bound, in percent of the upper bound."""
    reduced, _ = preprocess_pipeline(net)
    if not reduced.active_buses:
        return GapEstimate(upper=0.0, lower=0.0, gap_pct=0.0, gamma=0.0, status=SolverStatus.OPTIMAL.value)

    weights = objective_weights(reduced)
    result = solve(build_soc_mld_c(reduced, weights), settings)
    upper = -result.objective

    gamma, cand = uniform_shed_bound(reduced)
    lower = evaluate_ac_mld(reduced, cand, CANDIDATE_TOLERANCE).objective
    gap_pct = 100.0 * (upper - lower) / upper if upper > 0 else 0.0
    logger.info(
        f"{net.name}: relaxation {upper:.6f} ({result.status.value}), "
        f"uniform shedding {lower:.6f} (gamma {gamma:.4f}), gap {gap_pct:.4f}%"
    )
    return GapEstimate(upper=upper, lower=lower, gap_pct=gap_pct, gamma=gamma, status=result.status.value)
