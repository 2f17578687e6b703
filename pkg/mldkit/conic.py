import time
import math
import logging

from enum import Enum
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu


logger = logging.getLogger(__name__)

SQRT2 = math.sqrt(2.0)
# Equality rows get a stiffer penalty than inequality and cone rows.
EQUALITY_RHO_FACTOR = 1e3
RHO_MIN = 1e-6
RHO_MAX = 1e6
# later updates are spaced further apart and eventually stop, so the tail runs at a fixed rho
MAX_RHO_UPDATES = 25
CERTIFICATE_TOLERANCE = 1e-7


class SolverArgumentError(ValueError):
    pass


class ConeType(str, Enum):
    ZERO = "Zero"
    NONNEG = "NonNeg"
    SOC = "SecondOrder"
    RSOC = "RotatedSecondOrder"


@dataclass(frozen=True)
class Cone:
    type: ConeType
    dim: int

    def __post_init__(self):
        minimum = 2 if self.type == ConeType.RSOC else 1
        if self.dim < minimum:
            raise SolverArgumentError(f"{self.type.value} cone needs dimension >= {minimum}, got {self.dim}")


@dataclass
class ConicProblem:
    """min c'x  s.t.  Ax + s = b,  s in K = K_1 x ... x K_p (blocks in `cones` order).

    `varmap` is opaque to the solver; the formulation module uses it to map
    the solution back to network quantities.
    """

    c: np.ndarray
    A: sp.csc_matrix
    b: np.ndarray
    cones: List[Cone]
    varmap: Optional[Any] = None

    @property
    def n(self) -> int:
        return self.A.shape[1]

    @property
    def m(self) -> int:
        return self.A.shape[0]

    def validate(self) -> None:
        if self.n == 0 or self.m == 0:
            raise SolverArgumentError("Structurally empty conic problem")
        if self.c.shape != (self.n,) or self.b.shape != (self.m,):
            raise SolverArgumentError(f"Shapes of c {self.c.shape} and b {self.b.shape} do not match A {self.A.shape}")
        total = sum(cone.dim for cone in self.cones)
        if total != self.m:
            raise SolverArgumentError(f"Cone dimensions sum to {total}, A has {self.m} rows")
        if not (np.all(np.isfinite(self.c)) and np.all(np.isfinite(self.b)) and np.all(np.isfinite(self.A.data))):
            raise SolverArgumentError("Problem data contains non-finite entries")

    def to_dict(self) -> Dict[str, Any]:
        coo = sp.coo_matrix(self.A)
        varmap = self.varmap.to_dict() if hasattr(self.varmap, "to_dict") else self.varmap
        return {
            "c": self.c.tolist(),
            "A": {
                "rows": coo.row.tolist(),
                "cols": coo.col.tolist(),
                "vals": coo.data.tolist(),
                "shape": [self.m, self.n],
            },
            "b": self.b.tolist(),
            "cones": [{"type": cone.type.value, "dim": cone.dim} for cone in self.cones],
            "varmap": varmap,
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "ConicProblem":
        try:
            triples = payload["A"]
            A = sp.coo_matrix(
                (triples["vals"], (triples["rows"], triples["cols"])), shape=tuple(triples["shape"])
            ).tocsc()
            prob = cls(
                c=np.asarray(payload["c"], dtype=float),
                A=A,
                b=np.asarray(payload["b"], dtype=float),
                cones=[Cone(ConeType(cone["type"]), int(cone["dim"])) for cone in payload["cones"]],
                varmap=payload.get("varmap"),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise SolverArgumentError(f"Malformed conic problem: {e}")
        prob.validate()
        return prob


@dataclass(frozen=True)
class SolverSettings:
    eps_primal: float = 1e-6
    eps_dual: float = 1e-6
    eps_gap: float = 1e-6
    max_iters: int = 200_000
    time_limit_s: float = 150.0
    scaling: bool = True
    scaling_iters: int = 15
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    adaptive_rho: bool = True
    adapt_interval: int = 100
    check_interval: int = 25

    def __post_init__(self):
        if min(self.eps_primal, self.eps_dual, self.eps_gap) <= 0:
            raise SolverArgumentError("Solver tolerances must be positive")
        if self.max_iters <= 0 or self.check_interval <= 0:
            raise SolverArgumentError("Iteration counts must be positive")
        if not 0 < self.alpha < 2:
            raise SolverArgumentError(f"Relaxation parameter must lie in (0, 2), got {self.alpha}")


class SolverStatus(str, Enum):
    OPTIMAL = "Optimal"
    TIME_LIMIT = "TimeLimit"
    ITER_LIMIT = "IterLimit"
    INFEASIBLE = "Infeasible"
    NUMERICAL_ERROR = "NumericalError"


@dataclass(frozen=True)
class Residuals:
    primal: float
    dual: float
    gap: float


@dataclass
class SolverResult:
    status: SolverStatus
    x: np.ndarray
    y: np.ndarray
    s: np.ndarray
    residuals: Residuals
    iterations: int
    runtime_s: float
    objective: float


def project_nonneg(v: np.ndarray) -> np.ndarray:
    return np.maximum(v, 0.0)


def _project_soc_rows(t: np.ndarray, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Project each row (t_k, x_k) onto {(t, x): ||x|| <= t}."""
    norm = np.linalg.norm(x, axis=1)
    t_out = t.copy()
    x_out = x.copy()

    polar = norm <= -t
    t_out[polar] = 0.0
    x_out[polar] = 0.0

    outside = norm > np.abs(t)
    scale = 0.5 * (norm[outside] + t[outside])
    t_out[outside] = scale
    x_out[outside] = x[outside] * (scale / norm[outside])[:, None]
    return t_out, x_out


def _project_rsoc_rows(u: np.ndarray, v: np.ndarray, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project rows onto {(u, v, x): 2uv >= ||x||^2, u, v >= 0} through the rotated second order cone."""
    t = (u + v) / SQRT2
    w = (u - v) / SQRT2
    t_out, rest = _project_soc_rows(t, np.column_stack([w, x]))
    w_out = rest[:, 0]
    return (t_out + w_out) / SQRT2, (t_out - w_out) / SQRT2, rest[:, 1:]


def project_soc(t: float, x: Sequence[float]) -> Tuple[float, np.ndarray]:
    t_out, x_out = _project_soc_rows(np.array([t], dtype=float), np.atleast_2d(np.asarray(x, dtype=float)))
    return float(t_out[0]), x_out[0]


def project_rsoc(u: float, v: float, x: Sequence[float]) -> Tuple[float, float, np.ndarray]:
    u_out, v_out, x_out = _project_rsoc_rows(
        np.array([u], dtype=float), np.array([v], dtype=float), np.atleast_2d(np.asarray(x, dtype=float))
    )
    return float(u_out[0]), float(v_out[0]), x_out[0]


class ConeProjector:
    """Vectorized projection onto a product of cones.

    Blocks of the same type and dimension are gathered into index matrices
    so each family is projected with one batched call.
    """

    def __init__(self, cones: Sequence[Cone]):
        self.m = sum(cone.dim for cone in cones)
        self.zero_mask = np.zeros(self.m, dtype=bool)
        self.nonneg_mask = np.zeros(self.m, dtype=bool)
        soc: Dict[int, List[np.ndarray]] = {}
        rsoc: Dict[int, List[np.ndarray]] = {}
        self.block_starts = []
        offset = 0
        for cone in cones:
            self.block_starts.append(offset)
            idx = np.arange(offset, offset + cone.dim)
            if cone.type == ConeType.ZERO:
                self.zero_mask[idx] = True
            elif cone.type == ConeType.NONNEG:
                self.nonneg_mask[idx] = True
            elif cone.type == ConeType.SOC:
                soc.setdefault(cone.dim, []).append(idx)
            else:
                rsoc.setdefault(cone.dim, []).append(idx)
            offset += cone.dim
        self.block_starts = np.asarray(self.block_starts, dtype=np.int64)
        self.soc_groups = [np.vstack(rows) for _, rows in sorted(soc.items())]
        self.rsoc_groups = [np.vstack(rows) for _, rows in sorted(rsoc.items())]

    def _project_cones(self, v: np.ndarray, out: np.ndarray) -> np.ndarray:
        out[self.nonneg_mask] = np.maximum(v[self.nonneg_mask], 0.0)
        for idx in self.soc_groups:
            block = v[idx]
            t, x = _project_soc_rows(block[:, 0], block[:, 1:])
            out[idx[:, 0]] = t
            out[idx[:, 1:]] = x
        for idx in self.rsoc_groups:
            block = v[idx]
            a, b, x = _project_rsoc_rows(block[:, 0], block[:, 1], block[:, 2:])
            out[idx[:, 0]] = a
            out[idx[:, 1]] = b
            out[idx[:, 2:]] = x
        return out

    def project(self, v: np.ndarray) -> np.ndarray:
        """Euclidean projection onto K."""
        out = v.copy()
        out[self.zero_mask] = 0.0
        return self._project_cones(v, out)

    def project_dual(self, v: np.ndarray) -> np.ndarray:
        """Euclidean projection onto the dual cone K*; the zero cone's dual is the whole space."""
        return self._project_cones(v, v.copy())

    def block_uniform(self, d: np.ndarray) -> np.ndarray:
        """Replace d by its mean on every second order block so scaling keeps cone membership."""
        out = d.copy()
        for idx in self.soc_groups + self.rsoc_groups:
            out[idx] = d[idx].mean(axis=1)[:, None]
        return out

    def distance(self, v: np.ndarray, dual: bool = False) -> float:
        """Largest Euclidean distance of a block of v to its cone."""
        if self.m == 0:
            return 0.0
        gap = v - (self.project_dual(v) if dual else self.project(v))
        per_block = np.add.reduceat(gap * gap, self.block_starts)
        return float(np.sqrt(per_block.max()))


def cone_distance(s: np.ndarray, cones: Sequence[Cone]) -> float:
    return ConeProjector(cones).distance(np.asarray(s, dtype=float))


def _equilibrate(A: sp.csc_matrix, projector: ConeProjector, iters: int) -> Tuple[np.ndarray, np.ndarray]:
    """Ruiz equilibration: returns row scaling D and column scaling E with DAE roughly unit in max norm."""
    m, n = A.shape
    D = np.ones(m)
    E = np.ones(n)
    scaled = A.copy()
    for _ in range(iters):
        magnitude = abs(scaled)
        rows = np.asarray(magnitude.max(axis=1).todense()).ravel()
        cols = np.asarray(magnitude.max(axis=0).todense()).ravel()
        rows[rows == 0] = 1.0
        cols[cols == 0] = 1.0
        d = projector.block_uniform(np.clip(1.0 / np.sqrt(rows), 1e-4, 1e4))
        e = np.clip(1.0 / np.sqrt(cols), 1e-4, 1e4)
        scaled = sp.diags(d) @ scaled @ sp.diags(e)
        D *= d
        E *= e
    return D, E


class _Workspace:
    """Per-solve mutable state; the Solver itself stays immutable."""

    def __init__(self, prob: ConicProblem, settings: SolverSettings):
        self.settings = settings
        self.projector = ConeProjector(prob.cones)
        A = sp.csc_matrix(prob.A, dtype=float)
        self.A, self.b, self.c = A, prob.b.astype(float), prob.c.astype(float)
        m, n = A.shape
        if settings.scaling:
            self.D, self.E = _equilibrate(A, self.projector, settings.scaling_iters)
        else:
            self.D, self.E = np.ones(m), np.ones(n)
        self.As = sp.csc_matrix(sp.diags(self.D) @ A @ sp.diags(self.E))
        self.AsT = sp.csc_matrix(self.As.T)
        self.bs = self.D * self.b
        self.gamma = 1.0 / max(1.0, float(np.abs(self.E * self.c).max(initial=0.0)))
        self.cs = self.gamma * self.E * self.c
        self.n, self.m = n, m
        self.rho = settings.rho
        self.factorizations = 0
        self._factor()

    def _factor(self) -> None:
        equality_rho = min(EQUALITY_RHO_FACTOR * self.rho, RHO_MAX)
        self.rho_vec = np.where(self.projector.zero_mask, equality_rho, self.rho)
        self.kkt = sp.bmat(
            [
                [self.settings.sigma * sp.identity(self.n), self.AsT],
                [self.As, -sp.diags(1.0 / self.rho_vec)],
            ],
            format="csc",
        )
        self.lu = splu(self.kkt, permc_spec="MMD_AT_PLUS_A")
        self.factorizations += 1

    def set_rho(self, rho: float) -> None:
        self.rho = rho
        self._factor()

    def kkt_solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solve with the cached factors plus one refinement step when the factorization lost accuracy."""
        sol = self.lu.solve(rhs)
        err = rhs - self.kkt @ sol
        if np.abs(err).max(initial=0.0) > 1e-12 * (1.0 + np.abs(rhs).max(initial=0.0)):
            sol += self.lu.solve(err)
        return sol

    def unscale(self, x: np.ndarray, s: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        # iterates carry y in the polar cone; report the dual-cone multiplier
        return self.E * x, s / self.D, -self.D * y / self.gamma

    def residuals(self, x: np.ndarray, s: np.ndarray, y: np.ndarray) -> Residuals:
        A, b, c = self.A, self.b, self.c
        primal = np.abs(A @ x + s - b).max() / (1.0 + np.abs(b).max(initial=0.0))
        dual = np.abs(A.T @ y + c).max() / (1.0 + np.abs(c).max(initial=0.0))
        pobj, dobj = float(c @ x), float(b @ y)
        gap = abs(pobj + dobj) / (1.0 + abs(pobj) + abs(dobj))
        return Residuals(primal=float(primal), dual=float(dual), gap=float(gap))

    def primal_infeasible(self, dy: np.ndarray) -> bool:
        """dy is the last change of the polar-cone multiplier, in scaled space."""
        cert = -self.D * dy
        size = np.abs(cert).max(initial=0.0)
        if size <= 1e-10:
            return False
        eps = CERTIFICATE_TOLERANCE * size
        return (
            np.abs(self.A.T @ cert).max() <= eps
            and float(self.b @ cert) <= -eps
            and self.projector.distance(cert, dual=True) <= eps
        )

    def dual_infeasible(self, dx: np.ndarray) -> bool:
        cert = self.E * dx
        size = np.abs(cert).max(initial=0.0)
        if size <= 1e-10:
            return False
        eps = CERTIFICATE_TOLERANCE * size
        return float(self.c @ cert) <= -eps and self.projector.distance(-(self.A @ cert)) <= eps

    def rebalanced_rho(self, residuals: Residuals) -> float:
        """Penalty that balances the unscaled residuals, each measured against its own stopping tolerance."""
        primal = residuals.primal / self.settings.eps_primal
        dual = residuals.dual / self.settings.eps_dual
        ratio = math.sqrt(primal / max(dual, 1e-12))
        return float(np.clip(self.rho * ratio, RHO_MIN, RHO_MAX))


class Solver:
    """ADMM operator splitting solver for problems in the form of `ConicProblem`.

    Each iteration solves one quasi-definite KKT system with a cached sparse
    factorization, projects onto the cone and updates the multiplier. Status
    is decided from unscaled infinity-norm residuals checked every
    `check_interval` iterations.

    Args:
        settings: tolerances and limits; the solver never modifies them
    """

    def __init__(self, settings: Optional[SolverSettings] = None):
        self.settings = settings or SolverSettings()

    def solve(self, prob: ConicProblem) -> SolverResult:
        prob.validate()
        settings = self.settings
        start = time.perf_counter()
        try:
            ws = _Workspace(prob, settings)
        except RuntimeError as e:
            logger.error(f"KKT factorization failed: {str(e)}")
            return self._result(SolverStatus.NUMERICAL_ERROR, prob, None, 0, start)

        n, m = ws.n, ws.m
        x, s, y = np.zeros(n), np.zeros(m), np.zeros(m)
        dx, dy = np.zeros(n), np.zeros(m)
        alpha, sigma = settings.alpha, settings.sigma
        status = None
        last_adapt = 0
        updates = 0
        iteration = 0

        for iteration in range(1, settings.max_iters + 1):
            rho_vec = ws.rho_vec
            rhs = np.concatenate([sigma * x - ws.cs, ws.bs - s + y / rho_vec])
            sol = ws.kkt_solve(rhs)
            x_tilde, nu = sol[:n], sol[n:]
            s_tilde = s - (nu + y) / rho_vec

            x_next = alpha * x_tilde + (1.0 - alpha) * x
            s_relaxed = alpha * s_tilde + (1.0 - alpha) * s
            s_next = ws.projector.project(s_relaxed + y / rho_vec)
            y_next = y + rho_vec * (s_relaxed - s_next)

            dx, dy = x_next - x, y_next - y
            x, s, y = x_next, s_next, y_next

            if iteration % settings.check_interval and iteration != settings.max_iters:
                continue

            if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
                status = SolverStatus.NUMERICAL_ERROR
                break
            xu, su, yu = ws.unscale(x, s, y)
            residuals = ws.residuals(xu, su, yu)
            logger.debug(
                f"iter {iteration}: primal {residuals.primal:.3e} dual {residuals.dual:.3e} "
                f"gap {residuals.gap:.3e} rho {ws.rho:.3e}"
            )
            if (
                residuals.primal <= settings.eps_primal
                and residuals.dual <= settings.eps_dual
                and residuals.gap <= settings.eps_gap
            ):
                status = SolverStatus.OPTIMAL
                break
            if ws.primal_infeasible(dy) or ws.dual_infeasible(dx):
                status = SolverStatus.INFEASIBLE
                break
            if time.perf_counter() - start > settings.time_limit_s:
                status = SolverStatus.TIME_LIMIT
                break
            if (
                settings.adaptive_rho
                and updates < MAX_RHO_UPDATES
                and iteration - last_adapt >= settings.adapt_interval * (1 + updates)
            ):
                rho = ws.rebalanced_rho(residuals)
                if rho > 5.0 * ws.rho or rho < 0.2 * ws.rho:
                    try:
                        ws.set_rho(rho)
                    except RuntimeError as e:
                        logger.error(f"KKT refactorization failed: {str(e)}")
                        status = SolverStatus.NUMERICAL_ERROR
                        break
                    last_adapt = iteration
                    updates += 1

        if status is None:
            status = SolverStatus.ITER_LIMIT
        return self._result(status, prob, ws.unscale(x, s, y), iteration, start, ws)

    def _result(self, status, prob, point, iterations, start, ws: Optional[_Workspace] = None) -> SolverResult:
        if point is None:
            x, s, y = np.full(prob.n, np.nan), np.full(prob.m, np.nan), np.full(prob.m, np.nan)
            residuals = Residuals(math.inf, math.inf, math.inf)
        else:
            x, s, y = point
            if np.all(np.isfinite(x)) and np.all(np.isfinite(y)) and ws is not None:
                residuals = ws.residuals(x, s, y)
            else:
                residuals = Residuals(math.inf, math.inf, math.inf)
        runtime = time.perf_counter() - start
        objective = float(prob.c @ x) if np.all(np.isfinite(x)) else math.nan
        logger.debug(f"Solver finished: {status.value} after {iterations} iterations in {runtime:.3f}s")
        return SolverResult(
            status=status,
            x=x,
            y=y,
            s=s,
            residuals=residuals,
            iterations=iterations,
            runtime_s=runtime,
            objective=objective,
        )


def solve(prob: ConicProblem, settings: Optional[SolverSettings] = None) -> SolverResult:
    return Solver(settings).solve(prob)
