"""
src/rcwbc/services/qp_service.py
Dense convex QP front end over quadprog.
    minimize    1/2 x^T H x + g^T x
    subject to  A_eq x = b_eq
                lb_in <= A_in x <= ub_in
                lb <= x <= ub
Features:
- Two-sided rows and box bounds folded into quadprog's one-sided C^T x >= b form.
- Dependent equality rows dropped before the solve; inconsistent ones reported as infeasible.
- Signed multipliers mapped back onto the original rows.
- Warm start: the previous active set is tried as equalities first and kept when its multipliers stay non-negative.
- Infeasibility certificate from an elastic re-solve (largest slack needed to satisfy every row).
- Positive semidefinite H through proximal-point outer iterations.
"""
from dataclasses import dataclass, field

import numpy as np
import quadprog
from loguru import logger
from scipy.linalg import LinAlgError, cho_factor, cho_solve, lstsq, qr, solve

from rcwbc.errors import DimensionMismatch, IllConditioned, InfeasibleProblem

OPTIMAL = "optimal"
MAX_ITERATIONS = "max_iterations"
INFEASIBLE = "infeasible"

_RANK_TOL = 1e-10
_PSD_SHIFT = 1e-12
_ELASTIC_REG = 1e-8


@dataclass
class QpProblem:
    H: np.ndarray
    g: np.ndarray
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    A_in: np.ndarray | None = None
    lb_in: np.ndarray | None = None
    ub_in: np.ndarray | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None
    names: dict = field(default_factory=dict)

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        self.g = np.atleast_1d(np.asarray(self.g, dtype=float))
        n = self.g.shape[0]
        self.A_eq = np.zeros((0, n)) if self.A_eq is None else np.atleast_2d(np.asarray(self.A_eq, dtype=float))
        self.b_eq = np.zeros(0) if self.b_eq is None else np.atleast_1d(np.asarray(self.b_eq, dtype=float))
        self.A_in = np.zeros((0, n)) if self.A_in is None else np.atleast_2d(np.asarray(self.A_in, dtype=float))
        m = self.A_in.shape[0]
        self.lb_in = np.full(m, -np.inf) if self.lb_in is None else np.atleast_1d(np.asarray(self.lb_in, dtype=float))
        self.ub_in = np.full(m, np.inf) if self.ub_in is None else np.atleast_1d(np.asarray(self.ub_in, dtype=float))
        self.lb = np.full(n, -np.inf) if self.lb is None else np.atleast_1d(np.asarray(self.lb, dtype=float))
        self.ub = np.full(n, np.inf) if self.ub is None else np.atleast_1d(np.asarray(self.ub, dtype=float))

    @property
    def n(self):
        return self.g.shape[0]

    def validate(self):
        n = self.n
        if self.H.shape != (n, n):
            raise DimensionMismatch(f"H is {self.H.shape}, expected ({n}, {n})")
        if self.A_eq.shape[1:] != (n,) or self.b_eq.shape != (self.A_eq.shape[0],):
            raise DimensionMismatch(f"Equality block is {self.A_eq.shape} with rhs {self.b_eq.shape}")
        m = self.A_in.shape[0]
        if self.A_in.shape[1:] != (n,) or self.lb_in.shape != (m,) or self.ub_in.shape != (m,):
            raise DimensionMismatch(f"Inequality block is {self.A_in.shape} with bounds "
                                    f"{self.lb_in.shape}/{self.ub_in.shape}")
        if self.lb.shape != (n,) or self.ub.shape != (n,):
            raise DimensionMismatch(f"Box bounds are {self.lb.shape}/{self.ub.shape}, expected ({n},)")
        scale = max(1.0, float(np.abs(self.H).max(initial=0.0)))
        if np.abs(self.H - self.H.T).max(initial=0.0) > 1e-10 * scale:
            raise IllConditioned("H is not symmetric")

    def objective(self, x):
        return float(0.5 * x @ self.H @ x + self.g @ x)


@dataclass
class QpDuals:
    """Signed multipliers: positive when a lower bound is active, negative for an upper bound."""
    eq: np.ndarray
    ineq: np.ndarray
    box: np.ndarray


@dataclass
class QpSolution:
    x: np.ndarray
    objective: float
    duals: QpDuals
    status: str
    iterations: int
    kkt_residual: float
    active_set: tuple = ()
    certificate: float = 0.0

    @property
    def optimal(self):
        return self.status == OPTIMAL

    def raise_for_status(self):
        if self.status == INFEASIBLE:
            raise InfeasibleProblem(f"QP is infeasible (certificate {self.certificate:.3e})", self.certificate)
        return self


# --- KKT CHECKS ---
def kkt_terms(problem: QpProblem, x, duals: QpDuals) -> dict:
    """Stationarity, primal violation, dual sign and complementarity, each relative to the problem scale."""
    x = np.asarray(x, dtype=float)
    if x.shape != (problem.n,) or duals.eq.shape != problem.b_eq.shape \
            or duals.ineq.shape != problem.lb_in.shape or duals.box.shape != (problem.n,):
        raise DimensionMismatch("Candidate point or multipliers do not match the problem")

    Hx = problem.H @ x
    grad = Hx + problem.g - problem.A_eq.T @ duals.eq - problem.A_in.T @ duals.ineq - duals.box
    scale = max(1.0, float(np.abs(problem.g).max(initial=0.0)),
                float(np.abs(problem.H).max(initial=0.0)) * float(np.abs(x).max(initial=0.0)))
    stationarity = float(np.abs(grad).max(initial=0.0)) / scale

    Ax = problem.A_in @ x
    primal = [np.abs(problem.A_eq @ x - problem.b_eq) / np.maximum(1.0, np.abs(problem.b_eq))]
    complementarity, dual = [], []
    for value, y, lo, hi in ((Ax, duals.ineq, problem.lb_in, problem.ub_in), (x, duals.box, problem.lb, problem.ub)):
        with np.errstate(invalid="ignore"):
            lo_slack = value - lo
            hi_slack = hi - value
            lo_scale = np.maximum(1.0, np.where(np.isfinite(lo), np.abs(lo), 0.0))
            hi_scale = np.maximum(1.0, np.where(np.isfinite(hi), np.abs(hi), 0.0))
            primal.append(np.maximum(0.0, -lo_slack) / lo_scale)
            primal.append(np.maximum(0.0, -hi_slack) / hi_scale)
            pos = np.maximum(y, 0.0)
            neg = np.maximum(-y, 0.0)
            complementarity.append(np.where(pos > 0.0, pos * np.where(np.isfinite(lo_slack), np.abs(lo_slack), 1.0),
                                            0.0) / scale)
            complementarity.append(np.where(neg > 0.0, neg * np.where(np.isfinite(hi_slack), np.abs(hi_slack), 1.0),
                                            0.0) / scale)
            # a multiplier on a missing side is a dual sign violation
            dual.append(np.where(np.isfinite(lo), 0.0, pos) / scale)
            dual.append(np.where(np.isfinite(hi), 0.0, neg) / scale)

    def worst(parts):
        return max((float(np.max(p)) for p in parts if p.size), default=0.0)

    return {
        "stationarity": stationarity,
        "primal": worst(primal),
        "dual": worst(dual),
        "complementarity": worst(complementarity),
    }


def kkt_residual(problem: QpProblem, x, duals: QpDuals) -> float:
    return max(kkt_terms(problem, x, duals).values())


# --- ROW BOOKKEEPING ---
@dataclass
class _Rows:
    normals: np.ndarray
    rhs: np.ndarray
    keys: list
    n_eq: int


def _one_sided_rows(problem: QpProblem) -> _Rows:
    """Equalities first, then every finite bound as a row n^T x >= d."""
    n = problem.n
    eye = np.eye(n)
    eq_rows, eq_rhs, eq_keys = [], [], []
    in_rows, in_rhs, in_keys = [], [], []

    for i in range(problem.A_eq.shape[0]):
        eq_rows.append(problem.A_eq[i])
        eq_rhs.append(problem.b_eq[i])
        eq_keys.append(("eq", i, 0))

    for block, A, lo, hi in (("in", problem.A_in, problem.lb_in, problem.ub_in), ("box", eye, problem.lb, problem.ub)):
        for i in range(A.shape[0]):
            if lo[i] == hi[i]:
                eq_rows.append(A[i])
                eq_rhs.append(lo[i])
                eq_keys.append((block, i, 0))
                continue
            if np.isfinite(lo[i]):
                in_rows.append(A[i])
                in_rhs.append(lo[i])
                in_keys.append((block, i, 1))
            if np.isfinite(hi[i]):
                in_rows.append(-A[i])
                in_rhs.append(-hi[i])
                in_keys.append((block, i, -1))

    rows = eq_rows + in_rows
    normals = np.array(rows) if rows else np.zeros((0, n))
    return _Rows(normals.reshape(-1, n), np.array(eq_rhs + in_rhs, dtype=float), eq_keys + in_keys, len(eq_rows))


def _duals_from(problem: QpProblem, rows: _Rows, multipliers: dict) -> QpDuals:
    duals = QpDuals(np.zeros(problem.b_eq.shape[0]), np.zeros(problem.lb_in.shape[0]), np.zeros(problem.n))
    target = {"eq": duals.eq, "in": duals.ineq, "box": duals.box}
    for row, u in multipliers.items():
        block, i, side = rows.keys[row]
        target[block][i] += u if side >= 0 else -u
    return duals


# --- QUADPROG ---
def _quadprog(H, g, normals, rhs, meq):
    """
    quadprog.solve_qp on  min 1/2 x^T H x + g^T x  s.t.  normals x >= rhs, first `meq` rows as equalities.
    Returns x, row multipliers, active row positions and the number of active-set changes past the equalities.
    """
    G = np.array(H, dtype=float, order="C")
    a = -np.asarray(g, dtype=float)
    try:
        if normals.shape[0] == 0:
            x, _, _, counts, multipliers, iact = quadprog.solve_qp(G, a)
        else:
            C = np.ascontiguousarray(normals.T, dtype=float)
            b = np.ascontiguousarray(rhs, dtype=float)
            x, _, _, counts, multipliers, iact = quadprog.solve_qp(G, a, C, b, meq)
    except ValueError as e:
        if "positive definite" in str(e):
            raise LinAlgError(str(e)) from e
        raise InfeasibleProblem(f"quadprog: {e}") from e
    active = sorted({int(i) - 1 for i in np.atleast_1d(iact) if i > 0} | set(range(meq)))
    changes = max(0, int(counts[0]) - 1 - meq) + int(counts[1])
    return np.asarray(x, dtype=float), np.asarray(multipliers, dtype=float), active, changes


class QpSolver:
    """
    One instance serves one problem at a time; the last active set is kept as workspace
    so that consecutive control ticks can warm start.
    """

    def __init__(self, tolerance: float = 1e-8, max_iterations: int = 200):
        self.tolerance = tolerance
        self.max_iterations = max_iterations
        self.active_set = None

    # --- EQUALITIES ---
    def _independent_equalities(self, rows: _Rows):
        """A linearly independent subset of the equality rows, and the residual left when the full set conflicts."""
        if rows.n_eq == 0:
            return [], 0.0
        E = rows.normals[:rows.n_eq]
        d = rows.rhs[:rows.n_eq]
        _, R, pivots = qr(E.T, mode="economic", pivoting=True)
        diagonal = np.abs(np.diag(R))
        rank = int(np.sum(diagonal > _RANK_TOL * max(1.0, float(diagonal.max(initial=0.0)))))
        keep = sorted(int(i) for i in pivots[:rank])
        x = lstsq(E[keep], d[keep])[0] if keep else np.zeros(E.shape[1])
        residual = float(np.abs(E @ x - d).max())
        if residual > self.tolerance * max(1.0, float(np.abs(d).max())):
            return keep, residual
        if rank < rows.n_eq:
            skipped = [rows.keys[i] for i in range(rows.n_eq) if i not in keep]
            logger.debug(f"Dependent equality rows {skipped} skipped")
        return keep, 0.0

    # --- SOLVES ---
    def _run(self, H, g, rows, equalities, inequalities):
        order = list(equalities) + list(inequalities)
        x, multipliers, active, changes = _quadprog(H, g, rows.normals[order], rows.rhs[order], len(equalities))
        u = {order[j]: float(multipliers[j]) for j in active}
        return x, u, [order[j] for j in active], changes

    def _warm_run(self, H, g, rows, equalities, inequalities, warm_start):
        """Solve with the previous active rows held at equality; None when that guess is not optimal."""
        lookup = {key: i for i, key in enumerate(rows.keys)}
        guess = sorted({lookup[k] for k in warm_start if k in lookup and lookup[k] >= rows.n_eq})
        if not guess:
            return None
        rest = [i for i in inequalities if i not in set(guess)]
        try:
            x, u, active, changes = self._run(H, g, rows, list(equalities) + guess, rest)
        except InfeasibleProblem:
            logger.debug("Warm start set is inconsistent, solving cold")
            return None
        scale = max(1.0, max((abs(v) for v in u.values()), default=0.0))
        if any(u.get(j, 0.0) < -self.tolerance * scale for j in guess):
            logger.debug("Warm start set has a wrong-signed multiplier, solving cold")
            return None
        for j in guess:
            u[j] = max(u.get(j, 0.0), 0.0)
        return x, u, active, changes

    def _elastic(self, rows, equalities, inequalities):
        """Smallest slacks s >= 0 with N x + s >= d; the largest slack certifies infeasibility."""
        n = rows.normals.shape[1]
        m = len(inequalities)
        H = np.diag(np.concatenate([np.full(n, _ELASTIC_REG), np.ones(m)]))
        normals = np.vstack([
            np.hstack([rows.normals[equalities], np.zeros((len(equalities), m))]),
            np.hstack([rows.normals[inequalities], np.eye(m)]),
            np.hstack([np.zeros((m, n)), np.eye(m)]),
        ])
        rhs = np.concatenate([rows.rhs[equalities], rows.rhs[inequalities], np.zeros(m)])
        try:
            z = _quadprog(H, np.zeros(n + m), normals, rhs, len(equalities))[0]
        except (InfeasibleProblem, LinAlgError):
            return np.zeros(n), float("inf")
        return z[:n], float(z[n:].max(initial=0.0))

    def _polish(self, factor, g, rows, active, x, u):
        """Re-solve on the final working set to clean up round-off; kept only when it stays feasible."""
        if not active:
            return x, u
        N = rows.normals[active].T
        Hinv_g = cho_solve(factor, g)
        Hinv_N = cho_solve(factor, N)
        try:
            values = solve(N.T @ Hinv_N, rows.rhs[active] + N.T @ Hinv_g, assume_a="pos")
        except (LinAlgError, ValueError):
            return x, u
        x_new = Hinv_N @ values - Hinv_g
        inequality = np.array([j >= rows.n_eq for j in active])
        slack = rows.normals[rows.n_eq:] @ x_new - rows.rhs[rows.n_eq:]
        tol = self.tolerance * np.maximum(1.0, np.abs(rows.rhs[rows.n_eq:]))
        scale = max(1.0, float(np.abs(values).max()))
        if not np.all(np.isfinite(x_new)) or np.any(slack < -tol) \
                or np.any(values[inequality] < -self.tolerance * scale):
            return x, u
        return x_new, {j: (max(v, 0.0) if j >= rows.n_eq else float(v)) for j, v in zip(active, values)}

    def _solve_definite(self, H, g, rows, equalities, warm_start):
        factor = cho_factor(H, lower=True)
        inequalities = list(range(rows.n_eq, len(rows.rhs)))
        solved = self._warm_run(H, g, rows, equalities, inequalities, warm_start) if warm_start else None
        if solved is None:
            try:
                solved = self._run(H, g, rows, equalities, inequalities)
            except InfeasibleProblem:
                x, certificate = self._elastic(rows, equalities, inequalities)
                return x, {}, [], INFEASIBLE, 0, certificate
        x, u, active, iterations = solved
        x, u = self._polish(factor, g, rows, active, x, u)
        status = MAX_ITERATIONS if iterations > self.max_iterations else OPTIMAL
        return x, u, active, status, iterations, 0.0

    def _solve_proximal(self, problem, rows, equalities, warm_start):
        """Proximal-point outer loop: each inner problem has H + rho I, which is positive definite."""
        n = problem.n
        rho = 1e-6 * max(1.0, float(np.abs(problem.H).max(initial=0.0)))
        H = problem.H + rho * np.eye(n)
        x_k = np.zeros(n)
        warm = warm_start
        total = 0
        u, active = {}, []
        for _ in range(self.max_iterations):
            try:
                x, u, active, status, iterations, certificate = self._solve_definite(
                    H, problem.g - rho * x_k, rows, equalities, warm)
            except LinAlgError as e:
                raise IllConditioned(f"Regularized H is not positive definite: {e}") from e
            total += iterations
            if status == INFEASIBLE:
                return x, u, active, status, total, certificate
            if np.linalg.norm(x - x_k) <= self.tolerance * (1.0 + np.linalg.norm(x)):
                return x, u, active, MAX_ITERATIONS if total > self.max_iterations else OPTIMAL, total, 0.0
            x_k = x
            warm = [rows.keys[j] for j in active]
        return x_k, u, active, MAX_ITERATIONS, total, 0.0

    def solve_qp(self, problem: QpProblem, warm_start=None) -> QpSolution:
        problem.validate()
        n = problem.n
        rows = _one_sided_rows(problem)

        gaps = np.concatenate([problem.lb_in - problem.ub_in, problem.lb - problem.ub])
        if np.any(gaps > 0.0):
            return self._finish(problem, rows, np.zeros(n), {}, [], INFEASIBLE, 0, float(gaps.max()))

        equalities, conflict = self._independent_equalities(rows)
        if conflict > 0.0:
            return self._finish(problem, rows, np.zeros(n), {}, [], INFEASIBLE, 0, conflict)

        try:
            result = self._solve_definite(problem.H, problem.g, rows, equalities, warm_start)
        except LinAlgError:
            try:
                cho_factor(problem.H + _PSD_SHIFT * np.eye(n), lower=True)
            except LinAlgError as e:
                raise IllConditioned(f"H is not positive semidefinite: {e}") from e
            result = self._solve_proximal(problem, rows, equalities, warm_start)
        return self._finish(problem, rows, *result)

    def _finish(self, problem, rows, x, u, active, status, iterations, certificate):
        duals = _duals_from(problem, rows, u)
        residual = kkt_residual(problem, x, duals)
        if status == OPTIMAL and residual > self.tolerance:
            logger.warning(f"QP stopped with KKT residual {residual:.3e} above tolerance {self.tolerance:.1e}")
            status = MAX_ITERATIONS
        self.active_set = tuple(rows.keys[j] for j in active)
        if status == INFEASIBLE:
            logger.debug(f"QP infeasible, certificate {certificate:.3e}")
        return QpSolution(x=x, objective=problem.objective(x), duals=duals, status=status, iterations=iterations,
                          kkt_residual=residual, active_set=self.active_set, certificate=certificate)


def solve_qp(problem: QpProblem, tolerance: float = 1e-8, max_iterations: int = 200, warm_start=None) -> QpSolution:
    return QpSolver(tolerance, max_iterations).solve_qp(problem, warm_start)
