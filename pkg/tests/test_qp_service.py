from itertools import combinations

import numpy as np
import pytest

from rcwbc.errors import DimensionMismatch, IllConditioned, InfeasibleProblem
from rcwbc.services.qp_service import (
    INFEASIBLE, MAX_ITERATIONS, OPTIMAL, QpDuals, QpProblem, QpSolver, kkt_residual, kkt_terms, solve_qp,
)


def _random_problem(rng, n=3, m=2, scale=3.0):
    B = rng.normal(size=(n, n))
    return QpProblem(
        H=B @ B.T + 0.5 * np.eye(n), g=scale * rng.normal(size=n),
        A_in=rng.normal(size=(m, n)), lb_in=-np.ones(m), ub_in=np.ones(m),
        lb=-np.ones(n), ub=np.ones(n),
    )


def _brute_force_objective(problem):
    """Best feasible equality-constrained minimizer over every working set of up to n one-sided rows."""
    n = problem.n
    rows, rhs = [], []
    for A, lo, hi in ((problem.A_in, problem.lb_in, problem.ub_in), (np.eye(n), problem.lb, problem.ub)):
        for i in range(A.shape[0]):
            rows += [A[i], A[i]]
            rhs += [lo[i], hi[i]]

    def feasible(x):
        return (np.all(problem.A_in @ x >= problem.lb_in - 1e-9) and np.all(problem.A_in @ x <= problem.ub_in + 1e-9)
                and np.all(x >= problem.lb - 1e-9) and np.all(x <= problem.ub + 1e-9))

    best = np.inf
    for size in range(n + 1):
        for subset in combinations(range(len(rows)), size):
            if any(i ^ 1 in subset for i in subset):
                continue
            N = np.array([rows[i] for i in subset]).reshape(size, n)
            K = np.block([[problem.H, N.T], [N, np.zeros((size, size))]])
            try:
                sol = np.linalg.solve(K, np.concatenate([-problem.g, [rhs[i] for i in subset]]))
            except np.linalg.LinAlgError:
                continue
            x = sol[:n]
            if feasible(x):
                best = min(best, problem.objective(x))
    return best


def _one_sided_problem(rng):
    """Strictly convex, n <= 20, at most 10 rows N x >= d with x = 0 feasible."""
    n = int(rng.integers(2, 21))
    m = int(rng.integers(1, 11))
    B = rng.normal(size=(n, n))
    return QpProblem(H=B @ B.T + 0.5 * np.eye(n), g=5.0 * rng.normal(size=n),
                     A_in=rng.normal(size=(m, n)), lb_in=-rng.uniform(0.1, 1.0, size=m))


def _enumerated_minimizer(problem):
    """Lowest-objective feasible stationary point over every working set of the one-sided rows."""
    n, m = problem.n, problem.A_in.shape[0]
    best, best_x = np.inf, None
    for size in range(min(n, m) + 1):
        for subset in combinations(range(m), size):
            N = problem.A_in[list(subset)].reshape(size, n)
            K = np.block([[problem.H, N.T], [N, np.zeros((size, size))]])
            try:
                x = np.linalg.solve(K, np.concatenate([-problem.g, problem.lb_in[list(subset)]]))[:n]
            except np.linalg.LinAlgError:
                continue
            if np.all(problem.A_in @ x >= problem.lb_in - 1e-9) and problem.objective(x) < best:
                best, best_x = problem.objective(x), x
    return best_x


# --- SMALL CASES ---
def test_scalar_lower_bound():
    solution = solve_qp(QpProblem(H=[[2.0]], g=[0.0], lb=[1.0]))
    assert solution.status == OPTIMAL
    assert solution.x[0] == pytest.approx(1.0)
    assert solution.duals.box[0] == pytest.approx(2.0)
    assert solution.objective == pytest.approx(1.0)


def test_upper_bound_dual_is_negative():
    solution = solve_qp(QpProblem(H=[[1.0]], g=[-2.0], ub=[1.0]))
    assert solution.x[0] == pytest.approx(1.0)
    assert solution.duals.box[0] == pytest.approx(-1.0)


def test_equality_only():
    solution = solve_qp(QpProblem(H=np.eye(2), g=np.zeros(2), A_eq=[[1.0, 1.0]], b_eq=[1.0]))
    np.testing.assert_allclose(solution.x, [0.5, 0.5])
    assert solution.duals.eq[0] == pytest.approx(0.5)
    assert solution.iterations == 0
    assert solution.kkt_residual < 1e-12


def test_unconstrained_minimum():
    H = np.array([[4.0, 1.0], [1.0, 3.0]])
    g = np.array([1.0, -2.0])
    solution = solve_qp(QpProblem(H=H, g=g))
    np.testing.assert_allclose(solution.x, np.linalg.solve(H, -g))
    assert solution.active_set == ()


def test_dependent_equalities_are_skipped():
    solution = solve_qp(QpProblem(H=np.eye(2), g=np.zeros(2), A_eq=[[1.0, 1.0], [2.0, 2.0]], b_eq=[1.0, 2.0]))
    assert solution.optimal
    np.testing.assert_allclose(solution.x, [0.5, 0.5])


def test_inconsistent_equalities_are_infeasible():
    solution = solve_qp(QpProblem(H=np.eye(2), g=np.zeros(2), A_eq=[[1.0, 1.0], [2.0, 2.0]], b_eq=[1.0, 3.0]))
    assert solution.status == INFEASIBLE


# --- INFEASIBILITY ---
def test_contradicting_rows_are_infeasible():
    problem = QpProblem(H=[[2.0]], g=[0.0], A_in=[[1.0], [1.0]], lb_in=[1.0, -np.inf], ub_in=[np.inf, 0.0])
    solution = solve_qp(problem)
    assert solution.status == INFEASIBLE
    assert solution.certificate == pytest.approx(0.5, abs=1e-6)
    with pytest.raises(InfeasibleProblem):
        solution.raise_for_status()


def test_crossed_box_bounds_are_infeasible():
    solution = solve_qp(QpProblem(H=np.eye(2), g=np.zeros(2), lb=[0.0, 2.0], ub=[1.0, 1.0]))
    assert solution.status == INFEASIBLE
    assert solution.certificate == pytest.approx(1.0)


def test_iteration_limit():
    solution = solve_qp(QpProblem(H=np.eye(3), g=np.zeros(3), lb=[1.0, 1.0, 1.0]), max_iterations=1)
    assert solution.status == MAX_ITERATIONS
    assert not solution.optimal


# --- INPUT CHECKS ---
def test_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        solve_qp(QpProblem(H=np.eye(2), g=np.zeros(3)))


def test_asymmetric_hessian():
    with pytest.raises(IllConditioned):
        solve_qp(QpProblem(H=[[1.0, 1.0], [0.0, 1.0]], g=np.zeros(2)))


def test_indefinite_hessian():
    with pytest.raises(IllConditioned):
        solve_qp(QpProblem(H=np.diag([1.0, -1.0]), g=np.zeros(2)))


def test_semidefinite_hessian():
    solution = solve_qp(QpProblem(H=np.diag([1.0, 0.0]), g=[0.0, -1.0], ub=[np.inf, 2.0]))
    assert solution.optimal
    np.testing.assert_allclose(solution.x, [0.0, 2.0], atol=1e-8)
    assert solution.duals.box[1] == pytest.approx(-1.0, abs=1e-6)


# --- AGAINST ENUMERATION ---
def test_matches_active_set_enumeration(rng):
    for _ in range(20):
        problem = _random_problem(rng)
        solution = solve_qp(problem)
        assert solution.optimal
        assert solution.objective == pytest.approx(_brute_force_objective(problem), abs=1e-8)
        assert solution.kkt_residual < 1e-8


def test_matches_enumeration_up_to_twenty_variables(rng):
    for _ in range(200):
        problem = _one_sided_problem(rng)
        solution = solve_qp(problem)
        expected = _enumerated_minimizer(problem)
        assert solution.optimal
        np.testing.assert_allclose(solution.x, expected, atol=1e-6)
        assert solution.objective == pytest.approx(problem.objective(expected), abs=1e-6)
        assert solution.kkt_residual < 1e-8
        assert kkt_residual(problem, solution.x, solution.duals) < 1e-8
        assert np.all(solution.duals.ineq >= 0.0)


def test_kkt_terms_flag_perturbed_points(rng):
    problem = _random_problem(rng)
    solution = solve_qp(problem)
    assert kkt_residual(problem, solution.x, solution.duals) < 1e-8
    shifted = solution.x + 1e-3 * rng.normal(size=problem.n)
    assert kkt_residual(problem, shifted, solution.duals) > 1e-6

    wrong_sign = QpDuals(solution.duals.eq, solution.duals.ineq, -solution.duals.box - 1.0)
    terms = kkt_terms(problem, solution.x, wrong_sign)
    assert terms["stationarity"] > 1e-3


def test_kkt_terms_shape_check():
    problem = QpProblem(H=np.eye(2), g=np.zeros(2))
    with pytest.raises(DimensionMismatch):
        kkt_terms(problem, np.zeros(3), QpDuals(np.zeros(0), np.zeros(0), np.zeros(2)))


# --- WARM START ---
def test_warm_start_reuses_active_set(rng):
    problem = _random_problem(rng, n=6, m=4, scale=100.0)
    solver = QpSolver()
    cold = solver.solve_qp(problem)
    assert cold.optimal and cold.active_set

    problem.g = problem.g + 1e-6 * rng.normal(size=problem.n)
    warm = solver.solve_qp(problem, warm_start=solver.active_set)
    again = QpSolver().solve_qp(problem)
    assert warm.optimal
    assert warm.iterations <= 2
    np.testing.assert_allclose(warm.x, again.x, atol=1e-8)


def test_stale_warm_start_still_solves(rng):
    problem = _random_problem(rng)
    bogus = (("box", 0, 1), ("box", 0, -1), ("in", 5, 1))
    warm = solve_qp(problem, warm_start=bogus)
    cold = solve_qp(problem)
    assert warm.optimal
    np.testing.assert_allclose(warm.x, cold.x, atol=1e-8)
