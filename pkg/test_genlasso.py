"""
Test script for the diagonal-design generalized lasso ADMM solver.
"""

import numpy as np
import pytest
from scipy.optimize import minimize

from errors import DataError, DimensionError, UsageError
from genlasso import GenLassoProblem, gl_objective, soft_threshold, solve
from models import SolverConfig
from voxelgrid import DiffOperator, VoxelGrid, build_graph, incidence_operator


def chain_operator(p, weights=1.0):
    edges = np.column_stack([np.arange(p - 1), np.arange(1, p)])
    return incidence_operator(edges, p, weights)


def random_problem(seed, lam=None):
    rng = np.random.default_rng(seed)
    mask = rng.random((3, 3, 3)) < 0.8
    mask[1, 1, 1] = True
    grid = VoxelGrid.from_mask(mask)
    graph = build_graph(grid)
    weights = rng.uniform(0.5, 2.0, size=graph.n_edges)
    operator = incidence_operator(graph.edges, grid.p, weights)
    x = rng.uniform(0.2, 1.5, size=grid.p)
    y = rng.normal(scale=2.0, size=grid.p)
    return GenLassoProblem(y, x, operator, rng.uniform(0.05, 1.5) if lam is None else lam)


def dual_reference(problem):
    """Box-constrained dual solved by L-BFGS-B; beta recovered from the dual point."""
    D = problem.operator.matrix.tocsr()
    xy, x2, lam = problem.x_diag * problem.y_tilde, problem.x_diag ** 2, problem.lam

    def fun(u):
        r = xy - lam * (D.T @ u)
        return 0.5 * np.sum(r * r / x2), -lam * (D @ (r / x2))

    result = minimize(fun, np.zeros(problem.m), jac=True, method="L-BFGS-B",
                      bounds=[(-1.0, 1.0)] * problem.m,
                      options={"ftol": 1e-16, "gtol": 1e-13, "maxiter": 100000, "maxcor": 30})
    return (xy - lam * (D.T @ result.x)) / x2


def test_objective_hand_example():
    problem = GenLassoProblem(np.array([1.0, 0.0]), np.ones(2), chain_operator(2), 0.25)
    assert gl_objective(problem, np.array([0.75, 0.25])) == pytest.approx(0.0625 + 0.125)


def test_objective_trivial_points():
    problem = random_problem(0)
    assert gl_objective(problem, np.zeros(problem.p)) == pytest.approx(0.5 * problem.y_tilde @ problem.y_tilde)
    resid = problem.y_tilde - problem.x_diag * 1.7
    assert gl_objective(problem, np.full(problem.p, 1.7)) == pytest.approx(0.5 * resid @ resid)


def test_objective_rejects_bad_beta():
    problem = random_problem(1)
    with pytest.raises(DataError):
        gl_objective(problem, np.full(problem.p, np.inf))
    with pytest.raises(DimensionError):
        gl_objective(problem, np.zeros(problem.p + 1))


def test_problem_validation():
    with pytest.raises(UsageError):
        GenLassoProblem(np.zeros(2), np.ones(2), chain_operator(2), -0.1)
    with pytest.raises(DataError):
        GenLassoProblem(np.zeros(2), np.array([1.0, 0.0]), chain_operator(2), 0.1)
    with pytest.raises(DimensionError):
        GenLassoProblem(np.zeros(3), np.ones(3), chain_operator(2), 0.1)


def test_soft_threshold_tie_maps_to_zero():
    np.testing.assert_array_equal(soft_threshold(np.array([-2.0, -1.0, 0.5, 1.0, 3.0]), 1.0),
                                  [-1.0, 0.0, 0.0, 0.0, 2.0])


def test_two_voxel_chain_solution():
    problem = GenLassoProblem(np.array([1.0, 0.0]), np.ones(2), chain_operator(2), 0.25)
    report = solve(problem)
    assert report.converged
    np.testing.assert_allclose(report.beta, [0.75, 0.25], atol=1e-8)
    assert report.objective == pytest.approx(0.1875, abs=1e-10)


def test_zero_lambda_is_least_squares():
    problem = random_problem(2, lam=0.0)
    report = solve(problem)
    np.testing.assert_allclose(report.beta, problem.y_tilde / problem.x_diag, atol=1e-10)
    assert report.iterations == 0

    scaled = GenLassoProblem(3.0 * problem.y_tilde, problem.x_diag, problem.operator, 0.0)
    np.testing.assert_allclose(solve(scaled).beta, 3.0 * report.beta, rtol=1e-12, atol=1e-12)


def test_large_lambda_gives_weighted_mean():
    rng = np.random.default_rng(3)
    p = 12
    x = rng.uniform(0.5, 1.5, size=p)
    y = rng.normal(size=p)
    report = solve(GenLassoProblem(y, x, chain_operator(p), 1e6))
    mean = np.sum(x * y) / np.sum(x ** 2)
    np.testing.assert_allclose(report.beta, mean, atol=1e-4)


@pytest.mark.parametrize("seed", range(10))
def test_matches_dual_reference(seed):
    problem = random_problem(seed)
    report = solve(problem)
    assert report.converged
    reference = gl_objective(problem, dual_reference(problem))
    tol = 1e-6 * (1 + abs(reference))
    assert report.objective <= reference + tol
    assert report.objective >= reference - 1e-4 * (1 + abs(reference))
    assert report.primal_residual >= 0 and np.isfinite(report.objective)


@pytest.mark.parametrize("seed", range(3))
def test_beats_simple_reference_points(seed):
    problem = random_problem(seed + 20)
    report = solve(problem)
    x2 = problem.x_diag ** 2
    for beta_ref in (np.zeros(problem.p), problem.least_squares(),
                     np.full(problem.p, np.sum(problem.x_diag * problem.y_tilde) / x2.sum())):
        ref = gl_objective(problem, beta_ref)
        assert report.objective <= ref + 1e-6 * (1 + abs(ref))


def test_row_permutation_and_relabeling_invariance():
    problem = random_problem(4)
    base = solve(problem).beta
    rng = np.random.default_rng(4)

    D = problem.operator.matrix.tocsr()
    rows = rng.permutation(problem.m)
    permuted = DiffOperator(D[rows], np.ones(problem.m))
    report = solve(GenLassoProblem(problem.y_tilde, problem.x_diag, permuted, problem.lam))
    np.testing.assert_allclose(report.beta, base, atol=1e-7)

    cols = rng.permutation(problem.p)
    relabeled = DiffOperator(D[:, cols], np.ones(problem.m))
    report = solve(GenLassoProblem(problem.y_tilde[cols], problem.x_diag[cols], relabeled, problem.lam))
    np.testing.assert_allclose(report.beta, base[cols], atol=1e-7)


def test_warm_start_never_worse():
    problem = random_problem(5)
    first = solve(problem, SolverConfig(max_iter=20))
    nearby = GenLassoProblem(problem.y_tilde + 0.01, problem.x_diag, problem.operator, problem.lam)
    report = solve(nearby, warm=first)
    assert report.objective <= gl_objective(nearby, first.beta) + 1e-8


def test_max_iter_flags_nonconvergence():
    report = solve(random_problem(6), SolverConfig(max_iter=1, polish=False))
    assert not report.converged
    assert report.iterations == 1


def test_conjugate_gradient_fallback():
    problem = random_problem(7)
    exact = solve(problem)
    report = solve(problem, SolverConfig(factor_memory_cap_mb=1e-9))
    assert report.linear_solver == "cg"
    assert exact.linear_solver == "splu"
    assert report.objective == pytest.approx(exact.objective, rel=1e-6, abs=1e-8)
