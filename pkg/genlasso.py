"""
Weighted generalized lasso solver.

Minimizes 1/2 ||y - diag(x) beta||^2 + lam ||D beta||_1 for a diagonal design
and a sparse graph difference operator D, using ADMM on the split
alpha = D beta with a scaled dual variable.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import cg, splu

from errors import DataError, DimensionError, UsageError
from models import SolverConfig
from voxelgrid import DiffOperator

logger = logging.getLogger(__name__)

# Bytes per stored factor entry: float64 value plus int32 index.
_FACTOR_ENTRY_BYTES = 12


@dataclass(frozen=True)
class GenLassoProblem:
    """A diagonal-design generalized lasso instance."""
    y_tilde: np.ndarray
    x_diag: np.ndarray
    operator: DiffOperator
    lam: float

    def __post_init__(self):
        y = np.asarray(self.y_tilde, dtype=float)
        x = np.asarray(self.x_diag, dtype=float)
        if y.ndim != 1 or x.shape != y.shape:
            raise DimensionError(f"y_tilde {y.shape} and x_diag {x.shape} must be equal-length vectors")
        if self.operator.p != len(y):
            raise DimensionError(f"operator has {self.operator.p} columns for {len(y)} coefficients")
        if self.lam < 0:
            raise UsageError(f"lambda must be nonnegative, got {self.lam}")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x))):
            raise DataError("generalized lasso inputs contain non-finite entries")
        if np.any(x <= 0):
            raise DataError("x_diag must be strictly positive")
        object.__setattr__(self, "y_tilde", y)
        object.__setattr__(self, "x_diag", x)
        object.__setattr__(self, "lam", float(self.lam))

    @property
    def p(self) -> int:
        return len(self.y_tilde)

    @property
    def m(self) -> int:
        return self.operator.n_rows

    def least_squares(self) -> np.ndarray:
        """Unpenalized solution y_i / x_i."""
        return self.y_tilde / self.x_diag


@dataclass(frozen=True)
class SolveReport:
    beta: np.ndarray
    alpha: np.ndarray
    u: np.ndarray
    rho: float
    iterations: int
    primal_residual: float
    dual_residual: float
    objective: float
    converged: bool
    linear_solver: str = "exact"
    polished: bool = False


def gl_objective(problem: GenLassoProblem, beta: np.ndarray) -> float:
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (problem.p,):
        raise DimensionError(f"beta has shape {beta.shape}, problem has {problem.p} coefficients")
    if not np.all(np.isfinite(beta)):
        raise DataError("beta contains non-finite entries")
    resid = problem.y_tilde - problem.x_diag * beta
    penalty = np.abs(problem.operator.apply(beta)).sum() if problem.m else 0.0
    return float(0.5 * resid @ resid + problem.lam * penalty)


def soft_threshold(v: np.ndarray, kappa: float) -> np.ndarray:
    """Shrink toward zero; |v| == kappa maps to exactly 0."""
    return np.sign(v) * np.maximum(np.abs(v) - kappa, 0.0)


class GenLassoSolver:
    """
    ADMM for one generalized lasso problem.

    The beta-update matrix diag(x^2) + rho D^T D is fixed for the whole solve,
    so it is factorized once and reused for every iteration.
    """

    def __init__(self, problem: GenLassoProblem, config: Optional[SolverConfig] = None):
        self.problem = problem
        self.config = config or SolverConfig()
        self.rho = float(self.config.rho) if self.config.rho is not None else max(problem.lam, 1.0)
        self.D = problem.operator.matrix.tocsr()
        self.Dt = self.D.T.tocsr()
        self.xy = problem.x_diag * problem.y_tilde
        self._lu = None
        self._system = None
        self._jacobi = None
        self.linear_solver = "exact"

    def _factorize(self):
        system = (sparse.diags(self.problem.x_diag ** 2) + self.rho * (self.Dt @ self.D)).tocsc()
        self._system = system
        try:
            lu = splu(system, permc_spec="MMD_AT_PLUS_A")
            size_mb = (lu.L.nnz + lu.U.nnz) * _FACTOR_ENTRY_BYTES / 2 ** 20
            if size_mb <= self.config.factor_memory_cap_mb:
                self._lu = lu
                self.linear_solver = "splu"
                return
            logger.warning(
                f"Sparse factor needs {size_mb:.1f} MB (cap {self.config.factor_memory_cap_mb} MB); "
                f"using conjugate gradient"
            )
        except MemoryError:
            logger.warning("Sparse factorization ran out of memory; using conjugate gradient")
        self._jacobi = sparse.diags(1.0 / system.diagonal())
        self.linear_solver = "cg"

    def _solve_linear(self, rhs: np.ndarray, x0: np.ndarray) -> np.ndarray:
        if self._lu is not None:
            return self._lu.solve(rhs)
        solution, info = cg(self._system, rhs, x0=x0, rtol=self.config.cg_rtol,
                            maxiter=10 * self.problem.p, M=self._jacobi)
        if info > 0:
            logger.debug(f"Conjugate gradient stopped after {info} iterations without reaching rtol")
        return solution

    def _exact(self) -> SolveReport:
        beta = self.problem.least_squares()
        alpha = self.problem.operator.apply(beta) if self.problem.m else np.zeros(0)
        return SolveReport(
            beta=beta, alpha=alpha, u=np.zeros_like(alpha), rho=self.rho, iterations=0,
            primal_residual=0.0, dual_residual=0.0,
            objective=gl_objective(self.problem, beta), converged=True,
        )

    def _initial_point(self, warm: Optional[SolveReport]):
        p, m = self.problem.p, self.problem.m
        if warm is not None and self.config.warm_start and warm.beta.shape == (p,):
            beta = warm.beta.copy()
            if warm.alpha.shape == (m,) and warm.u.shape == (m,):
                # scaled dual rescales with rho
                return beta, warm.alpha.copy(), warm.u * (warm.rho / self.rho)
            return beta, self.D @ beta, np.zeros(m)
        return np.zeros(p), np.zeros(m), np.zeros(m)

    def polish(self, alpha: np.ndarray) -> np.ndarray:
        """
        Fuse voxels joined by edges whose split variable is exactly zero and
        solve the fused problem in closed form with the signs of the
        remaining split variables held fixed.
        """
        problem = self.problem
        fused = problem.operator.incidence[alpha == 0.0].tocoo()
        pos, neg = fused.data > 0, fused.data < 0
        first = fused.col[pos][np.argsort(fused.row[pos], kind="stable")]
        second = fused.col[neg][np.argsort(fused.row[neg], kind="stable")]
        adjacency = sparse.coo_matrix((np.ones(len(first)), (first, second)), shape=(problem.p, problem.p))
        n_comp, labels = connected_components(adjacency, directed=False)

        pull = self.Dt @ np.sign(alpha)
        num = np.bincount(labels, weights=self.xy, minlength=n_comp) \
            - problem.lam * np.bincount(labels, weights=pull, minlength=n_comp)
        den = np.bincount(labels, weights=problem.x_diag ** 2, minlength=n_comp)
        return (num / den)[labels]

    def run(self, warm: Optional[SolveReport] = None) -> SolveReport:
        problem, config = self.problem, self.config
        if problem.lam == 0.0 or problem.m == 0:
            return self._exact()

        self._factorize()
        beta, alpha, u = self._initial_point(warm)
        kappa = problem.lam / self.rho
        sqrt_m, sqrt_p = np.sqrt(problem.m), np.sqrt(problem.p)
        r_norm = s_norm = np.inf
        converged = False
        iteration = 0

        for iteration in range(1, config.max_iter + 1):
            beta = self._solve_linear(self.xy + self.rho * (self.Dt @ (alpha - u)), beta)
            d_beta = self.D @ beta
            alpha_old = alpha
            alpha = soft_threshold(d_beta + u, kappa)
            u = u + d_beta - alpha

            r_norm = np.linalg.norm(d_beta - alpha)
            s_norm = self.rho * np.linalg.norm(self.Dt @ (alpha - alpha_old))
            eps_pri = sqrt_m * config.eps_abs + config.eps_rel * max(np.linalg.norm(d_beta), np.linalg.norm(alpha))
            eps_dual = sqrt_p * config.eps_abs + config.eps_rel * self.rho * np.linalg.norm(self.Dt @ u)
            if r_norm <= eps_pri and s_norm <= eps_dual:
                converged = True
                break

        if converged:
            logger.debug(f"ADMM converged in {iteration} iterations (r={r_norm:.3e}, s={s_norm:.3e})")
        else:
            logger.debug(f"ADMM hit max_iter={config.max_iter} (r={r_norm:.3e}, s={s_norm:.3e})")

        best, objective, polished = beta, gl_objective(problem, beta), False
        if config.polish:
            candidate = self.polish(alpha)
            candidate_objective = gl_objective(problem, candidate)
            if candidate_objective <= objective:
                best, objective, polished = candidate, candidate_objective, True
        if warm is not None and warm.beta.shape == (problem.p,):
            warm_objective = gl_objective(problem, warm.beta)
            if warm_objective < objective:
                best, objective, polished = warm.beta.copy(), warm_objective, False

        return SolveReport(
            beta=best, alpha=alpha, u=u, rho=self.rho, iterations=iteration,
            primal_residual=float(r_norm), dual_residual=float(s_norm),
            objective=objective, converged=converged,
            linear_solver=self.linear_solver, polished=polished,
        )


def solve(problem: GenLassoProblem, config: Optional[SolverConfig] = None,
          warm: Optional[SolveReport] = None) -> SolveReport:
    """
    Solve a generalized lasso problem.

    Args:
        problem: Problem instance
        config: ADMM settings; defaults to SolverConfig()
        warm: Previous report to start from

    Returns:
        SolveReport; ``converged`` is False when max_iter was reached
    """
    return GenLassoSolver(problem, config).run(warm)
