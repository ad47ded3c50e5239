"""
FDR-HS engine.

Fits voxel-wise non-null priors c_i = sigmoid(beta_i) under the two-groups
model with heterogeneous fused-lasso smoothing on three subgraphs (within
bias, within lesion, bias-lesion bridges). The EM loop alternates the
posterior E-step with a second-order M-step solved as a generalized lasso.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.special import expit, logit

from errors import DimensionError, UsageError
from genlasso import GenLassoProblem, SolveReport, solve
from models import HsParams, SolverConfig
from stats import TwoGroupsModel
from voxelgrid import DiffOperator, SubgraphSplit, stacked_operator, unit_operator

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FitState:
    beta: np.ndarray
    c: np.ndarray
    s_tilde: np.ndarray
    lfdr: np.ndarray
    objective_trace: Tuple[float, ...]


@dataclass(frozen=True)
class FitResult:
    """Final state, selected voxels split by group, and convergence flags."""
    state: FitState
    selected: np.ndarray
    group_bias: np.ndarray
    group_lesion: np.ndarray
    converged: bool
    iterations: int

    @property
    def group_labels(self) -> np.ndarray:
        """Per-voxel 'bias', 'lesion' or 'none'."""
        labels = np.full(len(self.state.beta), "none", dtype=object)
        labels[self.group_bias] = "bias"
        labels[self.group_lesion] = "lesion"
        return labels


def _check_length(name: str, values: np.ndarray, p: int) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if values.shape != (p,):
        raise DimensionError(f"{name} has shape {values.shape}, expected ({p},)")
    return values


def _mixture(c: np.ndarray, z: np.ndarray, model: TwoGroupsModel) -> np.ndarray:
    return c * model.f1(z) + (1.0 - c) * model.f0(z)


def marginal_nll(beta: np.ndarray, z: np.ndarray, model: TwoGroupsModel) -> float:
    """-sum_i log(c_i f1(z_i) + (1 - c_i) f0(z_i))."""
    beta = np.asarray(beta, dtype=float)
    z = _check_length("z", z, len(beta))
    return float(-np.log(_mixture(expit(beta), z, model)).sum())


def smoothing_penalty(beta: np.ndarray, split: SubgraphSplit, params: HsParams) -> float:
    total = 0.0
    for lam, edges in ((params.lambda_pro, split.e1), (params.lambda_les, split.e2),
                       (params.lambda_proles, split.e3)):
        if lam > 0.0 and len(edges):
            total += lam * np.abs(beta[edges[:, 0]] - beta[edges[:, 1]]).sum()
    return float(total)


def penalized_objective(beta: np.ndarray, z: np.ndarray, model: TwoGroupsModel,
                        split: SubgraphSplit, params: HsParams) -> float:
    beta = _check_length("beta", beta, split.p)
    return marginal_nll(beta, z, model) + smoothing_penalty(beta, split, params)


def surrogate_nll(beta: np.ndarray, s: np.ndarray) -> float:
    """Complete-data negative log-likelihood sum_i log(1 + e^beta_i) - s_i beta_i."""
    beta = np.asarray(beta, dtype=float)
    s = _check_length("s", s, len(beta))
    return float(np.sum(np.logaddexp(0.0, beta) - s * beta))


def surrogate_gradient(beta: np.ndarray, s: np.ndarray) -> np.ndarray:
    return expit(np.asarray(beta, dtype=float)) - np.asarray(s, dtype=float)


def posterior_nonnull_from_prior(c, f0z, f1z) -> np.ndarray:
    weighted = c * f1z
    return weighted / (weighted + (1.0 - c) * f0z)


def posterior_null_from_prior(c, f0z, f1z) -> np.ndarray:
    """Local fdr (1 - c) f0 / f for given priors and density values."""
    return 1.0 - posterior_nonnull_from_prior(c, f0z, f1z)


def e_step(beta: np.ndarray, z: np.ndarray, model: TwoGroupsModel) -> np.ndarray:
    beta = np.asarray(beta, dtype=float)
    z = _check_length("z", z, len(beta))
    return posterior_nonnull_from_prior(expit(beta), model.f0(z), model.f1(z))


def posterior_null(beta: np.ndarray, z: np.ndarray, model: TwoGroupsModel) -> np.ndarray:
    return 1.0 - e_step(beta, z, model)


def mstep_operator(split: SubgraphSplit, params: HsParams) -> DiffOperator:
    return stacked_operator(split, params) if params.penalized else unit_operator(split)


def assemble_mstep(beta_k: np.ndarray, s_tilde: np.ndarray, split: SubgraphSplit,
                   params: HsParams, operator: Optional[DiffOperator] = None) -> GenLassoProblem:
    """
    Second-order expansion of the surrogate at beta_k as a generalized lasso.

    Args:
        beta_k: Current coefficients
        s_tilde: E-step responsibilities
        split: Subgraph split of the lattice
        params: Penalties
        operator: Prebuilt stacked operator to reuse across iterations

    Returns:
        GenLassoProblem with x = sqrt(w), y = sqrt(w) (beta_k - grad / w)
    """
    beta_k = _check_length("beta_k", beta_k, split.p)
    s_tilde = _check_length("s_tilde", s_tilde, split.p)
    c = expit(beta_k)
    w = np.maximum(c * (1.0 - c), params.w_floor)
    root_w = np.sqrt(w)
    y_tilde = root_w * (beta_k - (c - s_tilde) / w)
    lam = params.lambda_pro if params.penalized else 0.0
    return GenLassoProblem(y_tilde, root_w, operator or mstep_operator(split, params), lam)


def select_features(lfdr: np.ndarray, z: np.ndarray, gamma: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Select voxels with lfdr < gamma and split them by z-sign.

    Returns:
        (selected, group_bias, group_lesion) as sorted index arrays
    """
    if not 0.0 < gamma < 1.0:
        raise UsageError(f"gamma must lie in (0, 1), got {gamma}")
    lfdr = np.asarray(lfdr, dtype=float)
    z = _check_length("z", z, len(lfdr))
    chosen = lfdr < gamma
    return np.flatnonzero(chosen), np.flatnonzero(chosen & (z <= 0)), np.flatnonzero(chosen & (z > 0))


def _finish(beta: np.ndarray, c: np.ndarray, z: np.ndarray, model: TwoGroupsModel, params: HsParams,
            trace, converged: bool, iterations: int) -> FitResult:
    s_tilde = posterior_nonnull_from_prior(c, model.f0(z), model.f1(z))
    lfdr = 1.0 - s_tilde
    state = FitState(beta=beta, c=c, s_tilde=s_tilde, lfdr=lfdr, objective_trace=tuple(trace))
    selected, bias, lesion = select_features(lfdr, z, params.gamma)
    return FitResult(state, selected, bias, lesion, converged, iterations)


def fit_em(z: np.ndarray, model: TwoGroupsModel, split: SubgraphSplit, params: HsParams,
           beta_init: Optional[np.ndarray] = None, solver_config: Optional[SolverConfig] = None,
           constant_prior: bool = False) -> FitResult:
    """
    Fit FDR-HS by damped EM.

    Each M-step candidate is clamped to [-beta_clamp, beta_clamp]; if it
    raises the penalized objective the step is halved up to max_halvings
    times. Runs until the relative objective change drops to em_tol or
    em_max_iter iterations.

    Args:
        z: z-scores the split was built from
        model: Two-groups model
        split: Subgraph split of the lattice
        params: Penalties, threshold and EM numerics
        beta_init: Starting coefficients, default logit(cbar) everywhere
        solver_config: ADMM settings
        constant_prior: Fix c = cbar for every voxel and skip EM

    Returns:
        FitResult
    """
    z = _check_length("z", z, split.p)
    params.warn_ordering()
    clamp = params.beta_clamp

    if constant_prior:
        c = np.full(split.p, model.cbar)
        beta = np.full(split.p, float(logit(model.cbar)))
        trace = [penalized_objective(beta, z, model, split, params)]
        return _finish(beta, c, z, model, params, trace, True, 0)

    if beta_init is None:
        beta = np.full(split.p, float(np.clip(logit(model.cbar), -clamp, clamp)))
    else:
        beta = np.clip(_check_length("beta_init", beta_init, split.p), -clamp, clamp)

    operator = mstep_operator(split, params)
    objective = penalized_objective(beta, z, model, split, params)
    trace = [objective]
    warm: Optional[SolveReport] = None
    converged = False
    unconverged_solves = 0
    iteration = 0

    for iteration in range(1, params.em_max_iter + 1):
        s_tilde = e_step(beta, z, model)
        report = solve(assemble_mstep(beta, s_tilde, split, params, operator), solver_config, warm)
        warm = report
        if not report.converged:
            unconverged_solves += 1
        step = np.clip(report.beta, -clamp, clamp) - beta

        eta, accepted = 1.0, False
        for _ in range(params.max_halvings + 1):
            trial = beta + eta * step
            trial_objective = penalized_objective(trial, z, model, split, params)
            if trial_objective <= objective + params.descent_slack:
                accepted = True
                break
            eta *= 0.5

        if not accepted:
            converged = report.converged
            logger.info(f"EM step damping exhausted at iteration {iteration}; keeping the best iterate")
            break

        change = abs(objective - trial_objective) / max(abs(objective), np.finfo(float).tiny)
        beta, objective = trial, trial_objective
        trace.append(objective)
        logger.debug(f"EM iteration {iteration}: objective={objective:.10g} eta={eta:g} "
                     f"admm_iter={report.iterations}")
        if change <= params.em_tol:
            converged = True
            break

    if unconverged_solves:
        logger.warning(f"{unconverged_solves} M-step solves stopped at max_iter without converging")
    if not converged:
        logger.warning(f"EM did not converge in {iteration} iterations")
    logger.info(f"EM finished: {iteration} iterations, objective {objective:.6g}, converged={converged}")
    return _finish(beta, expit(beta), z, model, params, trace, converged, iteration)
