"""
Pipeline orchestration: statistics, two-groups model, lattice split, FDR-HS
or baseline selection, subject folds, evaluation rows and the grid search.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from itertools import product
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.special import logit

from baselines import BaselineResult, bh_select, group_by_sign, localfdr_select, ttest_select, two_sided_pvalues
from errors import DataError, FdrHsError, UsageError
from fdrhs import FitResult, fit_em, select_features
from metrics import (SelectionFolds, denominator_table, edge_density_3d, fdp_power,
                     fold_stability, max_lattice_edges)
from models import Connectivity, GridSearchSpec, HsParams, ToolkitConfig
from stats import Dataset, TwoGroupsModel, ZScores, compute_zscores, make_two_groups_model
from voxelgrid import SubgraphSplit, VoxelGrid, build_graph, split_subgraphs

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Screening:
    """z-scores, fitted two-groups model and subgraph split of one dataset."""
    zscores: ZScores
    model: TwoGroupsModel
    split: SubgraphSplit


@dataclass(frozen=True)
class Selection:
    """Per-voxel outputs of one selector in fit-file form."""
    zscores: ZScores
    beta: np.ndarray
    c: np.ndarray
    lfdr: np.ndarray
    groups: np.ndarray
    trace: Tuple[float, ...] = ()
    converged: bool = True

    @property
    def selected(self) -> np.ndarray:
        return np.flatnonzero(self.groups != "none")


def screen(dataset: Dataset, grid: VoxelGrid, config: ToolkitConfig,
           connectivity: Optional[Connectivity] = None) -> Screening:
    if dataset.p != grid.p:
        raise DataError(f"data has {dataset.p} voxel columns, mask has {grid.p} voxels")
    zscores = compute_zscores(dataset, config.null_model)
    model = make_two_groups_model(zscores.z, config.null_model)
    graph = build_graph(grid, connectivity or config.connectivity)
    split = split_subgraphs(graph, zscores.z)
    logger.info(f"Screened {dataset.p} voxels: {len(split.v1)} with z <= 0, {len(split.v2)} with z > 0, "
                f"{graph.n_edges} edges")
    return Screening(zscores, model, split)


def _labels_from_groups(p: int, bias: np.ndarray, lesion: np.ndarray) -> np.ndarray:
    groups = np.full(p, "none", dtype=object)
    groups[bias] = "bias"
    groups[lesion] = "lesion"
    return groups


def fit_selection(screening: Screening, params: HsParams, config: ToolkitConfig,
                  constant_prior: bool = False) -> Selection:
    result: FitResult = fit_em(screening.zscores.z, screening.model, screening.split, params,
                               solver_config=config.solver, constant_prior=constant_prior)
    return Selection(
        zscores=screening.zscores,
        beta=result.state.beta, c=result.state.c, lfdr=result.state.lfdr,
        groups=result.group_labels,
        trace=result.state.objective_trace, converged=result.converged,
    )


def baseline_selection(screening: Screening, method: str, level: float) -> Selection:
    """Run a baseline and express it in fit-file form (beta and c are NaN for p-value methods)."""
    z, t, df = screening.zscores.z, screening.zscores.t, screening.zscores.df
    p = len(z)
    if method == "ttest":
        result: BaselineResult = ttest_select(t, df, level)
    elif method == "bh":
        result = bh_select(two_sided_pvalues(t, df), level)
    elif method == "localfdr":
        result = localfdr_select(z, screening.model, level)
    else:
        raise UsageError(f"unknown baseline method {method!r}")

    bias, lesion = group_by_sign(result.selected, z)
    if method == "localfdr":
        cbar = screening.model.cbar
        c = np.full(p, cbar)
        beta = np.full(p, float(logit(cbar)))
        lfdr = result.scores
    else:
        c = beta = np.full(p, np.nan)
        lfdr = result.scores
    logger.info(f"{method} at {level}: {len(result.selected)} voxels selected")
    return Selection(screening.zscores, beta, c, lfdr, _labels_from_groups(p, bias, lesion))


def stratified_folds(labels: np.ndarray, k: int, seed: int = 0) -> List[np.ndarray]:
    """
    Held-out subject indices for k stratified folds; each class is shuffled
    and dealt round-robin.
    """
    labels = np.asarray(labels)
    if k < 2:
        raise UsageError(f"need at least 2 folds, got {k}")
    rng = np.random.default_rng(seed)
    held_out: List[List[int]] = [[] for _ in range(k)]
    for label in (1, -1):
        members = rng.permutation(np.flatnonzero(labels == label))
        if len(members) < k:
            raise DataError(f"class {label:+d} has {len(members)} subjects, fewer than {k} folds")
        for position, subject in enumerate(members):
            held_out[position % k].append(int(subject))
    return [np.sort(np.array(fold, dtype=np.int64)) for fold in held_out]


def training_sets(dataset: Dataset, k: int, seed: int = 0) -> List[Dataset]:
    folds = stratified_folds(dataset.y, k, seed)
    everyone = np.arange(dataset.n_subjects)
    return [dataset.subset(np.setdiff1d(everyone, fold)) for fold in folds]


# Evaluation --------------------------------------------------------------------

def truth_rows(selected: np.ndarray, z: np.ndarray, truth: Dict[str, np.ndarray], p: int) -> List[tuple]:
    """fdp/power overall and per group against planted truth."""
    bias_sel, lesion_sel = group_by_sign(selected, z)
    rows = []
    for group, sel, true in (("all", selected, np.union1d(truth["lesion"], truth["bias"])),
                             ("lesion", lesion_sel, truth["lesion"]),
                             ("bias", bias_sel, truth["bias"])):
        fdp, power = fdp_power(sel, true, p)
        rows += [("fdp", group, fdp), ("power", group, power)]
    return rows


def fold_rows(folds: SelectionFolds, grid: VoxelGrid, denominator: str = "paper",
              oracle_limit: int = 8) -> List[tuple]:
    """mDC (for two or more folds), 3dED and the max-edge denominators used."""
    rows = []
    if folds.k >= 2:
        stability = fold_stability(folds)
        rows += [("mdc", "lesion", stability["lesion"]), ("mdc", "bias", stability["bias"])]
    eds_plus, eds_minus = edge_density_3d(folds, grid, denominator, oracle_limit)
    rows += [("eds", "lesion", eds_plus), ("eds", "bias", eds_minus)]
    sizes = [len(s) for s in folds.plus + folds.minus]
    for n, paper, oracle in denominator_table([s for s in sizes if s <= oracle_limit], oracle_limit):
        rows.append(("max_edges_paper", f"n={n}", paper))
        rows.append(("max_edges_oracle", f"n={n}", oracle))
    for n in sorted({s for s in sizes if s > oracle_limit}):
        rows.append(("max_edges_paper", f"n={n}", max_lattice_edges(n)))
    return rows


def score(objective: str, fdp: float, power: float, mdc_value: float, min_power: float) -> float:
    """min-fdp-at-power: fdp if power >= min_power else 1 + (1 - power); max-mdc: mean mDC."""
    if objective == "max-mdc":
        return mdc_value
    return fdp if power >= min_power else 1.0 + (1.0 - power)


# Grid search -------------------------------------------------------------------

@dataclass(frozen=True)
class GridContext:
    """Everything a grid-search worker needs; shared by every task."""
    full: Optional[Screening]
    folds: Tuple[Screening, ...]
    truth: Optional[Dict[str, np.ndarray]]
    config: ToolkitConfig
    spec: GridSearchSpec


def _evaluate(context: GridContext, make_selection, levels: Sequence[float]) -> List[dict]:
    """Score every level with selections from the full data and each fold."""
    spec = context.spec
    full = make_selection(context.full) if context.full is not None else None
    fold_sel = [make_selection(s) for s in context.folds]
    rows = []
    for level in levels:
        fdp = power = mdc_value = np.nan
        if full is not None and context.truth is not None:
            sel, z = full(level)
            fdp, power = fdp_power(sel, np.union1d(context.truth["lesion"], context.truth["bias"]), len(z))
        if fold_sel:
            picks = [f(level) for f in fold_sel]
            folds = SelectionFolds.from_selections([s for s, _ in picks], [z for _, z in picks])
            stability = fold_stability(folds)
            mdc_value = 0.5 * (stability["lesion"] + stability["bias"])
        rows.append({"level": level, "objective": score(spec.objective, fdp, power, mdc_value, spec.min_power),
                     "fdp": fdp, "power": power, "mdc": mdc_value})
    return rows


def _fdrhs_task(args) -> List[dict]:
    context, triple = args
    lam_pro, lam_les, lam_proles = triple
    try:
        params = HsParams(**{**context.config.fdrhs.model_dump(),
                             "lambda_pro": lam_pro, "lambda_les": lam_les, "lambda_proles": lam_proles})

        def make_selection(screening: Screening):
            result = fit_em(screening.zscores.z, screening.model, screening.split, params,
                            solver_config=context.config.solver)
            lfdr, z = result.state.lfdr, screening.zscores.z
            return lambda gamma: (select_features(lfdr, z, gamma)[0], z)

        rows = _evaluate(context, make_selection, context.spec.gamma)
    except (FdrHsError, ValueError, ArithmeticError) as e:
        logger.warning(f"Grid point {triple} failed: {e}")
        rows = [{"level": g, "objective": np.nan, "fdp": np.nan, "power": np.nan, "mdc": np.nan}
                for g in context.spec.gamma]
    return [{"lambda_pro": lam_pro, "lambda_les": lam_les, "lambda_proles": lam_proles,
             "gamma": row.pop("level"), **row} for row in rows]


def _baseline_task(args) -> List[dict]:
    context, method = args
    levels = context.spec.gamma if method == "localfdr" else context.spec.thresholds
    try:
        def make_selection(screening: Screening):
            z = screening.zscores.z
            return lambda level: (baseline_selection(screening, method, level).selected, z)

        rows = _evaluate(context, make_selection, levels)
    except (FdrHsError, ValueError, ArithmeticError) as e:
        logger.warning(f"Baseline {method} failed: {e}")
        rows = [{"level": lv, "objective": np.nan, "fdp": np.nan, "power": np.nan, "mdc": np.nan}
                for lv in levels]
    return [{"method": method, "threshold": row.pop("level"), **row} for row in rows]


def _rank(frame: pd.DataFrame, keys: List[str], objective: str) -> pd.DataFrame:
    ascending = objective != "max-mdc"
    frame = frame.assign(_missing=frame["objective"].isna())
    frame = frame.sort_values(["_missing", "objective"] + keys,
                              ascending=[True, ascending] + [True] * len(keys), kind="mergesort")
    frame = frame.drop(columns="_missing").reset_index(drop=True)
    frame.insert(0, "rank", np.arange(1, len(frame) + 1))
    return frame


def grid_search(dataset: Dataset, grid: VoxelGrid, config: ToolkitConfig, spec: GridSearchSpec,
                truth: Optional[Dict[str, np.ndarray]] = None, connectivity: Optional[Connectivity] = None,
                jobs: int = 1, seed: int = 0) -> pd.DataFrame:
    """
    Evaluate every candidate combination and rank by the objective.

    Each penalty triple is fitted once per data split and evaluated for all
    gamma values. Failed combinations are kept as NaN rows at the bottom;
    ties break by lexicographic parameter order.
    """
    if spec.objective == "min-fdp-at-power" and truth is None:
        raise UsageError("min-fdp-at-power needs a truth file")

    full = screen(dataset, grid, config, connectivity) if truth is not None else None
    folds: Tuple[Screening, ...] = ()
    if spec.objective == "max-mdc":
        folds = tuple(screen(train, grid, config, connectivity)
                      for train in training_sets(dataset, spec.folds, seed))
    context = GridContext(full, folds, truth, config, spec)

    if spec.method == "fdrhs":
        tasks = [(context, triple) for triple in product(spec.lambda_pro, spec.lambda_les, spec.lambda_proles)]
        worker, keys = _fdrhs_task, ["lambda_pro", "lambda_les", "lambda_proles", "gamma"]
    else:
        tasks = [(context, spec.method)]
        worker, keys = _baseline_task, ["threshold"]

    logger.info(f"Grid search: {len(tasks)} fits with {jobs} worker(s), objective {spec.objective}")
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(worker, tasks))
    else:
        chunks = [worker(task) for task in tasks]

    frame = pd.DataFrame([row for chunk in chunks for row in chunk])
    return _rank(frame, keys, spec.objective)
