"""
Univariate reference selectors: t-test threshold, Benjamini-Hochberg step-up
and LocalFDR with a constant prior.
"""

import logging
from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy import stats as sps

from errors import DataError, UsageError
from fdrhs import posterior_null_from_prior
from stats import TwoGroupsModel

logger = logging.getLogger(__name__)

BaselineMethod = Literal["ttest", "bh", "localfdr"]


@dataclass(frozen=True)
class BaselineResult:
    """Selected voxel indices and the per-voxel scores they were chosen by."""
    method: BaselineMethod
    selected: np.ndarray
    scores: np.ndarray
    threshold: float


def _check_level(name: str, value: float):
    if not 0.0 < value < 1.0:
        raise UsageError(f"{name} must lie in (0, 1), got {value}")


def two_sided_pvalues(t: np.ndarray, df: int) -> np.ndarray:
    return 2.0 * sps.t.sf(np.abs(np.asarray(t, dtype=float)), df)


def ttest_select(t: np.ndarray, df: int, p_threshold: float) -> BaselineResult:
    """Select voxels whose two-sided p-value is below ``p_threshold``."""
    _check_level("p_threshold", p_threshold)
    p_values = two_sided_pvalues(t, df)
    return BaselineResult("ttest", np.flatnonzero(p_values < p_threshold), p_values, p_threshold)


def bh_select(p_values: np.ndarray, q: float) -> BaselineResult:
    """
    Benjamini-Hochberg step-up at level q.

    Finds the largest k with p_(k) <= k q / m and rejects every p-value not
    larger than p_(k), ties included.
    """
    _check_level("q", q)
    p_values = np.asarray(p_values, dtype=float)
    if np.any(~np.isfinite(p_values)) or np.any((p_values < 0) | (p_values > 1)):
        raise DataError("p-values must lie in [0, 1]")
    m = len(p_values)
    if m == 0:
        return BaselineResult("bh", np.empty(0, dtype=np.int64), p_values, q)

    sorted_p = np.sort(p_values)
    passing = np.flatnonzero(sorted_p <= np.arange(1, m + 1) * q / m)
    if len(passing) == 0:
        selected = np.empty(0, dtype=np.int64)
    else:
        selected = np.flatnonzero(p_values <= sorted_p[passing[-1]])
    logger.debug(f"BH at q={q}: {len(selected)} of {m} rejected")
    return BaselineResult("bh", selected, p_values, q)


def localfdr_select(z: np.ndarray, model: TwoGroupsModel, gamma: float) -> BaselineResult:
    """Local fdr with the constant prior cbar; selects lfdr < gamma."""
    _check_level("gamma", gamma)
    z = np.asarray(z, dtype=float)
    lfdr = posterior_null_from_prior(np.full(len(z), model.cbar), model.f0(z), model.f1(z))
    return BaselineResult("localfdr", np.flatnonzero(lfdr < gamma), lfdr, gamma)


def group_by_sign(selected: np.ndarray, z: np.ndarray):
    """Split selected indices into (bias, lesion) by z <= 0 and z > 0."""
    z = np.asarray(z, dtype=float)
    selected = np.asarray(selected, dtype=np.int64)
    return selected[z[selected] <= 0], selected[z[selected] > 0]
