"""
Test statistics and two-groups density estimation.
Two-sample t and z statistics, Gaussian kernel density of the z-scores,
central matching for the empirical null and the non-null density f1.
"""

import logging
from dataclasses import dataclass
from functools import partial
from typing import Callable, Optional, Tuple, Union

import numpy as np
from scipy import stats as sps
from scipy.integrate import trapezoid

from errors import DataError, DimensionError, EmpiricalNullError, UsageError
from models import NullModelConfig

logger = logging.getLogger(__name__)

DENSITY_FLOOR = np.finfo(float).tiny
_KDE_CHUNK = 4096


@dataclass(frozen=True)
class Dataset:
    """N x p intensities with labels +1 (control) and -1 (disease)."""
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y)
        if x.ndim != 2:
            raise DimensionError(f"intensity matrix must be 2D, got shape {x.shape}")
        if y.shape != (x.shape[0],):
            raise DimensionError(f"{len(y)} labels for {x.shape[0]} subjects")
        if not np.all(np.isin(y, (1, -1))):
            raise DataError("labels must be +1 or -1")
        if x.shape[0] < 4:
            raise DataError(f"need at least 4 subjects, got {x.shape[0]}")
        if not np.all(np.isfinite(x)):
            raise DataError("intensity matrix contains non-finite entries")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y.astype(np.int64))

    @property
    def n_subjects(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    def subset(self, rows: np.ndarray) -> "Dataset":
        return Dataset(self.x[rows], self.y[rows])


@dataclass(frozen=True)
class ZScores:
    t: np.ndarray
    z: np.ndarray
    df: int


@dataclass(frozen=True)
class TabulatedDensity:
    """Density values on a strictly increasing evaluation grid."""
    grid: np.ndarray
    values: np.ndarray

    def integral(self) -> float:
        return float(trapezoid(self.values, self.grid))


def _normal_density(delta0: float, sigma0: float, floor: float, z) -> np.ndarray:
    return np.maximum(sps.norm.pdf(np.asarray(z, dtype=float), loc=delta0, scale=sigma0), floor)


def _interpolated_density(grid: np.ndarray, values: np.ndarray, floor: float, z) -> np.ndarray:
    return np.maximum(np.interp(np.asarray(z, dtype=float), grid, values, left=floor, right=floor), floor)


@dataclass(frozen=True)
class TwoGroupsModel:
    """
    Marginal f = cbar * f1 + (1 - cbar) * f0 with empirical null
    f0 = N(delta0, sigma0^2).

    ``f0_eval`` and ``f1_eval`` map z-values to floored densities.
    """
    delta0: float
    sigma0: float
    cbar: float
    f0_eval: Callable[[np.ndarray], np.ndarray]
    f1_eval: Callable[[np.ndarray], np.ndarray]
    density: Optional[TabulatedDensity] = None
    f1_grid: Optional[np.ndarray] = None

    @property
    def f_grid(self) -> Optional[np.ndarray]:
        return None if self.density is None else self.density.values

    def f0(self, z) -> np.ndarray:
        return self.f0_eval(z)

    def f1(self, z) -> np.ndarray:
        return self.f1_eval(z)

    def f(self, z) -> np.ndarray:
        return self.cbar * self.f1(z) + (1.0 - self.cbar) * self.f0(z)


def two_sample_t(data: Dataset, var_floor: float = 1e-12) -> Tuple[np.ndarray, int]:
    """
    Pooled-variance two-sample t statistic per voxel.

    The numerator is mean(+1 class) - mean(-1 class), so voxels with lower
    intensity in the disease class get t > 0.

    Returns:
        (t, df) with df = N - 2
    """
    plus = data.x[data.y == 1]
    minus = data.x[data.y == -1]
    n_plus, n_minus = len(plus), len(minus)
    if n_plus < 2 or n_minus < 2:
        raise DataError(f"each class needs at least 2 subjects, got {n_plus} and {n_minus}")

    df = n_plus + n_minus - 2
    pooled = ((n_plus - 1) * plus.var(axis=0, ddof=1) + (n_minus - 1) * minus.var(axis=0, ddof=1)) / df
    pooled = np.maximum(pooled, var_floor)
    t = (plus.mean(axis=0) - minus.mean(axis=0)) / np.sqrt(pooled * (1.0 / n_plus + 1.0 / n_minus))
    return t, df


def z_transform(t: np.ndarray, df: int, eps: float = 1e-12) -> np.ndarray:
    """
    z = Phi^-1(F_df(t)), evaluated through the upper tail so that
    z(-t) = -z(t) exactly and large |t| keep their precision.
    """
    if df < 1:
        raise UsageError(f"degrees of freedom must be >= 1, got {df}")
    t = np.asarray(t, dtype=float)
    tail = np.clip(sps.t.sf(np.abs(t), df), eps, 1.0 - eps)
    return np.sign(t) * sps.norm.isf(tail)


def compute_zscores(data: Dataset, config: Optional[NullModelConfig] = None) -> ZScores:
    config = config or NullModelConfig()
    t, df = two_sample_t(data, config.var_floor)
    return ZScores(t=t, z=z_transform(t, df, config.cdf_eps), df=df)


# Bandwidth rules ---------------------------------------------------------------

def silverman_bandwidth(z: np.ndarray) -> float:
    """Normal-reference rule 1.06 * sd * n^(-1/5)."""
    z = np.asarray(z, dtype=float)
    return 1.06 * float(np.std(z, ddof=1)) * len(z) ** (-0.2)


def robust_bandwidth(z: np.ndarray) -> float:
    """0.9 * min(sd, IQR/1.34) * n^(-1/5)."""
    z = np.asarray(z, dtype=float)
    q75, q25 = np.percentile(z, [75, 25])
    spread = min(float(np.std(z, ddof=1)), (q75 - q25) / 1.34)
    return 0.9 * spread * len(z) ** (-0.2)


BW_METHODS = {
    "silverman": silverman_bandwidth,
    "robust": robust_bandwidth,
}


def get_bandwidth(z: np.ndarray, bw: Union[float, str]) -> float:
    """Resolve a numeric bandwidth or a rule name to a positive bandwidth."""
    if isinstance(bw, bool):
        raise UsageError(f"bandwidth must be a positive number or one of {list(BW_METHODS)}")
    if isinstance(bw, (int, float)):
        if bw <= 0:
            raise UsageError(f"numeric bandwidth must be positive, got {bw}")
        return float(bw)
    method = BW_METHODS.get(str(bw).lower())
    if method is None:
        raise UsageError(f"unknown bandwidth rule {bw!r}; expected one of {list(BW_METHODS)}")
    if len(z) < 2:
        raise DataError("bandwidth rules need at least 2 z-scores")
    h = method(z)
    if not h > 0:
        raise DataError("z-scores have zero spread; bandwidth undefined")
    return h


def kernel_density(z: np.ndarray, grid: np.ndarray, bandwidth: float) -> TabulatedDensity:
    """Gaussian kernel density estimate of ``z`` tabulated on ``grid``."""
    z = np.asarray(z, dtype=float).ravel()
    grid = np.asarray(grid, dtype=float).ravel()
    if len(z) == 0:
        raise DataError("kernel density needs at least one point")
    if bandwidth <= 0:
        raise UsageError(f"bandwidth must be positive, got {bandwidth}")
    if len(grid) < 2 or np.any(np.diff(grid) <= 0):
        raise DataError("evaluation grid must be strictly increasing")

    values = np.zeros_like(grid)
    for start in range(0, len(z), _KDE_CHUNK):
        block = z[start:start + _KDE_CHUNK]
        values += sps.norm.pdf((grid[:, None] - block[None, :]) / bandwidth).sum(axis=1)
    return TabulatedDensity(grid, values / (len(z) * bandwidth))


def default_grid(z: np.ndarray, config: NullModelConfig) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    return np.linspace(z.min() - config.grid_margin, z.max() + config.grid_margin, config.grid_points)


# Central matching --------------------------------------------------------------

def _central_window(density: TabulatedDensity, half_width: float) -> Tuple[np.ndarray, np.ndarray]:
    window = (np.abs(density.grid) <= half_width) & (density.values > 0)
    if np.count_nonzero(window) < 3:
        raise EmpiricalNullError(
            f"empirical null fit failed: fewer than 3 positive grid points within |z| <= {half_width}"
        )
    return density.grid[window], density.values[window]


def central_matching(density: TabulatedDensity, half_width: float = 1.0) -> Tuple[float, float, float]:
    """
    Fit log f(z) ~ a + b z + c z^2 on |z| <= half_width by least squares
    weighted by f, and read off the empirical null.

    Returns:
        (delta0, sigma0, cbar) with cbar clamped into [0.001, 0.999]
    """
    z, f = _central_window(density, half_width)
    design = np.column_stack([np.ones_like(z), z, z * z])
    root_w = np.sqrt(f / f.sum())
    (a, b, c), *_ = np.linalg.lstsq(design * root_w[:, None], np.log(f) * root_w, rcond=None)
    if not c < 0:
        raise EmpiricalNullError(f"empirical null fit failed: quadratic coefficient {c:.4g} is not negative")

    delta0 = -b / (2.0 * c)
    sigma0 = np.sqrt(-1.0 / (2.0 * c))
    null_share = np.exp(a - b * b / (4.0 * c)) * sigma0 * np.sqrt(2.0 * np.pi)
    cbar = float(np.clip(1.0 - null_share, 0.001, 0.999))
    logger.debug(f"Central matching: delta0={delta0:.4f} sigma0={sigma0:.4f} cbar={cbar:.4f}")
    return float(delta0), float(sigma0), cbar


def theoretical_matching(density: TabulatedDensity, half_width: float = 1.0) -> Tuple[float, float, float]:
    """Null fixed at N(0, 1); the null share is matched on the central window."""
    z, f = _central_window(density, half_width)
    weights = f / f.sum()
    null_share = np.exp(np.sum(weights * (np.log(f) - sps.norm.logpdf(z))))
    return 0.0, 1.0, float(np.clip(1.0 - null_share, 0.001, 0.999))


def two_groups_from_density(
    density: TabulatedDensity, delta0: float, sigma0: float, cbar: float, floor: float = 1e-8
) -> TwoGroupsModel:
    """
    Invert f = cbar f1 + (1 - cbar) f0 for f1 on the density grid, floor it at
    ``floor`` and renormalize it to integrate to one.
    """
    if not sigma0 > 0:
        raise UsageError(f"sigma0 must be positive, got {sigma0}")
    if not 0.0 < cbar < 1.0:
        raise UsageError(f"cbar must lie in (0, 1), got {cbar}")
    f0_grid = sps.norm.pdf(density.grid, loc=delta0, scale=sigma0)
    f1_grid = np.maximum((density.values - (1.0 - cbar) * f0_grid) / cbar, floor)
    f1_grid = f1_grid / trapezoid(f1_grid, density.grid)
    return TwoGroupsModel(
        delta0=float(delta0),
        sigma0=float(sigma0),
        cbar=float(cbar),
        f0_eval=partial(_normal_density, float(delta0), float(sigma0), DENSITY_FLOOR),
        f1_eval=partial(_interpolated_density, density.grid, f1_grid, floor),
        density=density,
        f1_grid=f1_grid,
    )


def make_two_groups_model(z: np.ndarray, config: Optional[NullModelConfig] = None) -> TwoGroupsModel:
    """
    Estimate f by kernel density, f0 and cbar by central matching and f1 by
    inverting the mixture.
    """
    config = config or NullModelConfig()
    z = np.asarray(z, dtype=float)
    if len(z) < 100:
        logger.warning(f"Only {len(z)} z-scores; density estimates will be rough")
    bandwidth = get_bandwidth(z, config.bandwidth)
    density = kernel_density(z, default_grid(z, config), bandwidth)
    if config.null_model == "theoretical":
        delta0, sigma0, cbar = theoretical_matching(density, config.cm_half_width)
    else:
        delta0, sigma0, cbar = central_matching(density, config.cm_half_width)
    logger.info(
        f"Two-groups model: delta0={delta0:.4f} sigma0={sigma0:.4f} cbar={cbar:.4f} "
        f"(bandwidth {bandwidth:.4f}, {config.null_model} null)"
    )
    return two_groups_from_density(density, delta0, sigma0, cbar, config.f1_floor)
