"""
Pydantic models for the FDR-HS toolkit configuration.
"""

import logging
from enum import Enum
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, Field, field_validator, model_validator

logger = logging.getLogger(__name__)

Triple = Tuple[int, int, int]

PAPER_LAMBDA_GRID = [round(0.1 * k, 1) for k in range(1, 21)]
PAPER_GAMMA_GRID = [0.1, 0.2, 0.3, 0.4, 0.5]
PAPER_THRESHOLD_GRID = [0.001, 0.01, 0.02, 0.05, 0.1]


class Connectivity(str, Enum):
    """Voxel neighborhood used to build the lattice graph."""
    FACE6 = "face6"
    MOORE26 = "moore26"


class NullModelConfig(BaseModel):
    """Settings for the two-groups density estimation."""
    null_model: Literal["empirical", "theoretical"] = "empirical"
    bandwidth: Union[float, str] = "silverman"
    grid_points: int = Field(512, ge=16)
    grid_margin: float = Field(1.0, ge=0.0)
    cm_half_width: float = Field(1.0, gt=0.0)
    f1_floor: float = Field(1e-8, gt=0.0)
    cdf_eps: float = Field(1e-12, gt=0.0, lt=0.5)
    var_floor: float = Field(1e-12, gt=0.0)

    @field_validator("bandwidth")
    @classmethod
    def _positive_bandwidth(cls, value):
        if isinstance(value, (int, float)) and value <= 0:
            raise ValueError(f"numeric bandwidth must be positive, got {value}")
        return value


class SolverConfig(BaseModel):
    """ADMM settings for the generalized lasso M-step."""
    rho: Optional[float] = Field(None, gt=0.0)  # None -> max(lambda, 1)
    eps_abs: float = Field(1e-8, gt=0.0)
    eps_rel: float = Field(1e-6, gt=0.0)
    max_iter: int = Field(5000, ge=1)
    warm_start: bool = True
    polish: bool = True
    factor_memory_cap_mb: float = Field(512.0, gt=0.0)
    cg_rtol: float = Field(1e-10, gt=0.0)


class HsParams(BaseModel):
    """Penalties, selection threshold and EM numerics of an FDR-HS fit."""
    lambda_pro: float = Field(0.5, ge=0.0)
    lambda_les: float = Field(0.3, ge=0.0)
    lambda_proles: float = Field(1.0, ge=0.0)
    gamma: float = Field(0.2, gt=0.0, lt=1.0)
    em_max_iter: int = Field(200, ge=1)
    em_tol: float = Field(1e-6, ge=0.0)
    beta_clamp: float = Field(15.0, gt=0.0)
    w_floor: float = Field(1e-4, gt=0.0, lt=0.25)
    max_halvings: int = Field(20, ge=0)
    descent_slack: float = Field(1e-10, ge=0.0)

    @model_validator(mode="after")
    def _check_penalties(self):
        if self.lambda_pro == 0.0 and (self.lambda_les > 0.0 or self.lambda_proles > 0.0):
            raise ValueError("lambda_pro must be positive when any penalty is active")
        return self

    @classmethod
    def homogeneous(cls, lam: float, **kwargs) -> "HsParams":
        """Single penalty on every edge, the homogeneous smoothing special case."""
        return cls(lambda_pro=lam, lambda_les=lam, lambda_proles=lam, **kwargs)

    @property
    def penalized(self) -> bool:
        return max(self.lambda_pro, self.lambda_les, self.lambda_proles) > 0.0

    @property
    def ordering_ok(self) -> bool:
        """True when lambda_les <= lambda_pro <= lambda_proles."""
        return self.lambda_les <= self.lambda_pro <= self.lambda_proles

    def warn_ordering(self) -> bool:
        """Log a warning when the recommended penalty ordering is violated."""
        if self.ordering_ok:
            return False
        logger.warning(
            f"Penalty ordering lambda_les <= lambda_pro <= lambda_proles violated: "
            f"les={self.lambda_les}, pro={self.lambda_pro}, proles={self.lambda_proles}"
        )
        return True


class LesionBlob(BaseModel):
    """Discrete ball of atrophied voxels."""
    center: Triple
    radius: float = Field(gt=0.0)
    effect: float = Field(1.2, ge=0.0)


class BiasShell(BaseModel):
    """Outer face-6 layer around the inclusive box [lo, hi]."""
    lo: Triple
    hi: Triple
    effect: float = Field(0.9, ge=0.0)

    @model_validator(mode="after")
    def _ordered(self):
        if any(a > b for a, b in zip(self.lo, self.hi)):
            raise ValueError(f"bias region lo {self.lo} exceeds hi {self.hi}")
        return self


class PhantomSpec(BaseModel):
    """Synthetic voxel dataset with planted lesion blobs and a bias shell."""
    dims: Triple
    n_subjects_per_class: int = Field(40, ge=2)
    lesion_blobs: List[LesionBlob] = []
    bias_shell: Optional[BiasShell] = None
    noise_sd: float = Field(1.0, gt=0.0)
    seed: int = 0

    @field_validator("dims")
    @classmethod
    def _positive_dims(cls, value):
        if any(d <= 0 for d in value):
            raise ValueError(f"dims must be positive, got {value}")
        return value

    @model_validator(mode="after")
    def _inside_grid(self):
        for blob in self.lesion_blobs:
            for c, r, d in zip(blob.center, (blob.radius,) * 3, self.dims):
                if c - r < 0 or c + r > d - 1:
                    raise ValueError(f"lesion blob at {blob.center} radius {blob.radius} leaves grid {self.dims}")
        if self.bias_shell is not None:
            for lo, hi, d in zip(self.bias_shell.lo, self.bias_shell.hi, self.dims):
                if lo < 1 or hi > d - 2:
                    raise ValueError(f"bias shell around {self.bias_shell.lo}-{self.bias_shell.hi} leaves grid {self.dims}")
        return self


class RunManifest(BaseModel):
    """Inputs and settings of one pipeline run."""
    data: Path
    labels: Path
    mask: Path
    truth: Optional[Path] = None
    dims: Triple
    connectivity: Connectivity = Connectivity.FACE6
    data_format: Literal["csv", "raw"] = "csv"
    params: HsParams = Field(default_factory=HsParams)
    out: Optional[Path] = None

    @model_validator(mode="after")
    def _files_exist(self):
        for name in ("data", "labels", "mask", "truth"):
            path = getattr(self, name)
            if path is not None and not Path(path).is_file():
                raise ValueError(f"{name} file not found: {path}")
        return self


class GridSearchSpec(BaseModel):
    """Candidate lists and ranking objective of a grid search."""
    method: Literal["fdrhs", "ttest", "bh", "localfdr"] = "fdrhs"
    lambda_pro: List[float] = PAPER_LAMBDA_GRID
    lambda_les: List[float] = PAPER_LAMBDA_GRID
    lambda_proles: List[float] = PAPER_LAMBDA_GRID
    gamma: List[float] = PAPER_GAMMA_GRID
    thresholds: List[float] = PAPER_THRESHOLD_GRID
    objective: Literal["min-fdp-at-power", "max-mdc"] = "min-fdp-at-power"
    min_power: float = Field(0.5, ge=0.0, le=1.0)
    folds: int = Field(5, ge=2)

    @field_validator("lambda_pro", "lambda_les", "lambda_proles", "gamma", "thresholds")
    @classmethod
    def _nonempty(cls, value):
        if not value:
            raise ValueError("candidate lists must be nonempty")
        return sorted(set(value))


class MetricsConfig(BaseModel):
    denominator: Literal["paper", "oracle"] = "paper"
    oracle_limit: int = Field(8, ge=1)


class ToolkitConfig(BaseModel):
    """Top-level configuration read from config.yaml."""
    log_level: str = "INFO"
    connectivity: Connectivity = Connectivity.FACE6
    null_model: NullModelConfig = Field(default_factory=NullModelConfig)
    solver: SolverConfig = Field(default_factory=SolverConfig)
    fdrhs: HsParams = Field(default_factory=HsParams)
    gridsearch: GridSearchSpec = Field(default_factory=GridSearchSpec)
    metrics: MetricsConfig = Field(default_factory=MetricsConfig)
    jobs: int = Field(1, ge=1)
