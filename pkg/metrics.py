"""
Evaluation metrics: FDP and power against ground truth, multi-set Dice
stability across folds and 3D edge density of selected voxel sets.
"""

import logging
from dataclasses import dataclass
from functools import lru_cache, reduce
from math import isqrt
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np

from errors import DataError, DimensionError, OracleInfeasibleError, UsageError
from voxelgrid import FACE6_OFFSETS, VoxelGrid

logger = logging.getLogger(__name__)

Denominator = Literal["paper", "oracle"]


def _as_index_set(values, p: Optional[int] = None) -> np.ndarray:
    values = np.unique(np.asarray(values, dtype=np.int64).ravel())
    if p is not None and len(values) and (values[0] < 0 or values[-1] >= p):
        raise DataError(f"index outside 0..{p - 1}")
    return values


def fdp_power(selected, truth, p: Optional[int] = None) -> Tuple[float, float]:
    """
    Realized false discovery proportion and power.

    Returns:
        (fdp, power); both are 0 for empty selections or empty truth
    """
    selected = _as_index_set(selected, p)
    truth = _as_index_set(truth, p)
    hits = len(np.intersect1d(selected, truth, assume_unique=True))
    fdp = (len(selected) - hits) / max(len(selected), 1)
    power = hits / max(len(truth), 1)
    return float(fdp), float(power)


def mdc(folds: Sequence) -> float:
    """Multi-set Dice K |intersection| / sum |S_k|; 0 when every fold is empty."""
    if len(folds) < 2:
        raise UsageError(f"mDC needs at least 2 folds, got {len(folds)}")
    sets = [_as_index_set(fold) for fold in folds]
    total = sum(len(s) for s in sets)
    if total == 0:
        return 0.0
    common = reduce(lambda a, b: np.intersect1d(a, b, assume_unique=True), sets)
    return len(sets) * len(common) / total


# Maximum edge counts -----------------------------------------------------------

def _best_remainder(rem: int, a: int, b: int) -> Optional[int]:
    """
    Best value of 2 r1 r2 - r1 - r2 + l over r1 <= a, r2 <= b with
    r1 r2 + l = rem and l <= max(r1, r2); None when infeasible.
    """
    if rem == 0:
        return 0
    best = 0 if rem <= b else None
    for r1 in range(1, a + 1):
        r2 = min(b, rem // r1)
        l = rem - r1 * r2
        if l <= max(r1, r2):
            value = 2 * r1 * r2 - r1 - r2 + l
            best = value if best is None else max(best, value)
    return best


@lru_cache(maxsize=None)
def max_lattice_edges(n: int) -> int:
    """
    Closed-form maximum edge count for n voxels: a c1 x c2 x c3 box plus an
    r1 x r2 rectangle and a line of l voxels laid on one of its faces.

    Attachment edges between the parts are not counted, so the value can be
    below the true maximum (n = 5 gives 4, the true maximum is 5).
    """
    if n < 0:
        raise UsageError(f"n must be nonnegative, got {n}")
    if n <= 1:
        return 0
    best = 0
    c1 = 1
    while c1 ** 3 <= n:
        for c2 in range(c1, isqrt(n // c1) + 1):
            for c3 in range(c2, n // (c1 * c2) + 1):
                rem = n - c1 * c2 * c3
                cube = 3 * c1 * c2 * c3 - c1 * c2 - c1 * c3 - c2 * c3
                for a, b in ((c1, c2), (c1, c3), (c2, c3)):
                    if rem > a * b:
                        continue
                    extra = _best_remainder(rem, a, b)
                    if extra is not None:
                        best = max(best, cube + extra)
        c1 += 1
    return best


def _shape_edges(cells: frozenset) -> int:
    return sum((x + dx, y + dy, z + dz) in cells for x, y, z in cells for dx, dy, dz in FACE6_OFFSETS)


def _normalize(cells) -> frozenset:
    lx, ly, lz = (min(axis) for axis in zip(*cells))
    return frozenset((x - lx, y - ly, z - lz) for x, y, z in cells)


@lru_cache(maxsize=None)
def _oracle_table(limit: int) -> Tuple[int, ...]:
    """Exhaustive maxima for sizes 0..limit over translation-distinct polycubes."""
    table = [0, 0]
    shapes = {frozenset({(0, 0, 0)})}
    for size in range(2, limit + 1):
        grown = set()
        for shape in shapes:
            for x, y, z in shape:
                for dx, dy, dz in FACE6_OFFSETS + tuple((-a, -b, -c) for a, b, c in FACE6_OFFSETS):
                    cell = (x + dx, y + dy, z + dz)
                    if cell not in shape:
                        grown.add(_normalize(shape | {cell}))
        shapes = grown
        table.append(max(_shape_edges(s) for s in shapes))
        logger.debug(f"Polycube enumeration: {len(shapes)} shapes of size {size}")
    return tuple(table[:limit + 1])


def max_lattice_edges_oracle(n: int, limit: int = 8) -> int:
    """Exact maximum edge count among n face-connected voxels, for n <= limit."""
    if n < 0:
        raise UsageError(f"n must be nonnegative, got {n}")
    if n > limit:
        raise OracleInfeasibleError(f"oracle infeasible: set size {n} exceeds enumeration limit {limit}")
    if n <= 1:
        return 0
    return _oracle_table(limit)[n]


def denominator_table(sizes, limit: int = 8) -> List[Tuple[int, int, Optional[int]]]:
    """(n, closed form, exhaustive or None) for each distinct size."""
    return [(n, max_lattice_edges(n), max_lattice_edges_oracle(n, limit) if n <= limit else None)
            for n in sorted(set(int(s) for s in sizes))]


# Fold selections and edge density -----------------------------------------------

@dataclass(frozen=True)
class SelectionFolds:
    """Per-fold lesion (z > 0) and bias (z <= 0) selections."""
    plus: Tuple[np.ndarray, ...]
    minus: Tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.plus) != len(self.minus):
            raise DimensionError(f"{len(self.plus)} lesion folds but {len(self.minus)} bias folds")
        plus = tuple(_as_index_set(s) for s in self.plus)
        minus = tuple(_as_index_set(s) for s in self.minus)
        for k, (a, b) in enumerate(zip(plus, minus)):
            if len(np.intersect1d(a, b)):
                raise DataError(f"fold {k}: lesion and bias sets overlap")
        object.__setattr__(self, "plus", plus)
        object.__setattr__(self, "minus", minus)

    @property
    def k(self) -> int:
        return len(self.plus)

    @classmethod
    def from_selections(cls, selected_list: Sequence, z_list: Sequence) -> "SelectionFolds":
        """Partition each fold's selection by the sign of that fold's z."""
        if len(selected_list) != len(z_list):
            raise DimensionError(f"{len(selected_list)} selections but {len(z_list)} z vectors")
        plus, minus = [], []
        for selected, z in zip(selected_list, z_list):
            selected = _as_index_set(selected, len(z))
            z = np.asarray(z, dtype=float)
            plus.append(selected[z[selected] > 0])
            minus.append(selected[z[selected] <= 0])
        return cls(tuple(plus), tuple(minus))


def internal_edges(indices, grid: VoxelGrid) -> int:
    """Number of face-adjacent pairs inside a voxel set."""
    indices = _as_index_set(indices, grid.p)
    member = np.zeros(grid.dims, dtype=bool)
    member[tuple(grid.coords[indices].T)] = True
    return int((member[1:, :, :] & member[:-1, :, :]).sum()
               + (member[:, 1:, :] & member[:, :-1, :]).sum()
               + (member[:, :, 1:] & member[:, :, :-1]).sum())


def set_edge_density(indices, grid: VoxelGrid, denominator: Denominator = "paper", oracle_limit: int = 8) -> float:
    """Internal edges over the maximum for the set size, capped at 1 since the closed form can undercount."""
    n = len(_as_index_set(indices, grid.p))
    if denominator == "oracle":
        bound = max_lattice_edges_oracle(n, oracle_limit)
    elif denominator == "paper":
        bound = max_lattice_edges(n)
    else:
        raise UsageError(f"unknown denominator {denominator!r}")
    edges = internal_edges(indices, grid)
    if edges > bound:
        logger.debug(f"{edges} internal edges exceed the {denominator} bound {bound} for n={n}")
    return min(1.0, edges / bound) if bound > 0 else 0.0


def edge_density_3d(folds: SelectionFolds, grid: VoxelGrid, denominator: Denominator = "paper",
                    oracle_limit: int = 8) -> Tuple[float, float]:
    """
    Average within-set edge density over folds.

    Returns:
        (eds_plus, eds_minus) for lesion and bias selections
    """
    if folds.k == 0:
        raise UsageError("edge density needs at least one fold")
    plus = [set_edge_density(s, grid, denominator, oracle_limit) for s in folds.plus]
    minus = [set_edge_density(s, grid, denominator, oracle_limit) for s in folds.minus]
    return float(np.mean(plus)), float(np.mean(minus))


def fold_stability(folds: SelectionFolds) -> Dict[str, float]:
    """mDC of lesion and bias selections."""
    return {"lesion": mdc(folds.plus), "bias": mdc(folds.minus)}
