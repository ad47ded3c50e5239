"""
Voxel lattice graphs for FDR-HS.
Builds neighbor edges from a 3D mask, splits them by the sign of the z-scores
and materializes the sparse graph difference operators used by the M-step.
"""

import logging
from dataclasses import dataclass, field
from itertools import product
from typing import Sequence, Tuple, Union

import numpy as np
from scipy import sparse

from errors import DataError, DimensionError, UsageError
from models import Connectivity, HsParams

logger = logging.getLogger(__name__)

# Forward half of each neighborhood, so every unordered pair is visited once.
FACE6_OFFSETS = ((0, 0, 1), (0, 1, 0), (1, 0, 0))
MOORE26_OFFSETS = tuple(o for o in product((-1, 0, 1), repeat=3) if o > (0, 0, 0))

_EMPTY_EDGES = np.empty((0, 2), dtype=np.int64)


@dataclass(frozen=True)
class VoxelGrid:
    """
    Masked voxels of a 3D box.

    Row ``i`` of ``coords`` is the (i, j, k) coordinate of feature index ``i``,
    which is also its ``voxel_id`` in every file the toolkit writes.
    """
    dims: Tuple[int, int, int]
    coords: np.ndarray
    lookup: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or any(d <= 0 for d in dims):
            raise DataError(f"dims must be three positive integers, got {self.dims}")
        coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        if coords.size and (coords.min() < 0 or np.any(coords >= np.array(dims))):
            raise DataError(f"masked coordinate outside dims {dims}")
        lookup = np.full(dims, -1, dtype=np.int64)
        lookup[coords[:, 0], coords[:, 1], coords[:, 2]] = np.arange(len(coords))
        if np.count_nonzero(lookup >= 0) != len(coords):
            raise DataError("duplicate voxel coordinates in mask")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "lookup", lookup)

    @classmethod
    def from_mask(cls, volume: np.ndarray) -> "VoxelGrid":
        """Grid from a boolean volume; voxels are numbered in C order."""
        volume = np.asarray(volume, dtype=bool)
        if volume.ndim != 3:
            raise DimensionError(f"mask volume must be 3D, got shape {volume.shape}")
        return cls(volume.shape, np.argwhere(volume))

    @classmethod
    def full(cls, dims: Sequence[int]) -> "VoxelGrid":
        return cls.from_mask(np.ones(tuple(dims), dtype=bool))

    @property
    def p(self) -> int:
        return len(self.coords)

    def mask_volume(self) -> np.ndarray:
        return self.lookup >= 0

    def index_of(self, coord: Sequence[int]) -> int:
        i, j, k = (int(c) for c in coord)
        if not all(0 <= c < d for c, d in zip((i, j, k), self.dims)):
            raise DataError(f"coordinate {coord} outside dims {self.dims}")
        index = int(self.lookup[i, j, k])
        if index < 0:
            raise DataError(f"coordinate {coord} is not masked")
        return index

    def relabel(self, order: Sequence[int]) -> "VoxelGrid":
        """Grid whose feature ``n`` is this grid's feature ``order[n]``."""
        return VoxelGrid(self.dims, self.coords[np.asarray(order)])


@dataclass(frozen=True)
class LatticeGraph:
    """Neighbor pairs (a, b) with a < b, sorted lexicographically."""
    p: int
    edges: np.ndarray
    connectivity: Connectivity

    @property
    def n_edges(self) -> int:
        return len(self.edges)


@dataclass(frozen=True)
class SubgraphSplit:
    """Vertices and edges of the three heterogeneity subgraphs."""
    p: int
    v1: np.ndarray  # z <= 0, procedural bias side
    v2: np.ndarray  # z > 0, lesion side
    e1: np.ndarray
    e2: np.ndarray
    e3: np.ndarray


@dataclass(frozen=True)
class DiffOperator:
    """
    Graph difference operator: one row per edge with +1 at the first endpoint
    and -1 at the second, scaled by a per-row weight.
    """
    incidence: sparse.csr_matrix
    row_weights: np.ndarray
    matrix: sparse.csr_matrix = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        weights = np.asarray(self.row_weights, dtype=float)
        if weights.shape != (self.incidence.shape[0],):
            raise DimensionError(
                f"{len(weights)} row weights for {self.incidence.shape[0]} operator rows"
            )
        incidence = sparse.csr_matrix(self.incidence)
        weighted = incidence.copy()
        weighted.data = weighted.data * np.repeat(weights, np.diff(incidence.indptr))
        object.__setattr__(self, "incidence", incidence)
        object.__setattr__(self, "row_weights", weights)
        object.__setattr__(self, "matrix", weighted)

    @property
    def n_rows(self) -> int:
        return self.incidence.shape[0]

    @property
    def p(self) -> int:
        return self.incidence.shape[1]

    def apply(self, beta: np.ndarray) -> np.ndarray:
        return self.matrix @ np.asarray(beta, dtype=float)


def build_graph(grid: VoxelGrid, connectivity: Union[Connectivity, str] = Connectivity.FACE6) -> LatticeGraph:
    """
    Enumerate all neighbor pairs among masked voxels.

    Args:
        grid: Masked voxel grid
        connectivity: face6 (shared face) or moore26 (3x3x3 window)

    Returns:
        LatticeGraph with lexicographically ordered edges
    """
    if grid.p == 0:
        raise DataError("empty grid")
    try:
        connectivity = Connectivity(connectivity)
    except ValueError:
        raise UsageError(f"unknown connectivity: {connectivity}")
    offsets = FACE6_OFFSETS if connectivity is Connectivity.FACE6 else MOORE26_OFFSETS

    dims = np.array(grid.dims)
    blocks = []
    for offset in offsets:
        neighbors = grid.coords + np.array(offset)
        inside = np.all((neighbors >= 0) & (neighbors < dims), axis=1)
        src = np.flatnonzero(inside)
        dst = grid.lookup[tuple(neighbors[inside].T)]
        keep = dst >= 0
        a, b = src[keep], dst[keep]
        blocks.append(np.column_stack([np.minimum(a, b), np.maximum(a, b)]))

    edges = np.concatenate(blocks) if blocks else _EMPTY_EDGES
    edges = np.unique(edges, axis=0) if len(edges) else _EMPTY_EDGES
    logger.debug(f"{connectivity.value} graph: {grid.p} voxels, {len(edges)} edges")
    return LatticeGraph(grid.p, edges.astype(np.int64), connectivity)


def split_subgraphs(graph: LatticeGraph, z: np.ndarray) -> SubgraphSplit:
    """
    Split the graph by z-sign: V1 = {z <= 0}, V2 = {z > 0}, E3 bridges them.
    """
    z = np.asarray(z, dtype=float)
    if z.shape != (graph.p,):
        raise DimensionError(f"z has shape {z.shape}, graph has {graph.p} vertices")
    if not np.all(np.isfinite(z)):
        raise DataError("z contains non-finite entries")

    nonpositive = z <= 0
    first = nonpositive[graph.edges[:, 0]]
    second = nonpositive[graph.edges[:, 1]]
    return SubgraphSplit(
        p=graph.p,
        v1=np.flatnonzero(nonpositive),
        v2=np.flatnonzero(~nonpositive),
        e1=graph.edges[first & second],
        e2=graph.edges[~first & ~second],
        e3=graph.edges[first != second],
    )


def incidence_operator(edges: np.ndarray, p: int, weights=1.0) -> DiffOperator:
    """Difference operator for ``edges`` with scalar or per-row weights."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    m = len(edges)
    rows = np.repeat(np.arange(m), 2)
    cols = edges.reshape(-1)
    data = np.tile([1.0, -1.0], m)
    incidence = sparse.csr_matrix((data, (rows, cols)), shape=(m, p))
    return DiffOperator(incidence, np.broadcast_to(np.asarray(weights, dtype=float), (m,)).copy())


def _stacked_edges(split: SubgraphSplit) -> np.ndarray:
    return np.concatenate([split.e1, split.e2, split.e3]).reshape(-1, 2)


def stacked_operator(split: SubgraphSplit, params: HsParams) -> DiffOperator:
    """
    Stack [D_G1; (lambda_les/lambda_pro) D_G2; (lambda_proles/lambda_pro) D_G3].
    """
    if params.lambda_pro <= 0.0:
        raise UsageError("undefined weight ratio: lambda_pro must be positive")
    weights = np.concatenate([
        np.ones(len(split.e1)),
        np.full(len(split.e2), params.lambda_les / params.lambda_pro),
        np.full(len(split.e3), params.lambda_proles / params.lambda_pro),
    ])
    return incidence_operator(_stacked_edges(split), split.p, weights)


def unit_operator(split: SubgraphSplit) -> DiffOperator:
    """Same rows as ``stacked_operator`` with every weight equal to one."""
    return incidence_operator(_stacked_edges(split), split.p, 1.0)
