"""
Synthetic phantoms: spherical lesion blobs that are lower in the disease
class and a shell of procedural bias that is higher in the disease class.
"""

import logging
from typing import Dict, NamedTuple, Sequence

import numpy as np
from numpy.random import Generator, Philox, SeedSequence
from scipy.ndimage import binary_dilation, generate_binary_structure

from errors import DataError
from models import BiasShell, LesionBlob, PhantomSpec
from stats import Dataset
from voxelgrid import VoxelGrid

logger = logging.getLogger(__name__)

TRUTH_GROUPS = ("null", "lesion", "bias")


class Phantom(NamedTuple):
    dataset: Dataset
    grid: VoxelGrid
    lesion: np.ndarray
    bias: np.ndarray

    @property
    def truth(self) -> Dict[str, np.ndarray]:
        """Planted index sets; both empty for a null phantom."""
        return {"lesion": self.lesion, "bias": self.bias}

    def truth_labels(self) -> np.ndarray:
        labels = np.full(self.grid.p, "null", dtype=object)
        labels[self.lesion] = "lesion"
        labels[self.bias] = "bias"
        return labels


def ball(dims: Sequence[int], blob: LesionBlob) -> np.ndarray:
    """Voxels within Euclidean distance ``radius`` of the blob center."""
    coords = np.indices(tuple(dims))
    dist2 = sum((coords[a] - blob.center[a]) ** 2 for a in range(3))
    return dist2 <= blob.radius ** 2


def shell(dims: Sequence[int], spec: BiasShell) -> np.ndarray:
    """Outer face-6 layer around the inclusive box [lo, hi]."""
    region = np.zeros(tuple(dims), dtype=bool)
    region[tuple(slice(lo, hi + 1) for lo, hi in zip(spec.lo, spec.hi))] = True
    return binary_dilation(region, structure=generate_binary_structure(3, 1)) & ~region


def generate(spec: PhantomSpec) -> Phantom:
    """
    Draw a phantom dataset.

    Subjects 0..n-1 are controls (+1) and n..2n-1 are disease (-1). Each
    subject's noise row comes from its own Philox stream spawned from the
    spec seed.

    Returns:
        Phantom(dataset, grid, lesion indices, bias indices)
    """
    grid = VoxelGrid.full(spec.dims)
    shift = np.zeros(spec.dims)
    lesion = np.zeros(spec.dims, dtype=bool)
    for blob in spec.lesion_blobs:
        inside = ball(spec.dims, blob)
        lesion |= inside
        shift[inside] = -blob.effect * spec.noise_sd

    bias = np.zeros(spec.dims, dtype=bool)
    if spec.bias_shell is not None:
        bias = shell(spec.dims, spec.bias_shell)
        if np.any(bias & lesion):
            raise DataError("lesion blobs overlap the bias shell")
        shift[bias] = spec.bias_shell.effect * spec.noise_sd

    n = spec.n_subjects_per_class
    labels = np.concatenate([np.ones(n, dtype=np.int64), -np.ones(n, dtype=np.int64)])
    streams = SeedSequence(spec.seed).spawn(2 * n)
    x = np.vstack([Generator(Philox(s)).normal(0.0, spec.noise_sd, grid.p) for s in streams])
    x[labels == -1] += shift.reshape(-1)

    lesion_idx = np.flatnonzero(lesion.reshape(-1))
    bias_idx = np.flatnonzero(bias.reshape(-1))
    logger.info(f"Phantom {spec.dims}: {2 * n} subjects, {len(lesion_idx)} lesion and {len(bias_idx)} bias voxels")
    return Phantom(Dataset(x, labels), grid, lesion_idx, bias_idx)


def standard_phantom_spec(seed: int = 0) -> PhantomSpec:
    """Two lesion balls of 81 voxels and a 54-voxel bias shell on a 24^3 grid."""
    return PhantomSpec(
        dims=(24, 24, 24),
        n_subjects_per_class=40,
        lesion_blobs=[
            LesionBlob(center=(7, 7, 7), radius=2.5, effect=1.2),
            LesionBlob(center=(7, 16, 16), radius=2.5, effect=1.2),
        ],
        bias_shell=BiasShell(lo=(16, 10, 10), hi=(18, 12, 12), effect=0.9),
        noise_sd=1.0,
        seed=seed,
    )


def null_phantom_spec(dims=(25, 20, 20), n_subjects_per_class: int = 50, seed: int = 0) -> PhantomSpec:
    """No planted effects."""
    return PhantomSpec(dims=dims, n_subjects_per_class=n_subjects_per_class, seed=seed)
