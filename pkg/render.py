"""
Slice rendering of fit results as binary PGM images and CSV grids.
"""

import logging
from pathlib import Path
from typing import Sequence, Tuple

import numpy as np
import pandas as pd

from errors import DataError, UsageError

logger = logging.getLogger(__name__)

UNMASKED, MASKED, BIAS, LESION = 0, 64, 160, 255
AXES = "ijk"


def label_volume(dims: Sequence[int], coords: np.ndarray, groups: Sequence[str]) -> np.ndarray:
    """uint8 volume: lesion 255, bias 160, other masked voxels 64, unmasked 0."""
    coords = np.asarray(coords, dtype=np.int64)
    groups = np.asarray(groups, dtype=object)
    if len(coords) != len(groups):
        raise DataError(f"{len(coords)} coordinates for {len(groups)} group labels")
    volume = np.full(tuple(dims), UNMASKED, dtype=np.uint8)
    values = np.full(len(groups), MASKED, dtype=np.uint8)
    values[groups == "bias"] = BIAS
    values[groups == "lesion"] = LESION
    volume[tuple(coords.T)] = values
    return volume


def take_slice(volume: np.ndarray, axis: str, index: int) -> np.ndarray:
    if axis not in AXES:
        raise UsageError(f"axis must be one of i, j, k; got {axis!r}")
    a = AXES.index(axis)
    if not 0 <= index < volume.shape[a]:
        raise UsageError(f"slice {axis}={index} outside 0..{volume.shape[a] - 1}")
    return np.take(volume, index, axis=a)


def pgm_bytes(plane: np.ndarray) -> bytes:
    """Binary P5 image; rows are the first remaining axis."""
    height, width = plane.shape
    return f"P5\n{width} {height}\n255\n".encode("ascii") + np.ascontiguousarray(plane, dtype=np.uint8).tobytes()


def read_pgm(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise DataError(f"{path} is not a binary PGM")
    width, height = (int(v) for v in parts[1].split())
    plane = np.frombuffer(parts[3], dtype=np.uint8)
    if plane.size != width * height:
        raise DataError(f"{path}: expected {width * height} pixels, found {plane.size}")
    return plane.reshape(height, width)


def render_slice(out_dir: Path, dims: Sequence[int], coords: np.ndarray, groups: Sequence[str],
                 axis: str, index: int) -> Tuple[Path, Path]:
    """Write ``slice_<axis><index>.pgm`` and ``.csv`` into ``out_dir``."""
    plane = take_slice(label_volume(dims, coords, groups), axis, index)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pgm_path = out_dir / f"slice_{axis}{index}.pgm"
    csv_path = out_dir / f"slice_{axis}{index}.csv"
    pgm_path.write_bytes(pgm_bytes(plane))
    pd.DataFrame(plane).to_csv(csv_path, header=False, index=False, lineterminator="\n")
    logger.info(f"Rendered {axis}={index} to {pgm_path}")
    return pgm_path, csv_path
