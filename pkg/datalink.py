"""
DataLink class for the toolkit's file formats: mask, data, labels and truth
CSVs, raw float64 matrices, run manifests and result tables.
"""

import logging
from contextlib import contextmanager
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import ValidationError

from errors import DataError, DimensionError, SchemaError
from models import HsParams, RunManifest
from voxelgrid import VoxelGrid

PathLike = Union[str, Path]

MASK_COLUMNS = ["voxel_id", "i", "j", "k"]
LABEL_COLUMNS = ["subject_id", "label"]
TRUTH_COLUMNS = ["voxel_id", "truth_group"]
FIT_COLUMNS = ["voxel_id", "i", "j", "k", "t", "z", "beta", "c", "lfdr", "selected", "group"]
TRACE_COLUMNS = ["iteration", "objective"]
METRIC_COLUMNS = ["metric", "group", "value"]

TRUTH_GROUPS = {"lesion", "bias", "null"}
FIT_GROUPS = {"lesion", "bias", "none"}
MANIFEST_PATH_KEYS = ("data", "labels", "mask", "truth", "out")
FLOAT_FORMAT = "%.17g"


class DataLink:
    """
    File access layer with schema checks and logging.

    Every reader validates headers and sizes and raises SchemaError or
    DataError; every writer produces byte-identical output for identical
    inputs.
    """

    def __init__(self, debug: bool = False):
        """
        Initialize DataLink.

        Args:
            debug: Log every file read and write at INFO instead of DEBUG
        """
        self.debug = debug
        self.wasError = False
        self.log_entries: List[str] = []
        self.logger = logging.getLogger(__name__)

    @contextmanager
    def _reading(self, path: PathLike, what: str):
        path = Path(path)
        if not path.is_file():
            self.wasError = True
            self.log(f"{what} file not found: {path}")
            raise DataError(f"{what} file not found: {path}")
        try:
            self.wasError = False
            yield path
        except (DataError, ValidationError) as e:
            self.wasError = True
            self.log(f"{what} error in {path}: {e}")
            if isinstance(e, ValidationError):
                raise SchemaError(f"{what} file {path}: {e}") from e
            raise
        except (pd.errors.ParserError, pd.errors.EmptyDataError, ValueError) as e:
            self.wasError = True
            self.log(f"{what} error in {path}: {e}")
            raise SchemaError(f"cannot parse {what} file {path}: {e}") from e

    def _read_csv(self, path: Path, columns: Optional[List[str]], what: str, **kwargs) -> pd.DataFrame:
        # Only empty fields are missing; group names such as "null" stay literal.
        # round_trip parsing reads back the %.17g text bit-exactly.
        kwargs = {"keep_default_na": False, "na_values": [""], "float_precision": "round_trip", **kwargs}
        frame = pd.read_csv(path, **kwargs)
        if columns is not None and list(frame.columns) != columns:
            raise SchemaError(f"{what} file {path} has columns {list(frame.columns)}, expected {columns}")
        return frame

    @staticmethod
    def _subject_order(frame: pd.DataFrame, path: Path, what: str) -> pd.DataFrame:
        ids = frame["subject_id"]
        if ids.duplicated().any():
            raise DataError(f"{what} file {path}: duplicate subject_id {sorted(set(ids[ids.duplicated()]))}")
        return frame.sort_values("subject_id", kind="stable").reset_index(drop=True)

    def _write_csv(self, frame: pd.DataFrame, path: PathLike, what: str) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        self.wasError = False
        self.log(f"Wrote {what} {path} ({len(frame)} rows)")
        return path

    # Mask ---------------------------------------------------------------------

    def read_mask(self, path: PathLike, dims: Sequence[int]) -> VoxelGrid:
        """
        Read a ``voxel_id,i,j,k`` mask whose ids run 0..p-1.

        Args:
            path: Mask CSV
            dims: Grid dimensions

        Returns:
            VoxelGrid with features in voxel_id order
        """
        with self._reading(path, "mask") as path:
            frame = self._read_csv(path, MASK_COLUMNS, "mask", dtype="int64")
            frame = frame.sort_values("voxel_id", kind="stable")
            if not np.array_equal(frame["voxel_id"].to_numpy(), np.arange(len(frame))):
                raise SchemaError(f"mask {path}: voxel_id must be exactly 0..{len(frame) - 1}")
            return VoxelGrid(tuple(dims), frame[["i", "j", "k"]].to_numpy())

    def write_mask(self, path: PathLike, grid: VoxelGrid) -> Path:
        frame = pd.DataFrame(grid.coords, columns=["i", "j", "k"])
        frame.insert(0, "voxel_id", np.arange(grid.p))
        return self._write_csv(frame, path, "mask")

    # Subjects -----------------------------------------------------------------

    def _read_data_frame(self, path: PathLike, p: int) -> Tuple[np.ndarray, np.ndarray]:
        with self._reading(path, "data") as path:
            frame = self._read_csv(path, None, "data")
            expected = ["subject_id"] + [f"v{j}" for j in range(p)]
            if list(frame.columns) != expected:
                raise SchemaError(
                    f"data file {path} has {frame.shape[1] - 1} voxel columns, expected subject_id,v0..v{p - 1}"
                )
            frame = self._subject_order(frame, path, "data")
            x = frame.iloc[:, 1:].to_numpy(dtype=float)
            if not np.all(np.isfinite(x)):
                raise DataError(f"data file {path} contains non-finite values")
            return frame["subject_id"].to_numpy(dtype=np.int64), x

    def read_data(self, path: PathLike, p: int) -> np.ndarray:
        """Read an N x p CSV with a ``subject_id`` column and one column per voxel; rows in subject_id order."""
        return self._read_data_frame(path, p)[1]

    def write_data(self, path: PathLike, x: np.ndarray) -> Path:
        frame = pd.DataFrame(x, columns=[f"v{j}" for j in range(x.shape[1])])
        frame.insert(0, "subject_id", np.arange(x.shape[0]))
        return self._write_csv(frame, path, "data")

    def read_raw(self, path: PathLike, n_subjects: int, p: int) -> np.ndarray:
        """Read a little-endian float64 row-major N x p matrix."""
        with self._reading(path, "raw data") as path:
            values = np.fromfile(path, dtype="<f8")
            if values.size != n_subjects * p:
                raise DimensionError(f"raw data {path} holds {values.size} values, expected {n_subjects} x {p}")
            return values.reshape(n_subjects, p).astype(float)

    def write_raw(self, path: PathLike, x: np.ndarray) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        np.ascontiguousarray(x, dtype="<f8").tofile(path)
        self.log(f"Wrote raw data {path} ({x.shape[0]} x {x.shape[1]})")
        return path

    def _read_label_frame(self, path: PathLike) -> Tuple[np.ndarray, np.ndarray]:
        with self._reading(path, "labels") as path:
            frame = self._subject_order(self._read_csv(path, LABEL_COLUMNS, "labels"), path, "labels")
            labels = frame["label"].to_numpy()
            if not np.all(np.isin(labels, (1, -1))):
                raise DataError(f"labels file {path}: labels must be +1 or -1")
            return frame["subject_id"].to_numpy(dtype=np.int64), labels.astype(np.int64)

    def read_labels(self, path: PathLike) -> np.ndarray:
        """Labels in subject_id order."""
        return self._read_label_frame(path)[1]

    def read_subjects(self, data_path: PathLike, labels_path: PathLike, p: int,
                      data_format: str = "csv") -> Tuple[np.ndarray, np.ndarray]:
        """
        Read the data matrix and labels paired by subject_id.

        Args:
            data_path: Data CSV, or raw float64 file whose rows follow subject_id order
            labels_path: Labels CSV
            p: Number of voxels
            data_format: "csv" or "raw"

        Returns:
            (x, y) with row i of x belonging to label y[i]
        """
        label_ids, labels = self._read_label_frame(labels_path)
        if data_format == "raw":
            return self.read_raw(data_path, len(labels), p), labels
        data_ids, x = self._read_data_frame(data_path, p)
        if not np.array_equal(data_ids, label_ids):
            self.wasError = True
            missing = sorted(set(label_ids.tolist()) ^ set(data_ids.tolist()))
            self.log(f"subject ids of {data_path} and {labels_path} differ: {missing[:10]}")
            raise DataError(f"data and labels list different subjects; mismatched subject_id {missing[:10]}")
        return x, labels

    def write_labels(self, path: PathLike, labels: np.ndarray) -> Path:
        frame = pd.DataFrame({"subject_id": np.arange(len(labels)), "label": np.asarray(labels, dtype=np.int64)})
        return self._write_csv(frame, path, "labels")

    # Truth --------------------------------------------------------------------

    def read_truth(self, path: PathLike, p: int) -> Dict[str, np.ndarray]:
        """Return ``{'lesion': indices, 'bias': indices}``."""
        with self._reading(path, "truth") as path:
            frame = self._read_csv(path, TRUTH_COLUMNS, "truth")
            if len(frame) != p or set(frame["voxel_id"]) != set(range(p)):
                raise DimensionError(f"truth file {path} must list voxel_id 0..{p - 1} once each")
            unknown = set(frame["truth_group"]) - TRUTH_GROUPS
            if unknown:
                raise SchemaError(f"truth file {path}: unknown groups {sorted(unknown)}")
            groups = frame.sort_values("voxel_id")["truth_group"].to_numpy()
            return {g: np.flatnonzero(groups == g) for g in ("lesion", "bias")}

    def write_truth(self, path: PathLike, labels: np.ndarray) -> Path:
        frame = pd.DataFrame({"voxel_id": np.arange(len(labels)), "truth_group": labels})
        return self._write_csv(frame, path, "truth")

    # Results ------------------------------------------------------------------

    def write_fit(self, path: PathLike, grid: VoxelGrid, t: np.ndarray, z: np.ndarray,
                  beta: np.ndarray, c: np.ndarray, lfdr: np.ndarray, groups: np.ndarray) -> Path:
        """Per-voxel fit table; ``groups`` holds 'bias', 'lesion' or 'none'."""
        groups = np.asarray(groups, dtype=object)
        frame = pd.DataFrame({
            "voxel_id": np.arange(grid.p),
            "i": grid.coords[:, 0], "j": grid.coords[:, 1], "k": grid.coords[:, 2],
            "t": t, "z": z, "beta": beta, "c": c, "lfdr": lfdr,
            "selected": (groups != "none").astype(np.int64),
            "group": groups,
        })
        return self._write_csv(frame, path, "fit")

    def read_fit(self, path: PathLike) -> pd.DataFrame:
        with self._reading(path, "fit") as path:
            frame = self._read_csv(path, FIT_COLUMNS, "fit")
            unknown = set(frame["group"]) - FIT_GROUPS
            if unknown:
                raise SchemaError(f"fit file {path}: unknown groups {sorted(unknown)}")
            if not np.array_equal(frame["voxel_id"].to_numpy(), np.arange(len(frame))):
                raise SchemaError(f"fit file {path}: voxel_id must be 0..{len(frame) - 1} in order")
            return frame

    def read_selection(self, path: PathLike) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(selected indices, z, coords) from a fit file."""
        frame = self.read_fit(path)
        selected = np.flatnonzero(frame["selected"].to_numpy() == 1)
        return selected, frame["z"].to_numpy(dtype=float), frame[["i", "j", "k"]].to_numpy(dtype=np.int64)

    def write_trace(self, path: PathLike, trace: Sequence[float]) -> Path:
        frame = pd.DataFrame({"iteration": np.arange(len(trace)), "objective": np.asarray(trace, dtype=float)})
        return self._write_csv(frame, path, "trace")

    def write_metrics(self, path: PathLike, rows: List[Tuple[str, str, Any]]) -> Path:
        return self._write_csv(pd.DataFrame(rows, columns=METRIC_COLUMNS), path, "metrics")

    def read_metrics(self, path: PathLike) -> pd.DataFrame:
        with self._reading(path, "metrics") as path:
            return self._read_csv(path, METRIC_COLUMNS, "metrics")

    def write_table(self, path: PathLike, frame: pd.DataFrame, what: str = "table") -> Path:
        return self._write_csv(frame, path, what)

    # Manifest -----------------------------------------------------------------

    @staticmethod
    def parse_manifest_text(text: str) -> Dict[str, str]:
        """Parse ``key = value`` lines; ``#`` starts a comment."""
        entries: Dict[str, str] = {}
        for number, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise SchemaError(f"manifest line {number}: expected 'key = value', got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if not key:
                raise SchemaError(f"manifest line {number}: empty key")
            if key in entries:
                raise SchemaError(f"manifest line {number}: duplicate key {key!r}")
            entries[key] = value
        return entries

    def read_manifest(self, path: PathLike, defaults: Optional[HsParams] = None) -> RunManifest:
        """
        Read a run manifest. Relative paths resolve against the manifest's
        directory; penalty keys override ``defaults``.
        """
        with self._reading(path, "manifest") as path:
            entries = self.parse_manifest_text(path.read_text())
            base = path.parent
            fields: Dict[str, Any] = {}
            param_updates: Dict[str, Any] = {}
            for key, value in entries.items():
                if key in MANIFEST_PATH_KEYS:
                    fields[key] = (base / value) if not Path(value).is_absolute() else Path(value)
                elif key == "dims":
                    fields[key] = tuple(int(v) for v in value.split(","))
                elif key in ("connectivity", "data_format"):
                    fields[key] = value
                elif key in HsParams.model_fields:
                    param_updates[key] = value
                else:
                    raise SchemaError(f"manifest {path}: unknown key {key!r}")
            params = (defaults or HsParams()).model_dump()
            params.update(param_updates)
            fields["params"] = HsParams(**params)
            manifest = RunManifest(**fields)
            self.log(f"Read manifest {path}")
            return manifest

    def write_manifest(self, path: PathLike, manifest: RunManifest) -> Path:
        """Write a manifest with paths relative to its own directory when possible."""
        path = Path(path)
        base = path.parent.resolve()

        def rel(p: Path) -> str:
            p = Path(p).resolve()
            try:
                return p.relative_to(base).as_posix()
            except ValueError:
                return p.as_posix()

        lines = []
        for key in ("data", "labels", "mask", "truth"):
            value = getattr(manifest, key)
            if value is not None:
                lines.append(f"{key} = {rel(value)}")
        lines.append("dims = " + ",".join(str(d) for d in manifest.dims))
        lines.append(f"connectivity = {manifest.connectivity.value}")
        lines.append(f"data_format = {manifest.data_format}")
        for key in ("lambda_pro", "lambda_les", "lambda_proles", "gamma"):
            lines.append(f"{key} = {getattr(manifest.params, key)!r}")
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n")
        self.log(f"Wrote manifest {path}")
        return path

    # Logging ------------------------------------------------------------------

    def log(self, message: str) -> None:
        """Save message to the in-memory log and the module logger."""
        timestamp = datetime.now().strftime("%Y-%m-%d %H:%M:%S")
        self.log_entries.append(f"[{timestamp}] {message}")
        if len(self.log_entries) > 1000:
            self.log_entries = self.log_entries[-1000:]
        if self.wasError:
            self.logger.error(message)
        elif self.debug:
            self.logger.info(message)
        else:
            self.logger.debug(message)

    def read_log(self, num: int) -> List[str]:
        """Return the last ``num`` log entries."""
        return self.log_entries[-num:] if num > 0 else []
