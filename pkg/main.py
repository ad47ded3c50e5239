"""
FDR-HS command-line toolkit.
Feature selection with heterogeneous smoothing for voxel-based group studies:
phantom synthesis, fitting, baselines, evaluation, slice rendering and grid search.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import yaml
from pydantic import ValidationError

from datalink import DataLink
from errors import DataError, DimensionError, FdrHsError, UsageError
from metrics import SelectionFolds
from models import (Connectivity, GridSearchSpec, HsParams, PhantomSpec, RunManifest,
                    ToolkitConfig)
from phantom import generate, null_phantom_spec, standard_phantom_spec
from pipeline import (baseline_selection, fit_selection, fold_rows, grid_search, screen,
                      training_sets, truth_rows)
from render import render_slice
from stats import Dataset
from voxelgrid import VoxelGrid

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
DEFAULT_LEVELS = {"ttest": 0.05, "bh": 0.05, "localfdr": 0.2}


class CliParser(argparse.ArgumentParser):
    """ArgumentParser that raises UsageError instead of exiting."""

    def error(self, message):
        raise UsageError(message)


def _float_list(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _parse_dims(text: str):
    try:
        dims = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected i,j,k, got {text!r}")
    if len(dims) != 3:
        raise argparse.ArgumentTypeError(f"expected three dimensions, got {text!r}")
    return dims


class FdrHsToolkit:
    """Main FDR-HS command-line application."""

    def __init__(self, config_path: Optional[str] = None):
        self.config_path = config_path
        self.config = ToolkitConfig()
        self.link = DataLink()

    def _load_config(self, config_path: str) -> ToolkitConfig:
        """Load configuration from YAML file, falling back to defaults."""
        try:
            with open(config_path, 'r') as f:
                data = yaml.safe_load(f) or {}
        except FileNotFoundError:
            logger.debug(f"No config file at {config_path}; using defaults")
            data = {}
        except yaml.YAMLError as e:
            raise UsageError(f"cannot parse config {config_path}: {e}")
        try:
            return ToolkitConfig(**data)
        except ValidationError as e:
            raise UsageError(f"invalid config {config_path}: {e}")

    # Parser -------------------------------------------------------------------

    @staticmethod
    def _global_flags(parser: argparse.ArgumentParser, suppress: bool):
        default = (lambda value: argparse.SUPPRESS) if suppress else (lambda value: value)
        parser.add_argument("--manifest", type=Path, default=default(None), help="Run manifest (key = value)")
        parser.add_argument("--out", type=Path, default=default(None), help="Output directory")
        parser.add_argument("--seed", type=int, default=default(0), help="Random seed (default 0)")
        parser.add_argument("--jobs", type=int, default=default(None), help="Parallel grid-search workers")
        parser.add_argument("--connectivity", choices=[c.value for c in Connectivity], default=default(None),
                            help="Lattice neighborhood (default face6)")
        parser.add_argument("--config", default=default("config.yaml"), help="YAML configuration file")
        parser.add_argument("--log-level", default=default(None), help="DEBUG, INFO, WARNING or ERROR")
        parser.add_argument("--debug", action="store_true", default=default(False), help="Shortcut for DEBUG logging")

    @staticmethod
    def _penalty_flags(parser: argparse.ArgumentParser):
        parser.add_argument("--lambda-pro", type=float, help="Penalty on edges among z <= 0 voxels (default 0.5)")
        parser.add_argument("--lambda-les", type=float, help="Penalty on edges among z > 0 voxels (default 0.3)")
        parser.add_argument("--lambda-proles", type=float, help="Penalty on bridging edges (default 1.0)")
        parser.add_argument("--homogeneous", type=float, metavar="LAMBDA", help="Same penalty on every edge")
        parser.add_argument("--gamma", type=float, help="Selection threshold on lfdr (default 0.2)")

    def build_parser(self) -> argparse.ArgumentParser:
        parser = CliParser(prog="fdrhs", description=__doc__.strip().splitlines()[0])
        self._global_flags(parser, suppress=False)
        common = argparse.ArgumentParser(add_help=False)
        self._global_flags(common, suppress=True)
        sub = parser.add_subparsers(dest="command", parser_class=CliParser)

        synth = sub.add_parser("synth", parents=[common], help="Generate a phantom dataset")
        synth.add_argument("--preset", choices=["standard", "null"], default="standard")
        synth.add_argument("--phantom", type=Path, help="YAML phantom spec (overrides preset)")
        synth.add_argument("--dims", type=_parse_dims)
        synth.add_argument("--n-per-class", type=int)
        synth.add_argument("--lesion-effect", type=float)
        synth.add_argument("--bias-effect", type=float)
        synth.add_argument("--noise-sd", type=float)
        synth.add_argument("--format", choices=["csv", "raw"], default="csv")

        fit = sub.add_parser("fit", parents=[common], help="Fit FDR-HS")
        self._penalty_flags(fit)
        fit.add_argument("--constant-prior", action="store_true", help="Fix c = cbar (LocalFDR)")
        fit.add_argument("--folds", type=int, help="Also refit on K stratified subject folds")
        fit.add_argument("--name", default="fit")

        baseline = sub.add_parser("baseline", parents=[common], help="Run a univariate selector")
        baseline.add_argument("--method", choices=sorted(DEFAULT_LEVELS), required=True)
        baseline.add_argument("--level", type=float, help="p threshold, BH q or lfdr gamma")
        baseline.add_argument("--folds", type=int)
        baseline.add_argument("--name")

        metrics = sub.add_parser("metrics", parents=[common], help="Evaluate selections")
        metrics.add_argument("--fit", type=Path, help="Fit file evaluated against truth")
        metrics.add_argument("--folds", type=Path, nargs="+", help="Fold fit files for mDC and 3dED")
        metrics.add_argument("--truth", type=Path)
        metrics.add_argument("--dims", type=_parse_dims)
        metrics.add_argument("--denominator", choices=["paper", "oracle"])

        render = sub.add_parser("render", parents=[common], help="Render a slice of a fit file")
        render.add_argument("--fit", type=Path, required=True)
        render.add_argument("--axis", choices=["i", "j", "k"], default="k")
        render.add_argument("--index", type=int, required=True)
        render.add_argument("--dims", type=_parse_dims)

        gridsearch = sub.add_parser("gridsearch", parents=[common], help="Grid search over penalties")
        gridsearch.add_argument("--method", choices=["fdrhs", "ttest", "bh", "localfdr"])
        gridsearch.add_argument("--lambda-pro", type=_float_list)
        gridsearch.add_argument("--lambda-les", type=_float_list)
        gridsearch.add_argument("--lambda-proles", type=_float_list)
        gridsearch.add_argument("--gamma", type=_float_list)
        gridsearch.add_argument("--thresholds", type=_float_list)
        gridsearch.add_argument("--objective", choices=["min-fdp-at-power", "max-mdc"])
        gridsearch.add_argument("--min-power", type=float)
        gridsearch.add_argument("--folds", type=int)
        return parser

    # Helpers ------------------------------------------------------------------

    def _setup_logging(self, args):
        level = "DEBUG" if args.debug else (args.log_level or self.config.log_level)
        numeric = logging.getLevelName(str(level).upper())
        if not isinstance(numeric, int):
            raise UsageError(f"unknown log level {level!r}")
        logging.basicConfig(level=numeric, format=LOG_FORMAT, stream=sys.stderr, force=True)

    def _connectivity(self, args, manifest: Optional[RunManifest] = None) -> Connectivity:
        if args.connectivity:
            return Connectivity(args.connectivity)
        if manifest is not None:
            return manifest.connectivity
        return self.config.connectivity

    def _manifest(self, args) -> RunManifest:
        if args.manifest is None:
            raise UsageError(f"{args.command} needs --manifest")
        return self.link.read_manifest(args.manifest, self.config.fdrhs)

    def _out_dir(self, args, manifest: Optional[RunManifest] = None) -> Path:
        if args.out is not None:
            return Path(args.out)
        if manifest is not None and manifest.out is not None:
            return Path(manifest.out)
        if args.manifest is not None:
            return Path(args.manifest).parent
        return Path(".")

    def _params(self, args, base: HsParams) -> HsParams:
        updates: Dict[str, Any] = {}
        if args.homogeneous is not None:
            updates.update(lambda_pro=args.homogeneous, lambda_les=args.homogeneous,
                           lambda_proles=args.homogeneous)
        for flag in ("lambda_pro", "lambda_les", "lambda_proles", "gamma"):
            value = getattr(args, flag)
            if value is not None:
                updates[flag] = value
        try:
            return HsParams(**{**base.model_dump(), **updates})
        except ValidationError as e:
            raise UsageError(f"invalid penalties: {e}")

    def _load_inputs(self, manifest: RunManifest):
        grid = self.link.read_mask(manifest.mask, manifest.dims)
        x, labels = self.link.read_subjects(manifest.data, manifest.labels, grid.p, manifest.data_format)
        if x.shape[0] != len(labels):
            raise DimensionError(f"{x.shape[0]} data rows but {len(labels)} labels")
        truth = self.link.read_truth(manifest.truth, grid.p) if manifest.truth is not None else None
        return Dataset(x, labels), grid, truth

    def _write_selection(self, path: Path, grid: VoxelGrid, selection) -> Path:
        return self.link.write_fit(path, grid, selection.zscores.t, selection.zscores.z,
                                   selection.beta, selection.c, selection.lfdr, selection.groups)

    def _dims(self, args) -> Sequence[int]:
        if getattr(args, "dims", None) is not None:
            return args.dims
        if args.manifest is not None:
            entries = DataLink.parse_manifest_text(Path(args.manifest).read_text())
            if "dims" in entries:
                return _parse_dims(entries["dims"])
        raise UsageError(f"{args.command} needs --dims or a manifest with dims")

    # Commands -----------------------------------------------------------------

    def cmd_synth(self, args) -> int:
        if args.phantom is not None:
            try:
                with open(args.phantom, 'r') as f:
                    base = yaml.safe_load(f) or {}
            except (OSError, yaml.YAMLError) as e:
                raise UsageError(f"cannot read phantom spec {args.phantom}: {e}")
        elif args.preset == "null":
            base = null_phantom_spec().model_dump()
        else:
            base = standard_phantom_spec().model_dump()
        base["seed"] = args.seed
        if args.dims is not None:
            base["dims"] = args.dims
        if args.n_per_class is not None:
            base["n_subjects_per_class"] = args.n_per_class
        if args.noise_sd is not None:
            base["noise_sd"] = args.noise_sd
        if args.lesion_effect is not None:
            for blob in base.get("lesion_blobs", []):
                blob["effect"] = args.lesion_effect
        if args.bias_effect is not None and base.get("bias_shell"):
            base["bias_shell"]["effect"] = args.bias_effect
        try:
            spec = PhantomSpec(**base)
        except ValidationError as e:
            raise UsageError(f"invalid phantom spec: {e}")

        phantom = generate(spec)
        out = self._out_dir(args) if args.out is not None else Path("phantom")
        data_path = out / ("data.f64" if args.format == "raw" else "data.csv")
        if args.format == "raw":
            self.link.write_raw(data_path, phantom.dataset.x)
        else:
            self.link.write_data(data_path, phantom.dataset.x)
        self.link.write_labels(out / "labels.csv", phantom.dataset.y)
        self.link.write_mask(out / "mask.csv", phantom.grid)
        self.link.write_truth(out / "truth.csv", phantom.truth_labels())
        manifest = RunManifest(
            data=data_path, labels=out / "labels.csv", mask=out / "mask.csv", truth=out / "truth.csv",
            dims=spec.dims, connectivity=self._connectivity(args), data_format=args.format,
            params=self.config.fdrhs,
        )
        self.link.write_manifest(out / "manifest.txt", manifest)
        logger.info(f"Phantom written to {out}")
        return 0

    def cmd_fit(self, args) -> int:
        manifest = self._manifest(args)
        params = self._params(args, manifest.params)
        dataset, grid, _ = self._load_inputs(manifest)
        connectivity = self._connectivity(args, manifest)
        out = self._out_dir(args, manifest)

        screening = screen(dataset, grid, self.config, connectivity)
        selection = fit_selection(screening, params, self.config, constant_prior=args.constant_prior)
        self._write_selection(out / f"{args.name}.csv", grid, selection)
        self.link.write_trace(out / f"{args.name}_trace.csv", selection.trace)
        logger.info(f"Fit selected {len(selection.selected)} voxels (converged={selection.converged})")

        if args.folds:
            for k, train in enumerate(training_sets(dataset, args.folds, args.seed)):
                fold = fit_selection(screen(train, grid, self.config, connectivity), params, self.config,
                                     constant_prior=args.constant_prior)
                self._write_selection(out / f"{args.name}_fold{k}.csv", grid, fold)
        return 0

    def cmd_baseline(self, args) -> int:
        manifest = self._manifest(args)
        dataset, grid, _ = self._load_inputs(manifest)
        connectivity = self._connectivity(args, manifest)
        out = self._out_dir(args, manifest)
        level = args.level if args.level is not None else DEFAULT_LEVELS[args.method]
        name = args.name or args.method

        selection = baseline_selection(screen(dataset, grid, self.config, connectivity), args.method, level)
        self._write_selection(out / f"{name}.csv", grid, selection)
        if args.folds:
            for k, train in enumerate(training_sets(dataset, args.folds, args.seed)):
                fold = baseline_selection(screen(train, grid, self.config, connectivity), args.method, level)
                self._write_selection(out / f"{name}_fold{k}.csv", grid, fold)
        return 0

    def cmd_metrics(self, args) -> int:
        if args.fit is None and not args.folds:
            raise UsageError("metrics needs --fit and/or --folds")
        dims = self._dims(args)
        denominator = args.denominator or self.config.metrics.denominator
        limit = self.config.metrics.oracle_limit
        truth_path = args.truth
        if truth_path is None and args.manifest is not None:
            truth_path = self.link.read_manifest(args.manifest, self.config.fdrhs).truth
        rows: List[tuple] = []

        coords = None
        if args.fit is not None:
            selected, z, coords = self.link.read_selection(args.fit)
            grid = VoxelGrid(dims, coords)
            if truth_path is not None:
                rows += truth_rows(selected, z, self.link.read_truth(truth_path, grid.p), grid.p)
            if not args.folds:
                rows += fold_rows(SelectionFolds.from_selections([selected], [z]), grid, denominator, limit)

        if args.folds:
            picks = [self.link.read_selection(path) for path in args.folds]
            reference = coords if coords is not None else picks[0][2]
            for path, (_, _, fold_coords) in zip(args.folds, picks):
                if not np.array_equal(fold_coords, reference):
                    raise DataError(f"mismatched voxel universes: {path} differs from the other fit files")
            grid = VoxelGrid(dims, reference)
            folds = SelectionFolds.from_selections([s for s, _, _ in picks], [z for _, z, _ in picks])
            rows += fold_rows(folds, grid, denominator, limit)

        out = self._out_dir(args)
        self.link.write_metrics(out / "metrics.csv", rows)
        for metric, group, value in rows:
            if metric in ("fdp", "power", "mdc", "eds"):
                logger.info(f"{metric} {group}: {value:.4f}")
        return 0

    def cmd_render(self, args) -> int:
        frame = self.link.read_fit(args.fit)
        render_slice(self._out_dir(args), self._dims(args), frame[["i", "j", "k"]].to_numpy(),
                     frame["group"].to_numpy(), args.axis, args.index)
        return 0

    def cmd_gridsearch(self, args) -> int:
        manifest = self._manifest(args)
        dataset, grid, truth = self._load_inputs(manifest)
        updates = {key: getattr(args, key) for key in
                   ("method", "lambda_pro", "lambda_les", "lambda_proles", "gamma", "thresholds",
                    "objective", "min_power", "folds") if getattr(args, key) is not None}
        try:
            spec = GridSearchSpec(**{**self.config.gridsearch.model_dump(), **updates})
        except ValidationError as e:
            raise UsageError(f"invalid grid: {e}")

        config = self.config.model_copy(update={"fdrhs": manifest.params})
        jobs = args.jobs if args.jobs is not None else self.config.jobs
        if jobs < 1:
            raise UsageError(f"--jobs must be at least 1, got {jobs}")
        report = grid_search(dataset, grid, config, spec, truth, self._connectivity(args, manifest),
                             jobs=jobs, seed=args.seed)
        out = self._out_dir(args, manifest)
        self.link.write_table(out / "gridsearch.csv", report, "grid search report")
        if len(report) and not np.isnan(report.loc[0, "objective"]):
            logger.info(f"Best: {report.iloc[0].drop('rank').to_dict()}")
        return 0

    # Entry --------------------------------------------------------------------

    def run(self, argv: Optional[Sequence[str]] = None) -> int:
        """Parse arguments, run one command and return its exit code."""
        try:
            args = self.build_parser().parse_args(argv)
            self.config = self._load_config(self.config_path or args.config)
            self._setup_logging(args)
            self.link = DataLink(debug=args.debug)
            if args.command is None:
                raise UsageError("a command is required: synth, fit, baseline, metrics, render, gridsearch")
            return getattr(self, f"cmd_{args.command}")(args)
        except FdrHsError as e:
            logger.error(str(e))
            return e.exit_code
        except OSError as e:
            logger.error(f"I/O error: {e}")
            return DataError.exit_code
        except Exception as e:
            logger.exception(f"Unexpected failure: {e}")
            return 3


def main(argv: Optional[Sequence[str]] = None) -> int:
    return FdrHsToolkit().run(argv)


if __name__ == "__main__":
    sys.exit(main())
