"""
Test script for pipeline orchestration: folds, scoring, ranking and grid search.
"""

import numpy as np
import pandas as pd
import pytest

from errors import DataError, UsageError
from models import BiasShell, GridSearchSpec, LesionBlob, PhantomSpec, ToolkitConfig
from phantom import generate
from pipeline import (_rank, baseline_selection, fit_selection, fold_rows, grid_search, score, screen,
                      stratified_folds, training_sets, truth_rows)
from metrics import SelectionFolds
from voxelgrid import VoxelGrid


@pytest.fixture(scope="module")
def small():
    spec = PhantomSpec(dims=(9, 9, 9), n_subjects_per_class=12,
                       lesion_blobs=[LesionBlob(center=(3, 3, 3), radius=1.5, effect=1.8)],
                       bias_shell=BiasShell(lo=(5, 5, 5), hi=(6, 6, 6), effect=1.5), seed=4)
    phantom = generate(spec)
    return phantom, phantom.truth


def test_stratified_folds_partition_each_class():
    labels = np.array([1] * 7 + [-1] * 8)
    folds = stratified_folds(labels, 3, seed=1)
    assert sorted(np.concatenate(folds).tolist()) == list(range(15))
    for fold in folds:
        assert 2 <= np.sum(labels[fold] == 1) <= 3
        assert 2 <= np.sum(labels[fold] == -1) <= 3
    assert all(np.array_equal(a, b) for a, b in zip(folds, stratified_folds(labels, 3, seed=1)))
    with pytest.raises(UsageError):
        stratified_folds(labels, 1)
    with pytest.raises(DataError):
        stratified_folds(labels, 8)


def test_training_sets_leave_out_one_fold(small):
    phantom, _ = small
    trains = training_sets(phantom.dataset, 4, seed=0)
    assert len(trains) == 4
    assert sum(phantom.dataset.n_subjects - t.n_subjects for t in trains) == phantom.dataset.n_subjects


def test_score_objectives():
    assert score("min-fdp-at-power", 0.1, 0.8, np.nan, 0.5) == 0.1
    assert score("min-fdp-at-power", 0.0, 0.2, np.nan, 0.5) == pytest.approx(1.8)
    assert score("max-mdc", np.nan, np.nan, 0.7, 0.5) == 0.7


def test_rank_puts_failures_last_and_breaks_ties():
    frame = pd.DataFrame({"a": [2.0, 1.0, 3.0, 0.5], "objective": [0.2, 0.2, np.nan, 0.4]})
    ranked = _rank(frame, ["a"], "min-fdp-at-power")
    assert ranked["a"].tolist() == [1.0, 2.0, 0.5, 3.0]
    assert ranked["rank"].tolist() == [1, 2, 3, 4]
    assert _rank(frame, ["a"], "max-mdc")["a"].tolist()[:2] == [0.5, 1.0]


def test_screen_rejects_mismatched_grid(small):
    phantom, _ = small
    with pytest.raises(DataError):
        screen(phantom.dataset, VoxelGrid.full((2, 2, 2)), ToolkitConfig())


def test_truth_and_fold_rows(small):
    phantom, truth = small
    screening = screen(phantom.dataset, phantom.grid, ToolkitConfig())
    selection = fit_selection(screening, ToolkitConfig().fdrhs, ToolkitConfig())
    rows = truth_rows(selection.selected, selection.zscores.z, truth, phantom.grid.p)
    assert [(m, g) for m, g, _ in rows] == [("fdp", "all"), ("power", "all"), ("fdp", "lesion"),
                                            ("power", "lesion"), ("fdp", "bias"), ("power", "bias")]
    folds = SelectionFolds.from_selections([[0, 1], [1, 2]], [np.ones(phantom.grid.p)] * 2)
    names = [(m, g) for m, g, _ in fold_rows(folds, phantom.grid)]
    assert ("mdc", "lesion") in names and ("eds", "bias") in names
    assert ("max_edges_paper", "n=2") in names and ("max_edges_oracle", "n=2") in names


def test_baseline_selection_forms(small):
    phantom, _ = small
    screening = screen(phantom.dataset, phantom.grid, ToolkitConfig())
    bh = baseline_selection(screening, "bh", 0.05)
    assert np.all(np.isnan(bh.beta)) and np.all(np.isnan(bh.c))
    local = baseline_selection(screening, "localfdr", 0.2)
    np.testing.assert_allclose(local.c, screening.model.cbar)
    with pytest.raises(UsageError):
        baseline_selection(screening, "svm", 0.1)


def test_grid_search_enumerates_every_combination(small):
    phantom, truth = small
    spec = GridSearchSpec(lambda_pro=[0.5, 1.0], lambda_les=[0.3], lambda_proles=[1.0, 2.0], gamma=[0.1, 0.2])
    report = grid_search(phantom.dataset, phantom.grid, ToolkitConfig(), spec, truth)
    assert len(report) == 2 * 1 * 2 * 2
    objective = report["objective"].to_numpy()
    assert np.all(np.diff(objective[~np.isnan(objective)]) >= 0)


def test_grid_search_penalty_failure_becomes_nan_row(small):
    phantom, truth = small
    spec = GridSearchSpec(lambda_pro=[0.0, 0.5], lambda_les=[0.3], lambda_proles=[1.0], gamma=[0.2])
    report = grid_search(phantom.dataset, phantom.grid, ToolkitConfig(), spec, truth)
    assert len(report) == 2
    assert np.isnan(report["objective"].iloc[-1]) and report["lambda_pro"].iloc[-1] == 0.0


def test_grid_search_baseline_and_mdc(small):
    phantom, _ = small
    spec = GridSearchSpec(method="bh", thresholds=[0.01, 0.05], objective="max-mdc", folds=3)
    report = grid_search(phantom.dataset, phantom.grid, ToolkitConfig(), spec, None)
    assert report["threshold"].tolist() in ([0.01, 0.05], [0.05, 0.01])
    assert report["mdc"].between(0, 1).all()
    with pytest.raises(UsageError):
        grid_search(phantom.dataset, phantom.grid, ToolkitConfig(), GridSearchSpec(method="bh"), None)
