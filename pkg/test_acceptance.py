"""
Test script for end-to-end phantom acceptance checks (run with -m slow).
"""

import numpy as np
import pytest

from datalink import DataLink
from main import main
from metrics import SelectionFolds, edge_density_3d, fdp_power, fold_stability
from models import HsParams, ToolkitConfig
from phantom import generate, null_phantom_spec, standard_phantom_spec
from pipeline import baseline_selection, fit_selection, screen, training_sets
from stats import compute_zscores, make_two_groups_model

pytestmark = pytest.mark.slow

CONFIG = ToolkitConfig()
PARAMS = HsParams(lambda_pro=0.5, lambda_les=0.3, lambda_proles=1.0, gamma=0.2)


def fdp_and_power(selection, phantom):
    truth = np.union1d(phantom.lesion, phantom.bias)
    return fdp_power(selection.selected, truth, phantom.grid.p)


def test_empirical_null_recovery():
    hits = 0
    for seed in range(20):
        z = np.random.default_rng(seed).normal(size=20000)
        model = make_two_groups_model(z)
        hits += abs(model.delta0) <= 0.05 and abs(model.sigma0 - 1.0) <= 0.10 and model.cbar <= 0.05
    assert hits >= 18


def test_ttest_count_on_null_phantom():
    phantom = generate(null_phantom_spec(seed=2))
    screening = screen(phantom.dataset, phantom.grid, CONFIG)
    assert abs(len(baseline_selection(screening, "ttest", 0.05).selected) - 500) <= 100


LOCALFDR_LEVELS = np.linspace(0.01, 0.99, 99)


def calibrated_power(curves_fdp, curves_power, target_fdp):
    """Best mean power over levels whose mean FDP does not exceed the target."""
    mean_fdp = np.mean(curves_fdp, axis=0)
    mean_power = np.mean(curves_power, axis=0)
    admissible = mean_fdp <= target_fdp
    return float(mean_power[admissible].max()) if admissible.any() else 0.0


def test_phantom_fdr_power_and_heterogeneity():
    fdps, powers, local_fdps, local_powers = [], [], [], []
    for seed in range(20):
        phantom = generate(standard_phantom_spec(seed=seed))
        screening = screen(phantom.dataset, phantom.grid, CONFIG)
        fit = fit_selection(screening, PARAMS, CONFIG)
        trace = np.asarray(fit.trace)
        assert np.all(np.diff(trace) <= 1e-10) and trace[-1] <= trace[0]

        fdp, power = fdp_and_power(fit, phantom)
        fdps.append(fdp)
        powers.append(power)
        curve = [fdp_and_power(baseline_selection(screening, "localfdr", level), phantom)
                 for level in LOCALFDR_LEVELS]
        local_fdps.append([f for f, _ in curve])
        local_powers.append([p for _, p in curve])

        folds = SelectionFolds.from_selections([fit.selected], [fit.zscores.z])
        eds_plus, eds_minus = edge_density_3d(folds, phantom.grid)
        assert eds_plus > eds_minus

    assert np.mean(fdps) <= 0.25
    assert np.mean(powers) >= calibrated_power(local_fdps, local_powers, np.mean(fdps))


def test_fold_stability_beats_localfdr():
    wins = 0
    for seed in range(5):
        phantom = generate(standard_phantom_spec(seed=100 + seed))
        fits, locals_ = [], []
        for train in training_sets(phantom.dataset, 5, seed):
            screening = screen(train, phantom.grid, CONFIG)
            fits.append(fit_selection(screening, PARAMS, CONFIG))
            locals_.append(baseline_selection(screening, "localfdr", PARAMS.gamma))
        ours = fold_stability(SelectionFolds.from_selections([s.selected for s in fits],
                                                             [s.zscores.z for s in fits]))
        theirs = fold_stability(SelectionFolds.from_selections([s.selected for s in locals_],
                                                               [s.zscores.z for s in locals_]))
        wins += ours["lesion"] >= theirs["lesion"] and ours["bias"] >= theirs["bias"]
    assert wins >= 4


def test_planted_sets_fall_on_their_z_sign_side():
    phantom = generate(standard_phantom_spec(seed=0))
    z = compute_zscores(phantom.dataset).z
    assert np.mean(z[phantom.lesion] > 0) > 0.95
    assert np.mean(z[phantom.bias] <= 0) > 0.9


def test_cli_large_penalties_flatten_prior(tmp_path):
    phantom = tmp_path / "phantom.yaml"
    phantom.write_text("dims: [8, 8, 8]\nn_subjects_per_class: 12\n"
                       "lesion_blobs: [{center: [3, 3, 3], radius: 1.5, effect: 1.5}]\n")
    config = ["--config", str(tmp_path / "none.yaml")]
    assert main(["synth", "--phantom", str(phantom), "--out", str(tmp_path), *config]) == 0
    assert main(["fit", "--manifest", str(tmp_path / "manifest.txt"), "--homogeneous", "1e4", *config]) == 0
    beta = DataLink().read_fit(tmp_path / "fit.csv")["beta"].to_numpy()
    assert np.max(np.abs(beta - beta.mean())) <= 1e-3
