"""Acceptance gate: one test per certified claim, at the pinned tolerances.

Run with ``pytest tests/test_acceptance.py -v -s`` to see one summary line
per criterion.
"""

import numpy as np
import pytest

from dipolescan import cli, experiments
from dipolescan.forward import random_grid, random_leadfield, random_scenario, random_spd, simulate_samples
from dipolescan.linalg import Metric, identity_metric
from dipolescan.scanning import MetricRecipe, build_metric, scan
from dipolescan.certify import expected_power_terms

SEED = 1


def _report(number: int, name: str, passed: bool, detail: str) -> None:
    status = "PASS" if passed else "FAIL"
    print(f"ACCEPTANCE {number:2d} {name}: {status} ({detail})")
    assert passed, f"criterion {number} ({name}) failed: {detail}"


@pytest.fixture(scope="module")
def thm4_outcome():
    return experiments.run_thm4(SEED, 8)


def test_criterion_1_sloreta_scan_identity():
    outcome = experiments.run_thm1(SEED, 8, grid_size=20, instances=100, tolerance=1e-10)
    _report(
        1,
        "standardized-power identity over metric recipes",
        outcome.passed,
        f"max relative deviation {outcome.max_deviation:.3e} <= 1e-10",
    )


def test_criterion_2_noiseless_reconstruction():
    recipes = (
        MetricRecipe("identity"),
        MetricRecipe("classic_sloreta", 0.0),
        MetricRecipe("classic_sloreta", 0.1),
        MetricRecipe("sekihara_sloreta", 0.1),
        MetricRecipe("eloreta", 0.1),
        MetricRecipe("inverse_noise"),
    )
    worst_gap = 0.0
    all_at_truth = True
    for index in range(50):
        scenario = random_scenario(10_000 + index, 8, noise="random_spd")
        data = scenario.leadfield @ scenario.orientation
        grid = random_grid(10_000 + index, 8, 15, include=scenario.leadfield)
        complete = grid.complete_leadfield()
        for recipe in recipes:
            if recipe.kind == "inverse_noise":
                recipe = MetricRecipe(recipe.kind, recipe.alpha, scenario.noise_cov)
            metric = build_metric(recipe, 8, complete)
            report = scan(metric, grid, data)
            truth_row = report.rows[grid.index_of("truth")]
            worst_gap = max(worst_gap, abs(truth_row.gof - 1.0))
            all_at_truth = all_at_truth and report.argmax_id == "truth"
    passed = all_at_truth and worst_gap <= 1e-12
    _report(
        2,
        "noiseless dipolar reconstruction",
        passed,
        f"argmax at truth on 50x6 scans, worst |GOF-1| {worst_gap:.3e} <= 1e-12",
    )


def test_criterion_3_whitening_sufficiency():
    outcome = experiments.run_thm2_sufficiency(SEED, 8, grid_size=50, instances=20)
    _report(
        3,
        "whitening metrics localize the truth in expectation",
        outcome.passed,
        f"min argmin margin {outcome.details['min_margin']:.3e} > 0 over 20 grids x 3 alphas",
    )


def test_criterion_4_necessity_witnesses():
    outcome = experiments.run_thm2_witness(SEED, 8, instances=20, metric_kind="mixed")
    refusals = experiments.run_thm2_witness(SEED, 8, instances=5, metric_kind="inverse_noise")
    passed = outcome.passed and refusals.passed
    _report(
        4,
        "non-whitening bias witnesses (and whitening refusal)",
        passed,
        "20/20 witnesses with positive improvement; whitening search refused",
    )


def test_criterion_5_gradient_certification():
    fd = experiments.run_gradcheck(SEED, 8, instances=100, metric_kind="explicit")
    zero = experiments.run_gradcheck(SEED, 8, instances=100, metric_kind="inverse_noise")
    passed = fd.passed and zero.passed
    _report(
        5,
        "noise-distortion gradient vs central differences",
        passed,
        f"max FD deviation {fd.max_deviation:.3e} <= 1e-5; "
        f"max whitening gradient {zero.max_deviation:.3e} <= 1e-8 scale",
    )


def test_criterion_6_beamformer_transfer_identities(thm4_outcome):
    _report(
        6,
        "beamformer power transfer identities and joint argmax",
        thm4_outcome.passed,
        f"max normalized deviation {thm4_outcome.max_deviation:.3e} <= 1e-9 "
        f"over 200 instances + 10 grids; argmax agreement "
        f"{thm4_outcome.details['argmax_agreement']}",
    )


def test_criterion_7_monotone_equivalence(thm4_outcome):
    passed = (
        thm4_outcome.details["argmax_agreement"]
        and thm4_outcome.details["max_transform_deviation"] <= 1e-9
    )
    _report(
        7,
        "NAI/SAM/GOF monotone equivalence and transform",
        passed,
        f"pairwise orderings identical; max transform deviation "
        f"{thm4_outcome.details['max_transform_deviation']:.3e} <= 1e-9",
    )


def test_criterion_8_trace_ratio_bias():
    outcome = experiments.run_thm5(SEED, 8, instances=50, min_refine_rate=0.9)
    _report(
        8,
        "trace-ratio power bias construction",
        outcome.passed,
        f"strict increase with exact trace on 50 instances, refinement rate "
        f"{outcome.details['refine_rate']:.2f} >= 0.90",
    )


def test_criterion_9_eloreta_fixed_point():
    outcome = experiments.run_eloreta(SEED, 8, max_blocks=10, instances=20, tolerance=1e-9)
    _report(
        9,
        "reweighted-metric fixed point",
        outcome.passed,
        f"max residual {outcome.max_deviation:.3e} <= 1e-9, trivial case exact "
        f"{outcome.details['trivial_exact']}",
    )


def test_criterion_10_monte_carlo_consistency():
    worst_z = 0.0
    for index in range(5):
        scenario = random_scenario(20_000 + index, 8, noise="random_spd")
        rng = np.random.default_rng(index)
        candidate = random_leadfield(rng, 8, 3)
        if index % 3 == 0:
            metric = identity_metric(8)
        elif index % 3 == 1:
            metric = Metric.from_matrix(random_spd(rng, 8))
        else:
            metric = Metric.from_matrix(scenario.noise_inverse)
        objective = expected_power_terms(metric, candidate, scenario)
        samples = simulate_samples(scenario, 50_000)
        white_lead = metric.sqrt_apply(candidate)
        vals, vecs = np.linalg.eigh(white_lead.T @ white_lead)
        mapping = (vecs / np.sqrt(vals)) @ vecs.T @ candidate.T @ metric.matrix
        powers = np.sum((mapping @ samples) ** 2, axis=0)
        stderr = powers.std(ddof=1) / np.sqrt(powers.size)
        worst_z = max(worst_z, abs(powers.mean() - objective.total) / stderr)
    passed = worst_z <= 5.0
    _report(
        10,
        "Monte Carlo consistency of the analytic expectation",
        passed,
        f"worst |z| {worst_z:.2f} <= 5 over 5 scenarios at 50000 samples",
    )


def test_criterion_11_determinism(tmp_path):
    identical = True
    for experiment, extra in (("scan", []), ("simulate", ["-samples.txt"])):
        cfg = tmp_path / f"{experiment}.cfg"
        cfg.write_text(
            f"experiment = {experiment}\nseed = 2\nsensors = 6\ngrid_size = 5\n"
            "samples = 256\ntol.sample_cov = 1.0\n"
        )
        assert cli.main(["run", "--config", str(cfg), "--out-dir", str(tmp_path / "a")]) == 0
        assert cli.main(["run", "--config", str(cfg), "--out-dir", str(tmp_path / "b")]) == 0
        names = [f"{experiment}-2.json", f"{experiment}-2.csv"]
        names += [f"{experiment}-2{suffix}" for suffix in extra]
        for name in names:
            if (tmp_path / "a" / name).read_bytes() != (tmp_path / "b" / name).read_bytes():
                identical = False
    _report(
        11,
        "re-run determinism of experiment reports",
        identical,
        "scan and simulate reports byte-identical across re-runs",
    )
