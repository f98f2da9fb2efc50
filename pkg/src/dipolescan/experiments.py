"""Seed-deterministic experiment batches behind the command-line runner.

Each runner builds its own scenarios and grids from ``(seed, stream tag,
instance index)`` substreams, certifies the relevant identities or
inequalities at the configured tolerances, and returns a uniform outcome
carrying the per-instance CSV detail and a JSON-ready summary.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import certify
from .beamformers import attach_beamformer_powers
from .forward import (
    Candidate,
    CandidateGrid,
    _mask_seed,
    analytic_covariance,
    random_grid,
    random_leadfield,
    random_scenario,
    random_spd,
    recover_source_direction,
    sample_covariance,
    simulate_samples,
)
from .linalg import Metric, identity_metric, metric_norm_sq, psd_power
from .scanning import (
    MetricRecipe,
    build_metric,
    gof,
    scan,
    sloreta_power,
    solve_eloreta_weights,
)

_TAG_THM1 = 101
_TAG_THM2_SUFF = 102
_TAG_THM2_WIT = 103
_TAG_THM4 = 104
_TAG_THM4_GRID = 105
_TAG_THM5 = 106
_TAG_GRADCHECK = 107
_TAG_ELORETA = 108


def thread_count() -> int:
    """Parallelism cap from TOOL_THREADS; unset means serial, 0 means auto."""
    raw = os.environ.get("TOOL_THREADS", "").strip()
    if not raw:
        return 1
    try:
        value = int(raw)
    except ValueError as err:
        raise ValueError("TOOL_THREADS must be an integer") from err
    if value < 0:
        raise ValueError("TOOL_THREADS must be nonnegative")
    if value == 0:
        return os.cpu_count() or 1
    return value


def parallel_map(fn, items):
    """Order-preserving map honoring the TOOL_THREADS cap."""
    items = list(items)
    threads = thread_count()
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _sub_seed(seed: int, tag: int, index: int) -> int:
    rng = np.random.default_rng([_mask_seed(seed), tag, index])
    return int(rng.integers(0, 2**63 - 1))


def _first_failure(header: list, rows: list, bad) -> dict | None:
    """First offending CSV row, keyed by column, for failure diagnostics."""
    for row in rows:
        if bad(row):
            return dict(zip(header, row))
    return None


@dataclass
class ExperimentOutcome:
    """Uniform result of one experiment run."""

    experiment: str
    seed: int
    instances: int
    tolerance: float | None
    max_deviation: float | None
    passed: bool
    summary: str
    csv_header: list[str] = field(default_factory=list)
    csv_rows: list[list] = field(default_factory=list)
    details: dict = field(default_factory=dict)
    csv_text: str | None = None
    artifacts: dict = field(default_factory=dict)


_THM1_RECIPES = (
    ("identity", 0.0),
    ("classic_sloreta", 0.0),
    ("classic_sloreta", 0.1),
    ("sekihara_sloreta", 0.1),
    ("eloreta", 0.1),
)


def run_thm1(
    seed: int,
    sensors: int,
    grid_size: int = 20,
    instances: int = 100,
    tolerance: float = 1e-10,
) -> ExperimentOutcome:
    """Standardized power equals data power times goodness of fit.

    Cycles the metric recipes over seeded (complete leadfield, candidate,
    data) triples and reports the largest relative deviation.
    """
    blocks = max(grid_size, 2)

    def one(index: int):
        kind, alpha = _THM1_RECIPES[index % len(_THM1_RECIPES)]
        rng = np.random.default_rng([_mask_seed(seed), _TAG_THM1, index])
        complete = np.hstack(
            [random_leadfield(rng, sensors, 3) for _ in range(blocks)]
        )
        candidate = random_leadfield(rng, sensors, 3)
        data = rng.standard_normal(sensors)
        metric = build_metric(MetricRecipe(kind, alpha), sensors, complete)
        power = sloreta_power(metric, candidate, data)
        data_power = metric_norm_sq(metric, data)
        expected = data_power * gof(metric, candidate, data)
        deviation = abs(power - expected) / data_power
        return [index, kind, repr(alpha), repr(deviation)], deviation

    results = parallel_map(one, range(instances))
    rows = [row for row, _ in results]
    max_dev = max(dev for _, dev in results)
    passed = max_dev <= tolerance
    header = ["instance", "recipe", "alpha", "relative_deviation"]
    details = {"recipes": [f"{kind}(alpha={alpha})" for kind, alpha in _THM1_RECIPES]}
    if not passed:
        details["first_failure"] = _first_failure(
            header, rows, lambda row: float(row[3]) > tolerance
        )
    return ExperimentOutcome(
        experiment="thm1",
        seed=seed,
        instances=instances,
        tolerance=tolerance,
        max_deviation=max_dev,
        passed=passed,
        summary=f"thm1: max relative deviation {max_dev:.3e} (tol {tolerance:.1e})",
        csv_header=header,
        csv_rows=rows,
        details=details,
    )


def run_thm2_sufficiency(
    seed: int,
    sensors: int,
    grid_size: int = 50,
    instances: int = 20,
    noise: str = "random_spd",
    noise_sigma: float = 1.0,
    noise_cov=None,
) -> ExperimentOutcome:
    """Whitening metrics make the analytic expected-misfit scan unbiased."""

    def one(index: int):
        sub = _sub_seed(seed, _TAG_THM2_SUFF, index)
        scenario = random_scenario(
            sub, sensors, noise=noise, noise_sigma=noise_sigma, noise_cov=noise_cov
        )
        grid = random_grid(sub, sensors, grid_size, include=scenario.leadfield)
        report = certify.theorem2_sufficiency_experiment(scenario, grid)
        rows = [
            [index, sub, repr(res.alpha), res.argmin_id, res.at_true, repr(res.margin)]
            for res in report.per_alpha
        ]
        return rows, report.passed, min(res.margin for res in report.per_alpha)

    results = parallel_map(one, range(instances))
    header = ["instance", "instance_seed", "alpha", "argmin_id", "at_true", "margin"]
    rows = [row for batch, _, _ in results for row in batch]
    all_passed = all(ok for _, ok, _ in results)
    min_margin = min(margin for _, _, margin in results)
    details = {"alphas": [0.5, 1.0, 2.0], "min_margin": min_margin}
    if not all_passed:
        details["first_failure"] = _first_failure(
            header, rows, lambda row: not row[4] or float(row[5]) <= 0.0
        )
    return ExperimentOutcome(
        experiment="thm2-sufficiency",
        seed=seed,
        instances=instances,
        tolerance=0.0,
        max_deviation=None,
        passed=all_passed,
        summary=(
            f"thm2-sufficiency: argmin at truth on {instances} grids, "
            f"min margin {min_margin:.3e}"
        ),
        csv_header=header,
        csv_rows=rows,
        details=details,
    )


def run_thm2_witness(
    seed: int,
    sensors: int,
    instances: int = 20,
    metric_kind: str = "mixed",
) -> ExperimentOutcome:
    """Non-whitening metrics admit explicit bias witnesses; whitening refuses.

    ``metric_kind`` selects the scan metric: ``identity``, ``explicit``
    (a random SPD matrix per instance), ``mixed`` (alternating the two), or
    ``inverse_noise`` to certify that the witness search refuses throughout.
    """
    refusal_only = metric_kind == "inverse_noise"

    def one(index: int):
        sub = _sub_seed(seed, _TAG_THM2_WIT, index)
        scenario = random_scenario(sub, sensors, noise="random_spd")
        rng = np.random.default_rng([_mask_seed(seed), _TAG_THM2_WIT, index, 1])
        if metric_kind == "identity" or (metric_kind == "mixed" and index % 2 == 0):
            metric = identity_metric(sensors)
            used = "identity"
        elif metric_kind in ("explicit", "mixed"):
            metric = Metric.from_matrix(random_spd(rng, sensors))
            used = "explicit"
        elif refusal_only:
            metric = Metric.from_matrix(scenario.noise_inverse)
            used = "inverse_noise"
        else:
            raise ValueError(f"unknown metric kind {metric_kind!r}")

        whitening_metric = Metric.from_matrix(scenario.noise_inverse)
        try:
            certify.theorem2_necessity_witness(scenario, whitening_metric)
            refusal_ok = False
        except ValueError:
            refusal_ok = True

        if refusal_only:
            try:
                certify.theorem2_necessity_witness(scenario, metric)
                ok = False
            except ValueError:
                ok = True
            return [index, sub, used, "refused", ok, ""], ok, 0.0

        witness = certify.theorem2_necessity_witness(scenario, metric)
        ok = witness.found and witness.improvement > 0.0 and witness.rv_drop > 0.0 and refusal_ok
        return (
            [index, sub, used, witness.message, ok, repr(witness.improvement)],
            ok,
            witness.improvement,
        )

    results = parallel_map(one, range(instances))
    header = ["instance", "instance_seed", "metric", "status", "ok", "improvement"]
    rows = [row for row, _, _ in results]
    all_ok = all(ok for _, ok, _ in results)
    min_improvement = min(imp for _, _, imp in results)
    details = {"metric_kind": metric_kind}
    if not all_ok:
        details["first_failure"] = _first_failure(header, rows, lambda row: not row[4])
    if refusal_only:
        summary = f"thm2-witness: whitening metric refused on all {instances} instances"
    else:
        summary = (
            f"thm2-witness: witnesses with positive improvement on {instances} "
            f"instances (min improvement {min_improvement:.3e})"
        )
    return ExperimentOutcome(
        experiment="thm2-witness",
        seed=seed,
        instances=instances,
        tolerance=0.0,
        max_deviation=None,
        passed=all_ok,
        summary=summary,
        csv_header=header,
        csv_rows=rows,
        details=details,
    )


def run_gradcheck(
    seed: int,
    sensors: int,
    instances: int = 100,
    metric_kind: str = "explicit",
    tolerance: float = 1e-5,
    zero_tolerance: float = 1e-8,
) -> ExperimentOutcome:
    """Analytic noise-distortion gradient versus central finite differences.

    With ``metric_kind='inverse_noise'`` the functional is constant and the
    analytic gradient must vanish relative to its cancellation scale.
    """
    if metric_kind not in ("identity", "explicit", "inverse_noise"):
        raise ValueError(f"gradcheck does not support metric kind {metric_kind!r}")
    whitening = metric_kind == "inverse_noise"

    def one(index: int):
        rng = np.random.default_rng([_mask_seed(seed), _TAG_GRADCHECK, index])
        noise = random_spd(rng, sensors)
        candidate = random_leadfield(rng, sensors, 3)
        direction = rng.standard_normal((sensors, 3))
        if whitening:
            metric = psd_power(Metric.from_matrix(noise), -1.0)
            grad = certify.noise_distortion_gradient(metric, candidate, noise, direction)
            scale = certify.gradient_terms_scale(metric, candidate, noise, direction)
            deviation = abs(grad) / scale
        else:
            if metric_kind == "identity":
                metric = identity_metric(sensors)
            else:
                metric = Metric.from_matrix(random_spd(rng, sensors))
            grad = certify.noise_distortion_gradient(metric, candidate, noise, direction)
            fd = certify.central_difference_gradient(metric, candidate, noise, direction)
            deviation = abs(grad - fd) / max(abs(grad), abs(fd))
        return [index, repr(grad), repr(deviation)], deviation

    results = parallel_map(one, range(instances))
    header = ["instance", "gradient", "deviation"]
    rows = [row for row, _ in results]
    max_dev = max(dev for _, dev in results)
    tol = zero_tolerance if whitening else tolerance
    passed = max_dev <= tol
    mode = "zero-gradient" if whitening else "finite-difference"
    details = {"mode": mode}
    if not passed:
        details["first_failure"] = _first_failure(
            header, rows, lambda row: float(row[2]) > tol
        )
    return ExperimentOutcome(
        experiment="gradcheck",
        seed=seed,
        instances=instances,
        tolerance=tol,
        max_deviation=max_dev,
        passed=passed,
        summary=f"gradcheck ({mode}): max deviation {max_dev:.3e} (tol {tol:.1e})",
        csv_header=header,
        csv_rows=rows,
        details=details,
    )


def run_thm4(
    seed: int,
    sensors: int,
    grid_size: int = 20,
    k_max: int = 4,
    instances: int = 200,
    argmax_grids: int = 10,
    tolerance: float = 1e-9,
    transform_tolerance: float = 1e-9,
) -> ExperimentOutcome:
    """Beamformer powers are monotone transforms of the whitened fit.

    Identity deviations are normalized by ``1 + snr`` per instance; the
    argmax and pairwise-ordering agreement is checked on seeded grids that
    contain the true leadfield.
    """
    def identity_instance(index: int):
        sub = _sub_seed(seed, _TAG_THM4, index)
        scenario = random_scenario(sub, sensors, noise="random_spd")
        k = (index % k_max) + 1
        rng = np.random.default_rng([_mask_seed(seed), _TAG_THM4, index, 1])
        candidate = random_leadfield(rng, sensors, k)
        grid = CandidateGrid(
            candidates=(Candidate("cand-000", candidate),), sensor_count=sensors
        )
        report = certify.theorem4_certification(scenario, grid, tol=tolerance)
        check = report.checks[0]
        scale = 1.0 + report.constants.snr
        return (
            [
                "identity",
                index,
                sub,
                k,
                repr(check.gof),
                repr(check.nai_deviation / scale),
                repr(check.sam_deviation / scale),
                repr(check.transform_deviation),
            ],
            check.nai_deviation / scale,
            check.sam_deviation / scale,
            check.transform_deviation,
            True,
        )

    def grid_instance(index: int):
        sub = _sub_seed(seed, _TAG_THM4_GRID, index)
        scenario = random_scenario(sub, sensors, noise="random_spd")
        grid = random_grid(sub, sensors, grid_size, include=scenario.leadfield)
        report = certify.theorem4_certification(scenario, grid, tol=tolerance)
        scale = 1.0 + report.constants.snr
        nai_dev = report.max_nai_deviation / scale
        sam_dev = report.max_sam_deviation / scale
        agreement = (
            report.argmax_consistent
            and report.ordering_consistent
            and report.argmax_at_true is True
        )
        return (
            [
                "grid",
                index,
                sub,
                3,
                repr(min(check.gof for check in report.checks)),
                repr(nai_dev),
                repr(sam_dev),
                repr(report.max_transform_deviation),
            ],
            nai_dev,
            sam_dev,
            report.max_transform_deviation,
            agreement,
        )

    identity_results = parallel_map(identity_instance, range(instances))
    grid_results = parallel_map(grid_instance, range(argmax_grids))
    all_results = identity_results + grid_results
    header = [
        "part",
        "instance",
        "instance_seed",
        "k",
        "gof",
        "nai_deviation",
        "sam_deviation",
        "transform_deviation",
    ]
    rows = [item[0] for item in all_results]
    max_identity_dev = max(max(item[1], item[2]) for item in all_results)
    max_transform_dev = max(item[3] for item in all_results)
    agreement = all(item[4] for item in all_results)
    passed = (
        max_identity_dev <= tolerance
        and max_transform_dev <= transform_tolerance
        and agreement
    )
    details = {
        "max_transform_deviation": max_transform_dev,
        "argmax_agreement": agreement,
    }
    if not passed:
        details["first_failure"] = _first_failure(
            header,
            rows,
            lambda row: float(row[5]) > tolerance
            or float(row[6]) > tolerance
            or float(row[7]) > transform_tolerance,
        )
    return ExperimentOutcome(
        experiment="thm4",
        seed=seed,
        instances=instances + argmax_grids,
        tolerance=tolerance,
        max_deviation=max_identity_dev,
        passed=passed,
        summary=(
            f"thm4: max normalized identity deviation {max_identity_dev:.3e}, "
            f"max transform deviation {max_transform_dev:.3e}, "
            f"argmax/ordering agreement {agreement}"
        ),
        csv_header=header,
        csv_rows=rows,
        details=details,
    )


def run_thm5(
    seed: int,
    sensors: int,
    instances: int = 50,
    min_refine_rate: float = 0.9,
) -> ExperimentOutcome:
    """Trace-ratio power bias: constructions must strictly beat the truth."""

    def one(index: int):
        sub = _sub_seed(seed, _TAG_THM5, index)
        scenario = random_scenario(sub, sensors, noise="random_spd")
        built = certify.theorem5_bias_construction(scenario)
        trace_exact = built.trace_inv_sq_before == built.trace_inv_sq_after
        strict = built.nai_after > built.nai_before
        refined = built.refined_leadfield is not None
        row = [
            index,
            sub,
            repr(built.nai_before),
            repr(built.nai_after),
            trace_exact,
            refined,
        ]
        return row, strict and trace_exact, refined

    results = parallel_map(one, range(instances))
    header = [
        "instance",
        "instance_seed",
        "nai_before",
        "nai_after",
        "trace_exact",
        "refined",
    ]
    rows = [row for row, _, _ in results]
    all_strict = all(ok for _, ok, _ in results)
    refine_rate = sum(1 for _, _, refined in results if refined) / instances
    passed = all_strict and refine_rate >= min_refine_rate
    details = {"refine_rate": refine_rate}
    if not passed:
        details["first_failure"] = _first_failure(
            header,
            rows,
            lambda row: not row[4] or not float(row[3]) > float(row[2]),
        )
    return ExperimentOutcome(
        experiment="thm5",
        seed=seed,
        instances=instances,
        tolerance=min_refine_rate,
        max_deviation=None,
        passed=passed,
        summary=(
            f"thm5: strict bias with exact trace on {instances} instances, "
            f"refinement rate {refine_rate:.2f}"
        ),
        csv_header=header,
        csv_rows=rows,
        details=details,
    )


def run_eloreta(
    seed: int,
    sensors: int,
    max_blocks: int = 10,
    instances: int = 20,
    tolerance: float = 1e-9,
) -> ExperimentOutcome:
    """Fixed-point weights satisfy their defining equation at the tolerance."""

    def one(index: int):
        rng = np.random.default_rng([_mask_seed(seed), _TAG_ELORETA, index])
        blocks = (index % max_blocks) + 1
        alpha = 0.0 if index % 2 == 0 else 0.1
        complete = np.hstack([random_leadfield(rng, sensors, 3) for _ in range(blocks)])
        weights = solve_eloreta_weights(complete, alpha, tol=tolerance)
        ok = weights.converged and weights.residual <= tolerance
        return (
            [index, blocks, repr(alpha), repr(weights.residual), weights.iterations, ok],
            ok,
            weights.residual,
        )

    results = parallel_map(one, range(instances))
    rows = [row for row, _, _ in results]
    all_ok = all(ok for _, ok, _ in results)
    max_residual = max(res for _, _, res in results)

    trivial = solve_eloreta_weights(np.eye(3), 0.0, tol=tolerance)
    trivial_exact = trivial.converged and np.array_equal(trivial.blocks[0], np.eye(3))
    rows.append(["trivial", 1, repr(0.0), repr(trivial.residual), trivial.iterations, trivial_exact])

    passed = all_ok and trivial_exact
    header = ["instance", "blocks", "alpha", "residual", "iterations", "ok"]
    details = {"trivial_exact": trivial_exact}
    if not passed:
        details["first_failure"] = _first_failure(header, rows, lambda row: not row[5])
    return ExperimentOutcome(
        experiment="eloreta",
        seed=seed,
        instances=instances + 1,
        tolerance=tolerance,
        max_deviation=max_residual,
        passed=passed,
        summary=(
            f"eloreta: max fixed-point residual {max_residual:.3e} (tol {tolerance:.1e}), "
            f"trivial case exact {trivial_exact}"
        ),
        csv_header=header,
        csv_rows=rows,
        details=details,
    )


def run_scan(
    seed: int,
    sensors: int,
    grid_size: int = 20,
    k: int = 3,
    metric_kind: str = "inverse_noise",
    alpha: float = 0.0,
    noise: str = "random_spd",
    noise_sigma: float = 1.0,
    noise_cov=None,
    metric_matrix=None,
) -> ExperimentOutcome:
    """End-to-end scan of a covariance-derived data vector with beamformer columns."""
    scenario = random_scenario(
        seed, sensors, noise=noise, noise_sigma=noise_sigma, noise_cov=noise_cov
    )
    pair = analytic_covariance(scenario)
    data = recover_source_direction(pair)
    if k == 3:
        truth = scenario.leadfield
    elif k == 1:
        truth = (scenario.leadfield @ scenario.orientation)[:, None]
    else:
        raise ValueError("scan candidates must have one or three columns")
    grid = random_grid(seed, sensors, grid_size, k=k, include=truth)
    if metric_kind == "inverse_noise":
        recipe = MetricRecipe(metric_kind, alpha, scenario.noise_cov)
    elif metric_kind == "explicit":
        recipe = MetricRecipe(metric_kind, alpha, metric_matrix)
    else:
        recipe = MetricRecipe(metric_kind, alpha)
    metric = build_metric(recipe, sensors, grid.complete_leadfield())
    report = scan(metric, grid, data)
    attach_beamformer_powers(report, grid, pair.signal_inverse, pair.noise_inverse, pair.noise_cov)
    flagged = sum(1 for row in report.rows if row.flag)
    passed = flagged == 0
    at_true = report.argmax_id == "truth"
    return ExperimentOutcome(
        experiment="scan",
        seed=seed,
        instances=len(report.rows),
        tolerance=None,
        max_deviation=None,
        passed=passed,
        summary=(
            f"scan: argmax {report.argmax_id!r} (at truth: {at_true}), "
            f"{flagged} flagged candidates"
        ),
        csv_text=report.to_csv_text(),
        details=report.to_json_dict(),
    )


def run_simulate(
    seed: int,
    sensors: int,
    samples: int = 20000,
    noise: str = "random_spd",
    noise_sigma: float = 1.0,
    noise_cov=None,
    tolerance: float = 0.05,
) -> ExperimentOutcome:
    """Draw seeded samples and cross-check their covariance analytically.

    The default tolerance matches the default sample count; scale it like
    ``1/sqrt(samples)`` when overriding the count.
    """
    scenario = random_scenario(
        seed, sensors, noise=noise, noise_sigma=noise_sigma, noise_cov=noise_cov
    )
    data = simulate_samples(scenario, samples)
    est = sample_covariance(data)
    pair = analytic_covariance(scenario)
    rel_err = float(
        np.linalg.norm(est.matrix - pair.signal_moment) / np.linalg.norm(pair.signal_moment)
    )
    passed = rel_err <= tolerance and est.full_rank
    return ExperimentOutcome(
        experiment="simulate",
        seed=seed,
        instances=samples,
        tolerance=tolerance,
        max_deviation=rel_err,
        passed=passed,
        summary=(
            f"simulate: covariance relative error {rel_err:.3e} over {samples} samples "
            f"(tol {tolerance:.2e})"
        ),
        csv_header=["samples", "relative_error", "full_rank"],
        csv_rows=[[samples, repr(rel_err), est.full_rank]],
        details={"full_rank": est.full_rank},
        artifacts={"samples": data},
    )
