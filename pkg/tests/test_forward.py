import numpy as np
import pytest

from dipolescan.forward import (
    Candidate,
    CandidateGrid,
    CovariancePair,
    SourceScenario,
    analytic_covariance,
    random_grid,
    random_leadfield,
    random_scenario,
    recover_source_direction,
    sample_covariance,
    simulate_samples,
)


def _scenario(seed=0, n=8, **kwargs):
    return random_scenario(seed, n, **kwargs)


class TestSourceScenario:
    def test_orientation_must_be_unit(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError, match="unit norm"):
            SourceScenario(
                leadfield=random_leadfield(rng, 5),
                orientation=np.array([1.0, 1.0, 0.0]),
                source_power=1.0,
                noise_cov=np.eye(5),
                seed=0,
            )

    def test_noise_must_be_spd(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError, match="positive definite"):
            SourceScenario(
                leadfield=random_leadfield(rng, 5),
                orientation=np.array([1.0, 0.0, 0.0]),
                source_power=1.0,
                noise_cov=np.diag([1.0, 1.0, 1.0, 1.0, 0.0]),
                seed=0,
            )

    def test_source_power_positive(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError, match="positive"):
            SourceScenario(
                leadfield=random_leadfield(rng, 5),
                orientation=np.array([1.0, 0.0, 0.0]),
                source_power=0.0,
                noise_cov=np.eye(5),
                seed=0,
            )

    def test_effective_source_formula(self):
        sc = _scenario(3, 6, source_power=4.0)
        expected = 2.0 * sc.leadfield @ sc.orientation
        assert np.allclose(sc.effective_source, expected, rtol=1e-14)


class TestSimulateSamples:
    def test_deterministic(self):
        sc = _scenario(5)
        first = simulate_samples(sc, 300)
        second = simulate_samples(sc, 300)
        assert np.array_equal(first, second)

    def test_zero_signal_limit(self):
        # amplitude forced to (numerically) zero: columns are pure noise
        sc = _scenario(6, 8, source_power=1e-300)
        t = 4096
        data = simulate_samples(sc, t)
        bound = 5.0 / np.sqrt(t) * np.sqrt(np.max(np.diagonal(sc.noise_cov)))
        assert np.max(np.abs(data.mean(axis=1))) <= bound

    def test_near_noiseless_columns_span_gain(self):
        rng = np.random.default_rng(7)
        sc = SourceScenario(
            leadfield=random_leadfield(rng, 6),
            orientation=np.array([1.0, 0.0, 0.0]),
            source_power=1.0,
            noise_cov=1e-20 * np.eye(6),
            seed=7,
        )
        data = simulate_samples(sc, 50)
        gain = sc.leadfield @ sc.orientation
        unit = gain / np.linalg.norm(gain)
        residual = data - np.outer(unit, unit @ data)
        # relative to the RMS column norm: columns with near-zero amplitude
        # draws carry the same absolute noise floor as the others
        rms = np.sqrt(np.mean(np.linalg.norm(data, axis=0) ** 2))
        assert np.all(np.linalg.norm(residual, axis=0) <= 1e-8 * rms)

    def test_second_moment_within_5_se_seed42(self):
        sc = _scenario(42, 8)
        t = 10000
        data = simulate_samples(sc, t)
        pair = analytic_covariance(sc)
        products = data[:, None, :] * data[None, :, :]
        empirical = products.mean(axis=2)
        se = products.std(axis=2, ddof=1) / np.sqrt(t)
        assert np.all(np.abs(empirical - pair.signal_moment) <= 5.0 * se)

    def test_sample_count_positive(self):
        with pytest.raises(ValueError, match="positive"):
            simulate_samples(_scenario(1), 0)


class TestAnalyticCovariance:
    def test_identity_leadfield_case(self):
        # three sensors, source along e1 with unit power: R = diag(2, 1, 1)
        sc = SourceScenario(
            leadfield=np.eye(3),
            orientation=np.array([1.0, 0.0, 0.0]),
            source_power=1.0,
            noise_cov=np.eye(3),
            seed=0,
        )
        pair = analytic_covariance(sc)
        assert np.array_equal(pair.signal_moment, np.diag([2.0, 1.0, 1.0]))

    def test_rank_one_residual(self):
        pair = analytic_covariance(_scenario(9, 7))
        svals = np.linalg.svd(pair.signal_moment - pair.noise_cov, compute_uv=False)
        assert svals[1] <= 1e-12 * svals[0]

    def test_exact_relation_recorded(self):
        pair = analytic_covariance(_scenario(10, 6))
        x = pair.effective_source
        assert np.array_equal(pair.signal_moment, pair.noise_cov + np.outer(x, x))

    def test_top_whitened_eigenvector_parallel_to_source_seed5(self):
        sc = _scenario(5, 8)
        pair = analytic_covariance(sc)
        direction = recover_source_direction(pair)
        x_unit = sc.effective_source / np.linalg.norm(sc.effective_source)
        # norm of the rejection = sine of the angle, resolvable below 1e-8
        assert np.linalg.norm(x_unit - (direction @ x_unit) * direction) <= 1e-8


class TestSampleCovariance:
    def test_repeated_column(self):
        d = np.array([1.0, -2.0, 0.5])
        samples = np.tile(d[:, None], (1, 7))
        est = sample_covariance(samples)
        assert np.allclose(est.matrix, np.outer(d, d), rtol=1e-14)
        assert not est.full_rank

    def test_zero_samples_flagged(self):
        est = sample_covariance(np.zeros((3, 5)))
        assert np.array_equal(est.matrix, np.zeros((3, 3)))
        assert not est.full_rank

    def test_too_few_samples_rejected(self):
        with pytest.raises(ValueError, match="insufficient samples"):
            sample_covariance(np.zeros((5, 4)))

    def test_seed42_close_to_analytic(self):
        sc = _scenario(42, 8)
        data = simulate_samples(sc, 20000)
        est = sample_covariance(data)
        pair = analytic_covariance(sc)
        rel = np.linalg.norm(est.matrix - pair.signal_moment) / np.linalg.norm(
            pair.signal_moment
        )
        assert rel <= 0.05

    def test_pair_from_samples_rejects_rank_deficient(self):
        with pytest.raises(ValueError, match="rank deficient"):
            CovariancePair.from_samples(np.zeros((3, 5)), np.eye(3))


class TestRecoverSourceDirection:
    def test_axis_source(self):
        x = np.array([3.0, 0.0, 0.0])
        pair = CovariancePair(
            signal_moment=np.eye(3) + np.outer(x, x),
            noise_cov=np.eye(3),
            provenance="analytic",
            effective_source=x,
        )
        assert np.allclose(recover_source_direction(pair), [1.0, 0.0, 0.0], atol=1e-12)

    @pytest.mark.parametrize("seed", [1, 2, 3, 4, 5])
    def test_angle_to_stored_source(self, seed):
        sc = _scenario(seed, 7)
        direction = recover_source_direction(analytic_covariance(sc))
        x_unit = sc.effective_source / np.linalg.norm(sc.effective_source)
        assert np.linalg.norm(x_unit - (direction @ x_unit) * direction) <= 1e-8

    def test_sign_convention(self):
        for seed in range(6):
            direction = recover_source_direction(analytic_covariance(_scenario(seed, 6)))
            nonzero = direction[direction != 0.0]
            assert nonzero[0] > 0.0

    def test_no_source_rejected(self):
        noise = np.diag([2.0, 1.0, 1.0])
        pair = CovariancePair(
            signal_moment=noise, noise_cov=noise, provenance="sample", sample_count=10
        )
        with pytest.raises(ValueError, match="not identifiable"):
            recover_source_direction(pair)


class TestCandidateGrid:
    def test_duplicate_ids_rejected(self):
        rng = np.random.default_rng(0)
        lead = random_leadfield(rng, 5)
        with pytest.raises(ValueError, match="duplicate"):
            CandidateGrid(
                candidates=(Candidate("a", lead), Candidate("a", lead)), sensor_count=5
            )

    def test_find_leadfield(self):
        sc = _scenario(11, 6)
        grid = random_grid(11, 6, 4, include=sc.leadfield)
        assert grid.find_leadfield(sc.leadfield) == 4
        assert grid.candidates[4].candidate_id == "truth"
        assert grid.find_leadfield(np.ones((6, 3))) is None

    def test_complete_leadfield_shape(self):
        grid = random_grid(1, 6, 5)
        assert grid.complete_leadfield().shape == (6, 15)

    def test_grid_determinism(self):
        a = random_grid(3, 6, 4)
        b = random_grid(3, 6, 4)
        for ca, cb in zip(a.candidates, b.candidates):
            assert ca.candidate_id == cb.candidate_id
            assert np.array_equal(ca.leadfield, cb.leadfield)
