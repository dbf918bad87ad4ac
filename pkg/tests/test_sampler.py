import math

import numpy as np
import pytest
from numpy.random import default_rng
from scipy import stats

from conftest import make_params, simulate_table
from reefgauge.data import AggregatedObservation, ObservationTable, grid_table
from reefgauge.sampler import (
    AdaptationState,
    InitializationError,
    PosteriorDraws,
    SamplerConfig,
    TargetError,
    _energy,
    fit_model,
    leapfrog_step,
    sample,
)


def std_normal(theta):
    return -0.5 * float(theta @ theta), -theta


def correlated_gaussian(rho=0.9):
    cov = np.array([[1.0, rho], [rho, 1.0]])
    prec = np.linalg.inv(cov)

    def target(theta):
        return -0.5 * float(theta @ prec @ theta), -prec @ theta

    return target, cov


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            SamplerConfig(warmup=10, iterations=10)
        with pytest.raises(ValueError):
            SamplerConfig(target_accept=1.0)
        with pytest.raises(ValueError):
            SamplerConfig(max_treedepth=0)
        with pytest.raises(ValueError):
            SamplerConfig(seed=-1)

    def test_round_trip(self):
        config = SamplerConfig(chains=2, iterations=100, warmup=50, seed=9)
        assert SamplerConfig.from_dict(config.to_dict()) == config

    def test_warmup_windows_cover_slow_phase(self):
        for warmup in (20, 150, 750, 1000, 2500):
            schedule = AdaptationState.for_warmup(warmup)
            assert schedule.window_ends[-1] == schedule.slow_end
            assert all(e <= warmup for e in schedule.window_ends)
            assert list(schedule.window_ends) == sorted(set(schedule.window_ends))

    def test_tiny_warmup_has_no_windows(self):
        assert AdaptationState.for_warmup(10).window_ends == ()


class TestStandardTargets:
    def test_standard_normal_moments_and_ks(self):
        config = SamplerConfig(chains=4, iterations=3500, warmup=1000,
                               target_accept=0.8, max_treedepth=10, seed=3)
        draws = sample(std_normal, 1, config)
        x = draws.draws.reshape(-1)
        assert len(x) == 10_000
        assert abs(x.mean()) < 0.05
        assert abs(x.std(ddof=1) - 1.0) < 0.05
        ks = stats.kstest(x, "norm").statistic
        assert ks < 0.02
        assert draws.n_divergent == 0

    def test_correlated_gaussian_covariance(self):
        target, cov = correlated_gaussian(0.9)
        config = SamplerConfig(chains=4, iterations=2000, warmup=1000,
                               target_accept=0.9, max_treedepth=10, seed=4)
        draws = sample(target, 2, config)
        flat = draws.draws.reshape(-1, 2)
        assert np.abs(flat.mean(axis=0)).max() < 0.05
        assert np.abs(np.cov(flat.T) - cov).max() < 0.05

    def test_treedepth_cap(self):
        # a nearly flat target wants long trajectories; the cap must bind
        def flat(theta):
            return -0.5e-4 * float(theta @ theta), -1e-4 * theta

        config = SamplerConfig(chains=1, iterations=60, warmup=30,
                               target_accept=0.8, max_treedepth=3, seed=5)
        draws = sample(flat, 2, config)
        assert draws.treedepth.max() <= 3


class TestReproducibility:
    def test_same_seed_bit_identical(self):
        config = SamplerConfig(chains=2, iterations=400, warmup=200,
                               target_accept=0.8, max_treedepth=8, seed=11)
        a = sample(std_normal, 1, config)
        b = sample(std_normal, 1, config)
        np.testing.assert_array_equal(a.draws, b.draws)
        np.testing.assert_array_equal(a.treedepth, b.treedepth)

    def test_chain_independence(self):
        base = dict(iterations=400, warmup=200, target_accept=0.8, max_treedepth=8, seed=12)
        four = sample(std_normal, 1, SamplerConfig(chains=4, **base))
        two = sample(std_normal, 1, SamplerConfig(chains=2, **base))
        np.testing.assert_array_equal(four.draws[:2], two.draws)

    def test_save_load_round_trip(self, tmp_path, tiny_table):
        config = SamplerConfig(chains=2, iterations=120, warmup=60,
                               target_accept=0.9, max_treedepth=8, seed=13)
        draws = fit_model(tiny_table, config=config)
        draws.save(tmp_path)
        loaded = PosteriorDraws.load(tmp_path)
        np.testing.assert_array_equal(loaded.draws, draws.draws)
        assert loaded.names == draws.names
        assert loaded.config == draws.config
        assert loaded.layout == draws.layout


class TestErrors:
    def test_target_error_when_never_finite(self):
        def bad(theta):
            return -math.inf, np.zeros_like(theta)

        with pytest.raises(TargetError):
            sample(bad, 2, SamplerConfig(chains=1, iterations=10, warmup=5, seed=1))

    def test_all_divergent_warmup_raises(self):
        # finite only exactly at the origin: every leapfrog step falls off
        def point_mass(theta):
            if np.all(theta == 0.0):
                return 0.0, np.zeros_like(theta)
            return -math.inf, np.zeros_like(theta)

        config = SamplerConfig(chains=1, iterations=30, warmup=20, seed=2, init_scale=0.0)
        with pytest.raises(InitializationError, match="init_scale"):
            sample(point_mass, 1, config)


class TestLeapfrog:
    def test_energy_error_third_order(self):
        scales = np.array([1.0, 3.0])

        def target(theta):
            return -0.5 * float(theta @ (scales * theta)), -scales * theta

        inv_mass = np.array([1.0, 0.7])
        theta0, r0 = np.array([1.0, 0.5]), np.array([0.3, -0.7])
        logp0, grad0 = target(theta0)
        h0 = _energy(logp0, r0, inv_mass)
        eps_list = [0.1, 0.05, 0.025]
        errors = []
        for eps in eps_list:
            _, r1, logp1, _ = leapfrog_step(theta0, r0, grad0, eps, inv_mass, target)
            errors.append(abs(_energy(logp1, r1, inv_mass) - h0))
        slope = np.polyfit(np.log(eps_list), np.log(errors), 1)[0]
        assert 2.5 < slope < 3.5


class TestFitModel:
    def test_synthetic_fit_converges(self, tiny_table):
        config = SamplerConfig(chains=2, iterations=800, warmup=400,
                               target_accept=0.95, max_treedepth=10, seed=21)
        draws = fit_model(tiny_table, config=config)
        assert draws.n_divergent == 0
        assert draws.draws.shape == (2, 400, draws.layout.dim)
        sigma_cols = [n for n in draws.names if n.startswith(("sigma", "phi"))]
        for name in sigma_cols:
            assert (draws.flat(name) > 0).all()

    def test_single_observation_prior_dominated(self):
        table = ObservationTable.from_observations(
            [AggregatedObservation("a", 2018, "a-01", 7)]
        )
        config = SamplerConfig(chains=2, iterations=2500, warmup=1000,
                               target_accept=0.95, max_treedepth=10, seed=22)
        draws = fit_model(table, config=config)
        sd = draws.flat("beta0").std(ddof=1)
        assert abs(sd - 1.0) < 0.2

    def test_parameter_recovery_smoke(self):
        rng = default_rng(23)
        design = grid_table(["s1", "s2", "s3"], [2018, 2019, 2020], 4)
        table = simulate_table(design, make_params(design, rng), rng)
        config = SamplerConfig(chains=2, iterations=1000, warmup=500,
                               target_accept=0.95, max_treedepth=10, seed=23)
        draws = fit_model(table, config=config)
        beta0 = draws.flat("beta0")
        lo, hi = np.quantile(beta0, [0.005, 0.995])
        assert lo < math.log(10.0) < hi

    def test_empty_table_rejected(self):
        table = ObservationTable((), ("a",), (2018,), ("a-01",), (("a", 2018),))
        with pytest.raises(ValueError):
            fit_model(table)

    def test_parallel_chains_match_serial(self, tiny_table):
        serial = fit_model(tiny_table, config=SamplerConfig(
            chains=2, iterations=200, warmup=100, seed=24, jobs=1))
        parallel = fit_model(tiny_table, config=SamplerConfig(
            chains=2, iterations=200, warmup=100, seed=24, jobs=2))
        np.testing.assert_array_equal(serial.draws, parallel.draws)
