import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.random import default_rng

from conftest import constant_params, draws_from_columns, make_params, simulate_table
from reefgauge.data import grid_table
from reefgauge.diagnostics import (
    SUMMARY_COLUMNS,
    _r2,
    bayes_r2,
    dispersion_check,
    dispersion_statistic,
    hdi,
    max_rhat,
    ppc_summary,
    split_rhat,
    summary_table,
    summary_to_csv,
    summary_to_text,
    variance_fold,
)
from reefgauge.model import ParameterLayout
from reefgauge.sampler import PosteriorDraws, SamplerConfig, fit_model


def draws_from_params(layout, params_list, chains=1):
    rows = []
    for p in params_list:
        row = np.concatenate(
            [
                [p.beta0],
                p.zeta_B,
                p.zeta_S,
                p.zeta_Y,
                p.zeta_SY,
                [p.sigma_B, p.sigma_S, p.sigma_Y, p.sigma_SY],
                [p.phi] if layout.has_phi else [],
                [p.beta1] if layout.extended else [],
            ]
        )
        rows.append(row)
    matrix = np.array(rows)
    total, dim = matrix.shape
    kept = total // chains
    config = SamplerConfig(chains=chains, iterations=2 * kept, warmup=kept, seed=0)
    zeros = np.zeros((chains, kept))
    return PosteriorDraws(
        names=layout.names,
        draws=matrix.reshape(chains, kept, dim),
        divergent=zeros.astype(bool),
        treedepth=zeros.astype(np.int64),
        accept_stat=zeros,
        energy=zeros,
        config=config,
        layout=layout,
    )


class TestSplitRhat:
    def test_identical_chains_with_balanced_halves(self):
        chain = [1.0, 2.0, 3.0, 3.0, 2.0, 1.0]  # half means equal, B = 0
        n = 3
        expected = math.sqrt((n - 1) / n)
        assert split_rhat([chain, chain]) == pytest.approx(expected, rel=1e-12)

    def test_separated_chains_match_hand_formula(self):
        rng = default_rng(0)
        c1 = rng.normal(0.0, 1.0, 100)
        c2 = rng.normal(5.0, 1.0, 100)
        halves = np.stack([c1[:50], c1[50:], c2[:50], c2[50:]])
        n = 50
        w = halves.var(axis=1, ddof=1).mean()
        b = n * halves.mean(axis=1).var(ddof=1)
        expected = math.sqrt(((n - 1) / n * w + b / n) / w)
        value = split_rhat([c1, c2])
        assert value == pytest.approx(expected, rel=1e-12)
        assert value > 1.5

    def test_well_mixed_chains_near_one(self):
        rng = default_rng(1)
        chains = rng.normal(size=(4, 2500))
        assert split_rhat(chains) <= 1.01

    def test_constant_chains_nan_with_warning(self):
        with pytest.warns(RuntimeWarning):
            assert math.isnan(split_rhat([[1.0] * 8, [1.0] * 8]))

    def test_preconditions(self):
        with pytest.raises(ValueError):
            split_rhat([[1.0, 2.0, 3.0, 4.0]])
        with pytest.raises(ValueError):
            split_rhat([[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]])

    @settings(max_examples=20, deadline=None)
    @given(
        a=st.floats(min_value=0.1, max_value=50.0),
        b=st.floats(min_value=-100.0, max_value=100.0),
    )
    def test_affine_invariance(self, a, b):
        rng = default_rng(2)
        chains = rng.normal(size=(3, 40)) + np.array([[0.0], [0.5], [1.0]])
        r1 = split_rhat(chains)
        r2 = split_rhat(a * chains + b)
        assert r1 == pytest.approx(r2, rel=1e-9)


class TestHdi:
    def test_integer_ramp_tie_break(self):
        assert hdi(np.arange(1.0, 101.0), 0.95) == (1.0, 95.0)

    def test_standard_normal_quantiles(self):
        x = default_rng(3).normal(size=1_000_000)
        lo, hi = hdi(x, 0.95)
        assert lo == pytest.approx(-1.96, abs=0.02)
        assert hi == pytest.approx(1.96, abs=0.02)

    def test_exponential_hdi_starts_at_zero(self):
        x = default_rng(4).exponential(1.0, 1_000_000)
        lo, hi = hdi(x, 0.95)
        assert lo < 0.01
        assert hi == pytest.approx(-math.log(0.05), abs=0.03)

    def test_matches_brute_force(self):
        rng = default_rng(5)
        for _ in range(30):
            n = int(rng.integers(20, 1000))
            x = rng.normal(size=n) * rng.uniform(0.5, 3.0)
            k = int(math.ceil(0.95 * n))
            s = np.sort(x)
            best = min(range(n - k + 1), key=lambda i: (s[i + k - 1] - s[i], i))
            assert hdi(x, 0.95) == (s[best], s[best + k - 1])

    def test_preconditions(self):
        with pytest.raises(ValueError):
            hdi(np.arange(10.0))
        with pytest.raises(ValueError):
            hdi(np.arange(30.0), mass=1.0)


class TestBayesR2:
    def test_ratio_by_construction(self):
        assert _r2(3.8, 6.2) == pytest.approx(0.38)

    def test_zero_fitted_variance(self, tiny_table):
        layout = ParameterLayout.for_table(tiny_table)
        params = constant_params(tiny_table, phi=1e9)
        draws = draws_from_params(layout, [params] * 4)
        np.testing.assert_allclose(bayes_r2(draws, tiny_table), 0.0, atol=1e-12)

    def test_dominant_fitted_variance(self):
        table = grid_table(["a"], [2018, 2019], 2)
        layout = ParameterLayout.for_table(table)
        params = constant_params(table, beta0=math.log(50.0), phi=1e12)
        params = type(params)(
            beta0=params.beta0, zeta_B=params.zeta_B, zeta_S=params.zeta_S,
            zeta_Y=np.array([-3.0, 3.0]), zeta_SY=params.zeta_SY,
            sigma_B=params.sigma_B, sigma_S=params.sigma_S, sigma_Y=1.0,
            sigma_SY=params.sigma_SY, phi=1e12,
        )
        draws = draws_from_params(layout, [params] * 4)
        assert bayes_r2(draws, table).min() > 0.95

    def test_in_unit_interval(self, tiny_table):
        rng = default_rng(6)
        layout = ParameterLayout.for_table(tiny_table)
        draws = draws_from_params(
            layout, [make_params(tiny_table, rng) for _ in range(20)]
        )
        values = bayes_r2(draws, tiny_table)
        assert ((values > 0) & (values < 1)).all()


class TestVarianceFold:
    def test_reference_values(self):
        np.testing.assert_allclose(variance_fold([0.22]), [math.exp(0.44)])
        assert variance_fold([0.22])[0] == pytest.approx(1.5527, abs=1e-4)
        assert variance_fold([0.0])[0] == 1.0
        assert variance_fold([1.13])[0] == pytest.approx(9.58, abs=0.01)

    def test_monotone(self):
        sigma = np.linspace(0.0, 2.0, 50)
        folds = variance_fold(sigma)
        assert (np.diff(folds) > 0).all()


@pytest.fixture(scope="module")
def fitted_tiny():
    rng = default_rng(30)
    design = grid_table(["east", "west"], [2018, 2019], 3)
    table = simulate_table(design, make_params(design, rng), rng)
    config = SamplerConfig(chains=2, iterations=700, warmup=350,
                           target_accept=0.95, max_treedepth=10, seed=30)
    return table, fit_model(table, config=config)


class TestPpcSummary:
    def test_count_contract_and_self_consistency(self, fitted_tiny):
        table, draws = fitted_tiny
        summary = ppc_summary(draws, table, default_rng(31), n_rep=150)
        assert summary.n_replicates == 150
        assert summary.replicate_density.shape[0] == 150
        assert len(summary.observed) == len(table)
        # data came from the model family, so the observed mean should sit
        # inside the central mass of the replicate means
        rep_means = (summary.replicate_density * summary.bins).sum(axis=1)
        lo, hi = np.quantile(rep_means, [0.025, 0.975])
        assert lo <= summary.observed.mean() <= hi

    def test_deterministic_given_seed(self, fitted_tiny):
        table, draws = fitted_tiny
        a = ppc_summary(draws, table, default_rng(32), n_rep=120)
        b = ppc_summary(draws, table, default_rng(32), n_rep=120)
        np.testing.assert_array_equal(a.replicate_density, b.replicate_density)
        np.testing.assert_array_equal(a.mean_predicted, b.mean_predicted)

    def test_csv_output(self, fitted_tiny, tmp_path):
        table, draws = fitted_tiny
        summary = ppc_summary(draws, table, default_rng(33), n_rep=100)
        summary.write_csv(tmp_path / "scatter.csv", tmp_path / "density.csv")
        header = (tmp_path / "scatter.csv").read_text().splitlines()[0]
        assert header == "observation,observed,mean_predicted"
        sources = {
            line.split(",")[0]
            for line in (tmp_path / "density.csv").read_text().splitlines()[1:]
        }
        assert len(sources) == 101  # observed + 100 replicates

    def test_n_rep_minimum(self, fitted_tiny):
        table, draws = fitted_tiny
        with pytest.raises(ValueError):
            ppc_summary(draws, table, default_rng(0), n_rep=10)


class TestDispersion:
    def test_constant_data_statistic_is_zero(self):
        assert dispersion_statistic([4, 4, 4, 4]) == 0.0

    def test_overdispersed_data_flagged(self):
        rng = default_rng(34)
        design = grid_table(["a", "b"], [2018, 2019], 4)
        table = simulate_table(design, make_params(design, rng, phi=0.6), rng)
        config = SamplerConfig(chains=2, iterations=500, warmup=250,
                               target_accept=0.9, max_treedepth=10, seed=34)
        report = dispersion_check(table, config=config, rng=default_rng(34))
        assert 0.0 <= report.p_value <= 1.0
        assert report.observed_stat > report.simulated_mean


class TestSummaryTable:
    def test_constant_column(self):
        draws = draws_from_columns({"c": np.full(80, 2.5)}, chains=2)
        (row,) = summary_table(draws, ["c"])
        assert row.mean == 2.5
        assert row.sd == 0.0
        assert (row.hdi_lower, row.hdi_upper) == (2.5, 2.5)
        assert math.isnan(row.rhat)

    def test_transform_then_summarise(self):
        rng = default_rng(35)
        skewed = rng.normal(size=400)
        draws = draws_from_columns({"beta0": skewed}, chains=2)
        (row,) = summary_table(draws, ["exp(beta0)"])
        assert row.mean == pytest.approx(np.exp(skewed).mean())
        assert row.mean != pytest.approx(math.exp(skewed.mean()), rel=1e-3)

    def test_csv_column_order(self, tmp_path):
        draws = draws_from_columns({"x": np.linspace(0.0, 1.0, 100)}, chains=2)
        rows = summary_table(draws, ["x"])
        path = tmp_path / "summary.csv"
        summary_to_csv(rows, path)
        header = path.read_text().splitlines()[0]
        assert header == "Parameter,Mean,S.D.,L-95% HDI,U-95% HDI,R_hat"
        text_header = summary_to_text(rows).splitlines()[0]
        positions = [text_header.index(c) for c in SUMMARY_COLUMNS]
        assert positions == sorted(positions)

    def test_unknown_name_errors(self):
        draws = draws_from_columns({"x": np.linspace(0.0, 1.0, 40)})
        with pytest.raises(KeyError):
            summary_table(draws, ["y"])

    def test_max_rhat_over_fit(self, fitted_tiny):
        _, draws = fitted_tiny
        assert max_rhat(draws) < 1.05
