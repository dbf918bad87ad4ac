import math

import numpy as np
import pytest
from numpy.random import default_rng

from reefgauge.data import AggregatedObservation, ObservationTable, grid_table
from reefgauge.model import ModelParameters, posterior_predictive_sample
from reefgauge.sampler import PosteriorDraws, SamplerConfig


def make_params(table, rng, *, beta0=math.log(10.0), sigma_B=0.71, sigma_S=0.22,
                sigma_Y=0.47, sigma_SY=0.59, phi=1.96, beta1=None):
    """Parameter block with unit-normal standardised effects."""
    return ModelParameters(
        beta0=beta0,
        zeta_B=rng.normal(size=len(table.stations)),
        zeta_S=rng.normal(size=len(table.sites)),
        zeta_Y=rng.normal(size=len(table.years)),
        zeta_SY=rng.normal(size=len(table.site_year_pairs)),
        sigma_B=sigma_B,
        sigma_S=sigma_S,
        sigma_Y=sigma_Y,
        sigma_SY=sigma_SY,
        phi=phi,
        beta1=beta1,
    )


def simulate_table(table, params, rng):
    """Fill a design table with counts generated from the model."""
    return table.with_counts(posterior_predictive_sample(params, table, rng))


@pytest.fixture
def tiny_table():
    """2 sites x 2 years x 2 stations with small fixed counts."""
    rng = default_rng(11)
    design = grid_table(["east", "west"], [2018, 2019], 2)
    return simulate_table(design, make_params(design, rng), rng)


@pytest.fixture
def paper_shape_table():
    """5 sites, 3 years, 5 stations per site; one site sampled in the last
    year only and one deployment dropped, leaving 64 observations."""
    rng = default_rng(7)
    observations = []
    sites = ["djulbard", "jigoorloon", "joorrol", "ngamagoon"]
    for site in sites:
        for year in (2018, 2019, 2020):
            for j in range(5):
                observations.append(AggregatedObservation(site, year, f"{site}-{j + 1:02d}", 0))
    for j in range(5):
        observations.append(AggregatedObservation("boorrogoron", 2020, f"boorrogoron-{j + 1:02d}", 0))
    observations = observations[:8] + observations[9:]  # one unusable deployment
    design = ObservationTable.from_observations(observations)
    assert len(design) == 64
    return simulate_table(design, make_params(design, rng), rng)


def constant_params(table, *, beta0=math.log(10.0), phi=1.96, sigma=1e-9):
    """Degenerate block: all deviations essentially zero."""
    return ModelParameters(
        beta0=beta0,
        zeta_B=np.zeros(len(table.stations)),
        zeta_S=np.zeros(len(table.sites)),
        zeta_Y=np.zeros(len(table.years)),
        zeta_SY=np.zeros(len(table.site_year_pairs)),
        sigma_B=sigma,
        sigma_S=sigma,
        sigma_Y=sigma,
        sigma_SY=sigma,
        phi=phi,
    )


def draws_from_columns(columns: dict, layout=None, chains: int = 1) -> PosteriorDraws:
    """Hand-built PosteriorDraws from named column vectors (for fixtures)."""
    names = tuple(columns)
    first = np.asarray(next(iter(columns.values())), dtype=np.float64)
    total = len(first)
    assert total % chains == 0
    kept = total // chains
    draws = np.stack(
        [np.asarray(columns[n], dtype=np.float64).reshape(chains, kept) for n in names], axis=-1
    )
    config = SamplerConfig(chains=chains, iterations=2 * kept, warmup=kept, seed=0)
    zeros = np.zeros((chains, kept))
    return PosteriorDraws(
        names=names,
        draws=draws,
        divergent=zeros.astype(bool),
        treedepth=zeros.astype(np.int64),
        accept_stat=zeros,
        energy=zeros,
        config=config,
        layout=layout,
    )
