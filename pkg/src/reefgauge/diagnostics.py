"""Convergence and goodness-of-fit diagnostics for posterior draws.

Covers split Gelman-Rubin R-hat, highest-density intervals, Bayesian R^2
on the count scale, variance-fold summaries e^(2*sigma), posterior
predictive summaries, a simulation-based dispersion check against a
Poisson refit, and the tabular parameter summary.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from ._io import write_csv
from .data import ObservationTable
from .model import POISSON, ModelDesign, PriorConfig, nb_sample
from .sampler import PosteriorDraws, SamplerConfig, fit_model

SUMMARY_COLUMNS = ("Parameter", "Mean", "S.D.", "L-95% HDI", "U-95% HDI", "R_hat")


def split_rhat(chains) -> float:
    """Split-half Gelman-Rubin statistic for one scalar parameter.

    Each chain is halved (the middle draw is dropped for odd lengths) and
    R-hat = sqrt(((n-1)/n * W + B/n) / W) is computed over the resulting
    2m sequences. Returns NaN (with a warning) when every sequence has
    zero within variance.
    """
    arrays = [np.asarray(c, dtype=np.float64) for c in chains]
    if len(arrays) < 2:
        raise ValueError("split_rhat needs at least 2 chains")
    if any(len(c) < 4 for c in arrays):
        raise ValueError("split_rhat needs at least 4 draws per chain")

    halves = []
    for c in arrays:
        m = len(c) // 2
        halves.append(c[:m])
        halves.append(c[len(c) - m:])
    n = min(len(h) for h in halves)
    halves = np.stack([h[:n] for h in halves])

    within = halves.var(axis=1, ddof=1)
    w = float(within.mean())
    if w == 0.0:
        warnings.warn("zero within-chain variance; R-hat is undefined", RuntimeWarning)
        return math.nan
    b = n * float(halves.mean(axis=1).var(ddof=1))
    return math.sqrt(((n - 1) / n * w + b / n) / w)


def hdi(draws, mass: float = 0.95) -> tuple[float, float]:
    """Shortest contiguous interval over the sorted draws holding ``mass``.

    Ties between equally short windows are broken by the lowest starting
    index, which makes the result deterministic.
    """
    x = np.sort(np.asarray(draws, dtype=np.float64))
    n = len(x)
    if not 0.0 < mass < 1.0:
        raise ValueError("mass must be in (0, 1)")
    if n < 20:
        raise ValueError("hdi needs at least 20 draws")
    k = int(math.ceil(mass * n))
    if k > n:
        raise ValueError("window longer than the sample")
    widths = x[k - 1:] - x[: n - k + 1]
    start = int(np.argmin(widths))
    return float(x[start]), float(x[start + k - 1])


def _r2(v_fit: float, v_res: float) -> float:
    return v_fit / (v_fit + v_res)


def bayes_r2(draws: PosteriorDraws, table: ObservationTable) -> np.ndarray:
    """Per-draw Bayesian R^2 on the response scale.

    Fitted variance is the variance of the modelled means across
    observations; residual variance is the mean model variance
    mu + mu^2 / phi (or mu for the Poisson mode).
    """
    if draws.layout is None:
        raise ValueError("bayes_r2 needs draws from a model fit")
    design = ModelDesign(table, likelihood=draws.layout.likelihood)
    out = np.empty(draws.total)
    for i in range(draws.total):
        params = draws.parameters(i)
        mu = design.mu(params)
        v_fit = float(mu.var(ddof=1)) if len(mu) > 1 else 0.0
        if math.isinf(params.phi):
            v_res = float(mu.mean())
        else:
            v_res = float((mu + mu**2 / params.phi).mean())
        out[i] = _r2(v_fit, v_res)
    return out


def variance_fold(sigma_draws) -> np.ndarray:
    """Per-draw spatial/temporal fold variation e^(2*sigma)."""
    sigma = np.asarray(sigma_draws, dtype=np.float64)
    if np.any(sigma < 0):
        raise ValueError("sigma draws must be non-negative")
    return np.exp(2.0 * sigma)


@dataclass(frozen=True)
class PPCSummary:
    """Plot-ready posterior predictive tables.

    ``observed_vs_predicted`` pairs each observation with its mean
    prediction over the replicates. Densities are plain normalised
    histograms over shared integer bins (one row per replicate).
    """

    observed: np.ndarray               # (n_obs,)
    mean_predicted: np.ndarray         # (n_obs,)
    bins: np.ndarray                   # (n_bins,) left edges (integers)
    observed_density: np.ndarray       # (n_bins,)
    replicate_density: np.ndarray      # (n_rep, n_bins)

    @property
    def n_replicates(self) -> int:
        return self.replicate_density.shape[0]

    def scatter_rows(self):
        return [
            (i, int(o), float(p))
            for i, (o, p) in enumerate(zip(self.observed, self.mean_predicted))
        ]

    def density_rows(self):
        rows = [("observed", int(b), float(d)) for b, d in zip(self.bins, self.observed_density)]
        for r in range(self.n_replicates):
            rows.extend(
                (f"replicate{r}", int(b), float(d))
                for b, d in zip(self.bins, self.replicate_density[r])
            )
        return rows

    def write_csv(self, scatter_path, density_path) -> None:
        write_csv(scatter_path, ["observation", "observed", "mean_predicted"], self.scatter_rows())
        write_csv(density_path, ["source", "bin", "density"], self.density_rows())


def ppc_summary(
    draws: PosteriorDraws,
    table: ObservationTable,
    rng: np.random.Generator,
    n_rep: int = 1000,
) -> PPCSummary:
    """Replicate the dataset ``n_rep`` times from posterior draws."""
    if n_rep < 100:
        raise ValueError("n_rep must be at least 100")
    if draws.layout is None:
        raise ValueError("ppc_summary needs draws from a model fit")
    design = ModelDesign(table, likelihood=draws.layout.likelihood)
    observed = table.counts()

    replace = draws.total < n_rep
    indices = rng.choice(draws.total, size=n_rep, replace=replace)
    replicates = np.empty((n_rep, len(table)), dtype=np.int64)
    for j, idx in enumerate(indices):
        params = draws.parameters(int(idx))
        replicates[j] = nb_sample(rng, design.mu(params), params.phi)

    top = int(max(observed.max(), replicates.max())) + 1
    bins = np.arange(top + 1)
    observed_density = np.bincount(observed, minlength=top + 1) / len(observed)
    rep_density = np.empty((n_rep, top + 1))
    for j in range(n_rep):
        rep_density[j] = np.bincount(replicates[j], minlength=top + 1) / replicates.shape[1]

    return PPCSummary(
        observed=observed,
        mean_predicted=replicates.mean(axis=0),
        bins=bins,
        observed_density=observed_density,
        replicate_density=rep_density,
    )


@dataclass(frozen=True)
class DispersionReport:
    """Dispersion of the data against its Poisson-refit distribution.

    The working statistic is the Pearson dispersion (mean of
    (y - mu)^2 / mu given a draw's fitted means): ~1 for Poisson data,
    inflated when the counts carry extra variance. The raw marginal
    var/mean ratio of the observations is reported alongside for context.
    """

    observed_stat: float
    simulated_mean: float
    simulated_q05: float
    simulated_q95: float
    p_value: float
    n_simulations: int
    var_mean_ratio: float

    def to_dict(self) -> dict:
        return {
            "observed_stat": self.observed_stat,
            "simulated_mean": self.simulated_mean,
            "simulated_q05": self.simulated_q05,
            "simulated_q95": self.simulated_q95,
            "p_value": self.p_value,
            "n_simulations": self.n_simulations,
            "var_mean_ratio": self.var_mean_ratio,
        }


def dispersion_statistic(counts) -> float:
    """Marginal variance-to-mean ratio; zero for constant data."""
    counts = np.asarray(counts, dtype=np.float64)
    mean = counts.mean()
    if mean == 0 or counts.var(ddof=1) == 0:
        return 0.0
    return float(counts.var(ddof=1) / mean)


def pearson_dispersion(counts, mu) -> float:
    """Mean squared Pearson residual under Poisson variance."""
    counts = np.asarray(counts, dtype=np.float64)
    return float(np.mean((counts - mu) ** 2 / mu))


def dispersion_check(
    table: ObservationTable,
    priors: PriorConfig | None = None,
    config: SamplerConfig | None = None,
    rng: np.random.Generator | None = None,
    max_simulations: int = 1000,
) -> DispersionReport:
    """Refit assuming Poisson counts and test the residual dispersion.

    Per retained draw, the Pearson dispersion of the observed data (given
    that draw's fitted means) is paired with the same statistic on a
    replicate dataset simulated from the draw; the two-sided p-value ranks
    observed against replicate discrepancies. A small p flags
    overdispersion the Poisson model cannot carry. The conditional
    statistic is used because the refit's random effects partly absorb
    marginal overdispersion into the fitted means, which would blind a
    plain var/mean comparison.
    """
    rng = rng if rng is not None else np.random.default_rng()
    fit = fit_model(table, priors=priors, config=config, likelihood=POISSON)
    design = ModelDesign(table, likelihood=POISSON)
    observed = table.counts()

    total = fit.total
    n_sim = min(max_simulations, total)
    # deterministic thinning over the retained draws
    indices = np.linspace(0, total - 1, n_sim).astype(int)
    t_obs = np.empty(n_sim)
    t_rep = np.empty(n_sim)
    for j, idx in enumerate(indices):
        params = fit.parameters(int(idx))
        mu = design.mu(params)
        t_obs[j] = pearson_dispersion(observed, mu)
        t_rep[j] = pearson_dispersion(rng.poisson(mu), mu)

    p_low = (1 + int((t_rep <= t_obs).sum())) / (n_sim + 1)
    p_high = (1 + int((t_rep >= t_obs).sum())) / (n_sim + 1)
    return DispersionReport(
        observed_stat=float(t_obs.mean()),
        simulated_mean=float(t_rep.mean()),
        simulated_q05=float(np.quantile(t_rep, 0.05)),
        simulated_q95=float(np.quantile(t_rep, 0.95)),
        p_value=min(1.0, 2.0 * min(p_low, p_high)),
        n_simulations=n_sim,
        var_mean_ratio=dispersion_statistic(observed),
    )


@dataclass(frozen=True)
class SummaryRow:
    parameter: str
    mean: float
    sd: float
    hdi_lower: float
    hdi_upper: float
    rhat: float


def _summary_matrix(draws: PosteriorDraws, name: str) -> np.ndarray:
    """Per-chain draw matrix for a (possibly derived) parameter name."""
    if name.startswith("exp(") and name.endswith(")"):
        return np.exp(draws.column(name[4:-1]))
    return draws.column(name)


def summary_table(draws: PosteriorDraws, params) -> "list[SummaryRow]":
    """Mean, sd, 95% HDI and split R-hat per requested parameter.

    Derived names like ``exp(beta0)`` are transformed draw-by-draw before
    summarising, never from summaries.
    """
    rows = []
    for name in params:
        matrix = _summary_matrix(draws, name)
        flat = matrix.reshape(-1)
        if flat.std() == 0.0:
            lower = upper = float(flat[0])
            rhat = math.nan
            if matrix.shape[0] >= 2 and matrix.shape[1] >= 4:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    rhat = split_rhat(matrix)
        else:
            lower, upper = hdi(flat)
            rhat = split_rhat(matrix) if matrix.shape[0] >= 2 else math.nan
        rows.append(
            SummaryRow(
                parameter=name,
                mean=float(flat.mean()),
                sd=float(flat.std(ddof=1)),
                hdi_lower=lower,
                hdi_upper=upper,
                rhat=rhat,
            )
        )
    return rows


def summary_to_csv(rows: "list[SummaryRow]", path) -> None:
    write_csv(
        path,
        list(SUMMARY_COLUMNS),
        [(r.parameter, r.mean, r.sd, r.hdi_lower, r.hdi_upper, r.rhat) for r in rows],
    )


def summary_to_text(rows: "list[SummaryRow]") -> str:
    """Aligned plain-text rendering of the summary table."""
    table = [SUMMARY_COLUMNS] + [
        (
            r.parameter,
            f"{r.mean:.2f}",
            f"{r.sd:.2f}",
            f"{r.hdi_lower:.2f}",
            f"{r.hdi_upper:.2f}",
            "nan" if math.isnan(r.rhat) else f"{r.rhat:.2f}",
        )
        for r in rows
    ]
    widths = [max(len(row[c]) for row in table) for c in range(len(SUMMARY_COLUMNS))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in table]
    return "\n".join(lines) + "\n"


def max_rhat(draws: PosteriorDraws) -> float:
    """Largest split R-hat over all stored parameters (NaNs ignored)."""
    values = []
    for name in draws.names:
        matrix = draws.column(name)
        if matrix.shape[0] < 2 or matrix.shape[1] < 4:
            continue
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            r = split_rhat(matrix)
        if not math.isnan(r):
            values.append(r)
    return max(values) if values else math.nan
