"""Hierarchical negative-binomial abundance model.

The response A for deployment i is modelled as

    A_i ~ NB(mu_i, phi)          Var = mu + mu^2 / phi
    ln mu_i = beta0 + Delta_B[b_i] + Delta_S[s_i] + Delta_Y[y_i] + Delta_SY[sy_i]

with non-centered deviations Delta_* = zeta_* * sigma_*, standard-normal
zeta_*, Gamma(2, 2) scale priors, a Gamma(2, 1) prior on phi and a
standard-normal prior on beta0. An optional before/after extension shifts
the log-mean by beta1 * x_i for a binary disturbance design vector x.

Everything here is expressed both on the natural (constrained) scale via
:class:`ModelParameters` and on the unconstrained sampling scale (log
transforms for sigma_* and phi, Jacobians included exactly once in the
density). Gradients are analytic; the negative-binomial terms need the
digamma function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import digamma, gammaln

from .data import ObservationTable

NEGATIVE_BINOMIAL = "negative-binomial"
POISSON = "poisson"

# Linear predictors are clamped (in natural-log units) before exponentiation;
# +/-40 is far outside any plausible abundance.
LINPRED_CLAMP = 40.0

_LOG_2PI = math.log(2.0 * math.pi)
_SIGMA_BLOCKS = ("B", "S", "Y", "SY")


def _safe_exp(x: float) -> float:
    try:
        return math.exp(x)
    except OverflowError:
        return math.inf


@dataclass(frozen=True)
class PriorConfig:
    """Hyperparameters of the weakly informative priors.

    Gamma priors are parameterised by (shape, rate). beta1 applies only to
    the before/after extension.
    """

    beta0_mean: float = 0.0
    beta0_sd: float = 1.0
    sigma_shape: float = 2.0
    sigma_rate: float = 2.0
    phi_shape: float = 2.0
    phi_rate: float = 1.0
    beta1_mean: float = 0.0
    beta1_sd: float = 1.0

    def __post_init__(self):
        for name in ("beta0_sd", "sigma_shape", "sigma_rate", "phi_shape", "phi_rate", "beta1_sd"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class BeforeAfterExtension:
    """Binary disturbance design: x_i = 0 before, 1 after."""

    x: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        if x.ndim != 1 or not np.isin(x, (0.0, 1.0)).all():
            raise ValueError("x must be a 1-D vector of 0/1 entries")
        object.__setattr__(self, "x", x)

    @classmethod
    def for_new_year(cls, table: ObservationTable, new_year: int) -> "BeforeAfterExtension":
        return cls(np.array([1.0 if o.year == new_year else 0.0 for o in table.observations]))


@dataclass(frozen=True)
class ModelParameters:
    """Constrained-space parameter block.

    zeta vectors follow the (sorted) station/site/year/site-year index
    lists of the table the model was built for. phi may be ``math.inf``,
    which selects the Poisson limit.
    """

    beta0: float
    zeta_B: np.ndarray
    zeta_S: np.ndarray
    zeta_Y: np.ndarray
    zeta_SY: np.ndarray
    sigma_B: float
    sigma_S: float
    sigma_Y: float
    sigma_SY: float
    phi: float
    beta1: Optional[float] = None

    def __post_init__(self):
        for name in ("sigma_B", "sigma_S", "sigma_Y", "sigma_SY", "phi"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("zeta_B", "zeta_S", "zeta_Y", "zeta_SY"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))

    @property
    def delta_B(self) -> np.ndarray:
        return self.zeta_B * self.sigma_B

    @property
    def delta_S(self) -> np.ndarray:
        return self.zeta_S * self.sigma_S

    @property
    def delta_Y(self) -> np.ndarray:
        return self.zeta_Y * self.sigma_Y

    @property
    def delta_SY(self) -> np.ndarray:
        return self.zeta_SY * self.sigma_SY


def pair_name(site: str, year: int) -> str:
    return f"{site}:{year}"


@dataclass(frozen=True)
class ParameterLayout:
    """Fixed ordering of the unconstrained vector and its named counterpart.

    Segmentation: beta0 | zeta_B | zeta_S | zeta_Y | zeta_SY |
    log sigma_(B,S,Y,SY) | log phi (NB only) | beta1 (extension only).
    The constrained view exponentiates the log blocks, so names and
    positions coincide between the two spaces.
    """

    sites: tuple[str, ...]
    years: tuple[int, ...]
    stations: tuple[str, ...]
    site_year_pairs: tuple[tuple[str, int], ...]
    likelihood: str = NEGATIVE_BINOMIAL
    extended: bool = False

    def __post_init__(self):
        if self.likelihood not in (NEGATIVE_BINOMIAL, POISSON):
            raise ValueError(f"unknown likelihood {self.likelihood!r}")
        object.__setattr__(self, "site_year_pairs", tuple((s, int(y)) for s, y in self.site_year_pairs))
        object.__setattr__(self, "years", tuple(int(y) for y in self.years))

    @classmethod
    def for_table(
        cls,
        table: ObservationTable,
        likelihood: str = NEGATIVE_BINOMIAL,
        extended: bool = False,
    ) -> "ParameterLayout":
        return cls(
            sites=table.sites,
            years=table.years,
            stations=table.stations,
            site_year_pairs=table.site_year_pairs,
            likelihood=likelihood,
            extended=extended,
        )

    @property
    def has_phi(self) -> bool:
        return self.likelihood == NEGATIVE_BINOMIAL

    @property
    def dim(self) -> int:
        return (
            1
            + len(self.stations)
            + len(self.sites)
            + len(self.years)
            + len(self.site_year_pairs)
            + 4
            + (1 if self.has_phi else 0)
            + (1 if self.extended else 0)
        )

    def _block_slices(self) -> dict[str, slice]:
        nB, nS = len(self.stations), len(self.sites)
        nY, nSY = len(self.years), len(self.site_year_pairs)
        pos = 1
        out = {"beta0": slice(0, 1)}
        for key, n in (("zeta_B", nB), ("zeta_S", nS), ("zeta_Y", nY), ("zeta_SY", nSY)):
            out[key] = slice(pos, pos + n)
            pos += n
        out["sigma"] = slice(pos, pos + 4)
        pos += 4
        if self.has_phi:
            out["phi"] = slice(pos, pos + 1)
            pos += 1
        if self.extended:
            out["beta1"] = slice(pos, pos + 1)
            pos += 1
        assert pos == self.dim
        return out

    @property
    def names(self) -> tuple[str, ...]:
        names = ["beta0"]
        names += [f"zeta_B[{s}]" for s in self.stations]
        names += [f"zeta_S[{s}]" for s in self.sites]
        names += [f"zeta_Y[{y}]" for y in self.years]
        names += [f"zeta_SY[{pair_name(s, y)}]" for s, y in self.site_year_pairs]
        names += [f"sigma_{b}" for b in _SIGMA_BLOCKS]
        if self.has_phi:
            names.append("phi")
        if self.extended:
            names.append("beta1")
        return tuple(names)

    def unconstrain(self, params: ModelParameters) -> np.ndarray:
        """Map constrained parameters to the sampling space (logs for scales)."""
        sl = self._block_slices()
        theta = np.empty(self.dim)
        theta[0] = params.beta0
        theta[sl["zeta_B"]] = params.zeta_B
        theta[sl["zeta_S"]] = params.zeta_S
        theta[sl["zeta_Y"]] = params.zeta_Y
        theta[sl["zeta_SY"]] = params.zeta_SY
        theta[sl["sigma"]] = np.log(
            [params.sigma_B, params.sigma_S, params.sigma_Y, params.sigma_SY]
        )
        if self.has_phi:
            theta[sl["phi"]] = math.log(params.phi)
        if self.extended:
            if params.beta1 is None:
                raise ValueError("extended layout requires beta1")
            theta[sl["beta1"]] = params.beta1
        return theta

    def params(self, theta: np.ndarray) -> ModelParameters:
        """Inverse of :meth:`unconstrain`."""
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.dim,):
            raise ValueError(f"expected vector of length {self.dim}, got {theta.shape}")
        sl = self._block_slices()
        sigma = np.exp(theta[sl["sigma"]])
        return ModelParameters(
            beta0=float(theta[0]),
            zeta_B=theta[sl["zeta_B"]].copy(),
            zeta_S=theta[sl["zeta_S"]].copy(),
            zeta_Y=theta[sl["zeta_Y"]].copy(),
            zeta_SY=theta[sl["zeta_SY"]].copy(),
            sigma_B=float(sigma[0]),
            sigma_S=float(sigma[1]),
            sigma_Y=float(sigma[2]),
            sigma_SY=float(sigma[3]),
            phi=float(np.exp(theta[sl["phi"]])[0]) if self.has_phi else math.inf,
            beta1=float(theta[sl["beta1"]][0]) if self.extended else None,
        )

    def constrain_vector(self, theta: np.ndarray) -> np.ndarray:
        """Per-coordinate constrained view used to store draws."""
        out = np.array(theta, dtype=np.float64, copy=True)
        sl = self._block_slices()
        out[sl["sigma"]] = np.exp(out[sl["sigma"]])
        if self.has_phi:
            out[sl["phi"]] = np.exp(out[sl["phi"]])
        return out

    def params_from_constrained(self, row: np.ndarray) -> ModelParameters:
        """Rebuild :class:`ModelParameters` from one stored (constrained) draw."""
        row = np.asarray(row, dtype=np.float64)
        sl = self._block_slices()
        sigma = row[sl["sigma"]]
        return ModelParameters(
            beta0=float(row[0]),
            zeta_B=row[sl["zeta_B"]].copy(),
            zeta_S=row[sl["zeta_S"]].copy(),
            zeta_Y=row[sl["zeta_Y"]].copy(),
            zeta_SY=row[sl["zeta_SY"]].copy(),
            sigma_B=float(sigma[0]),
            sigma_S=float(sigma[1]),
            sigma_Y=float(sigma[2]),
            sigma_SY=float(sigma[3]),
            phi=float(row[sl["phi"]][0]) if self.has_phi else math.inf,
            beta1=float(row[sl["beta1"]][0]) if self.extended else None,
        )

    def to_dict(self) -> dict:
        return {
            "sites": list(self.sites),
            "years": list(self.years),
            "stations": list(self.stations),
            "site_year_pairs": [[s, y] for s, y in self.site_year_pairs],
            "likelihood": self.likelihood,
            "extended": self.extended,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "ParameterLayout":
        return cls(
            sites=tuple(payload["sites"]),
            years=tuple(int(y) for y in payload["years"]),
            stations=tuple(payload["stations"]),
            site_year_pairs=tuple((s, int(y)) for s, y in payload["site_year_pairs"]),
            likelihood=payload.get("likelihood", NEGATIVE_BINOMIAL),
            extended=bool(payload.get("extended", False)),
        )


def nb_log_pmf(y, mu, phi):
    """Log pmf of NB(mu, phi) in the mean-shape parameterisation.

    Accepts scalars or arrays; phi = inf gives the Poisson limit exactly.
    """
    y_arr = np.asarray(y, dtype=np.float64)
    mu_arr = np.asarray(mu, dtype=np.float64)
    phi_arr = np.asarray(phi, dtype=np.float64)
    if np.any(y_arr < 0) or np.any(y_arr != np.floor(y_arr)):
        raise ValueError("y must be a non-negative integer")
    if not np.all(np.isfinite(mu_arr)) or np.any(mu_arr <= 0):
        raise ValueError("mu must be finite and positive")
    if np.any(np.isnan(phi_arr)) or np.any(phi_arr <= 0):
        raise ValueError("phi must be positive")

    poisson = y_arr * np.log(mu_arr) - mu_arr - gammaln(y_arr + 1.0)
    if np.all(np.isinf(phi_arr)):
        out = poisson
    else:
        with np.errstate(invalid="ignore"):
            nb = (
                gammaln(y_arr + phi_arr)
                - gammaln(phi_arr)
                - gammaln(y_arr + 1.0)
                - (y_arr + phi_arr) * np.log1p(mu_arr / phi_arr)
                + y_arr * (np.log(mu_arr) - np.log(phi_arr))
            )
        out = np.where(np.isinf(phi_arr), poisson, nb)
    return float(out) if out.ndim == 0 else out


def poisson_log_pmf(y, mu):
    y_arr = np.asarray(y, dtype=np.float64)
    mu_arr = np.asarray(mu, dtype=np.float64)
    out = y_arr * np.log(mu_arr) - mu_arr - gammaln(y_arr + 1.0)
    return float(out) if out.ndim == 0 else out


def linear_predictor(params: ModelParameters, obs_index: int, table: ObservationTable) -> float:
    """ln(mu) for one observation under the given parameters."""
    obs = table.observations[obs_index]
    eta = (
        params.beta0
        + params.delta_B[table.stations.index(obs.station_id)]
        + params.delta_S[table.sites.index(obs.site)]
        + params.delta_Y[table.years.index(obs.year)]
        + params.delta_SY[table.site_year_pairs.index((obs.site, obs.year))]
    )
    return float(eta)


class ModelDesign:
    """Precomputed design for fast repeated density/gradient evaluation.

    Instances are immutable after construction and safe to share across
    threads; all evaluation methods are pure functions of theta.
    """

    def __init__(
        self,
        table: ObservationTable,
        priors: PriorConfig | None = None,
        extension: BeforeAfterExtension | None = None,
        likelihood: str = NEGATIVE_BINOMIAL,
    ):
        self.table = table
        self.priors = priors or PriorConfig()
        self.likelihood = likelihood
        self.layout = ParameterLayout.for_table(table, likelihood, extended=extension is not None)
        idx = table.design_indices()
        self._b = idx["station"]
        self._s = idx["site"]
        self._y = idx["year"]
        self._sy = idx["pair"]
        self._a = table.counts().astype(np.float64)
        self._a_sum = float(self._a.sum())
        self._n = len(table)
        self._gammaln_a1_sum = float(gammaln(self._a + 1.0).sum())
        if extension is not None and len(extension.x) != self._n:
            raise ValueError("extension design vector length must match the table")
        self._x = extension.x if extension is not None else None
        sl = self.layout._block_slices()
        self._sl = sl
        self._nB = len(table.stations)
        self._nS = len(table.sites)
        self._nY = len(table.years)
        self._nSY = len(table.site_year_pairs)
        if min(self._nB, self._nS, self._nY, self._nSY) == 0:
            raise ValueError("every index list must be non-empty")

        # fused layout of the four zeta blocks for vectorised evaluation
        sizes = np.array([self._nB, self._nS, self._nY, self._nSY])
        starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        self._block_sizes = sizes
        self._block_starts = starts
        self._n_zeta = int(sizes.sum())
        self._zc = slice(1, 1 + self._n_zeta)
        self._u = slice(1 + self._n_zeta, 5 + self._n_zeta)
        self._gather = np.vstack(
            [self._b + starts[0], self._s + starts[1], self._y + starts[2], self._sy + starts[3]]
        )
        self._gather_flat = self._gather.ravel()
        self._sig_expand = np.repeat(np.arange(4), sizes)

    # -- evaluation ------------------------------------------------------

    def value_and_grad(self, theta: np.ndarray) -> tuple[float, np.ndarray]:
        """Joint log density (likelihood + priors + Jacobians) and its gradient."""
        theta = np.asarray(theta, dtype=np.float64)
        pr = self.priors
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            beta0 = theta[0]
            zc = theta[self._zc]
            u = theta[self._u]
            sig = np.exp(u)
            if not math.isfinite(float(sig.sum())):
                return -math.inf, np.zeros_like(theta)
            pos = self._u.stop
            if self.layout.has_phi:
                w = theta[pos]
                phi = _safe_exp(w)
                if not math.isfinite(phi) or phi <= 0:
                    return -math.inf, np.zeros_like(theta)
                pos += 1
            beta1 = theta[pos] if self.layout.extended else None

            eta = (zc[self._gather] * sig[:, None]).sum(axis=0)
            eta += beta0
            if beta1 is not None:
                eta += beta1 * self._x
            eta_c = np.minimum(np.maximum(eta, -LINPRED_CLAMP), LINPRED_CLAMP)
            inside = eta == eta_c
            mu = np.exp(eta_c)
            a = self._a

            if self.layout.has_phi:
                log1p_ratio = np.log1p(mu / phi)
                denom = phi + mu
                loglik = float(
                    gammaln(a + phi).sum()
                    - self._n * gammaln(phi)
                    - self._gammaln_a1_sum
                    - ((a + phi) * log1p_ratio).sum()
                    + float(a @ eta_c)
                    - w * self._a_sum
                )
                dlog_mu = a - mu * (a + phi) / denom
                dphi_sum = float(
                    (digamma(a + phi) - digamma(phi) - log1p_ratio + (mu - a) / denom).sum()
                )
            else:
                loglik = float(a @ eta_c - mu.sum()) - self._gammaln_a1_sum
                dlog_mu = a - mu

            g = np.where(inside, dlog_mu, 0.0)
            grad = np.empty_like(theta)

            # intercept: likelihood score plus the normal prior score
            logp = loglik
            logp += -0.5 * _LOG_2PI - math.log(pr.beta0_sd)
            logp += -0.5 * ((beta0 - pr.beta0_mean) / pr.beta0_sd) ** 2
            grad[0] = g.sum() - (beta0 - pr.beta0_mean) / pr.beta0_sd**2

            # all four zeta blocks at once via the fused gather layout
            logp += -0.5 * self._n_zeta * _LOG_2PI - 0.5 * float(zc @ zc)
            bc = np.bincount(
                self._gather_flat,
                weights=np.broadcast_to(g, (4, self._n)).ravel(),
                minlength=self._n_zeta,
            )
            grad[self._zc] = sig[self._sig_expand] * bc - zc

            # Gamma(shape, rate) on sigma_* in u = log sigma (Jacobian folded in):
            #   shape*log(rate) - lgamma(shape) + shape*u - rate*exp(u)
            a_s, r_s = pr.sigma_shape, pr.sigma_rate
            logp += 4.0 * (a_s * math.log(r_s) - gammaln(a_s))
            logp += float(a_s * u.sum() - r_s * sig.sum())
            dots = np.add.reduceat(zc * bc, self._block_starts)
            grad[self._u] = sig * dots + (a_s - r_s * sig)

            pos = self._u.stop
            if self.layout.has_phi:
                a_p, r_p = pr.phi_shape, pr.phi_rate
                logp += a_p * math.log(r_p) - float(gammaln(a_p)) + a_p * w - r_p * phi
                grad[pos] = phi * dphi_sum + (a_p - r_p * phi)
                pos += 1

            if self.layout.extended:
                logp += -0.5 * _LOG_2PI - math.log(pr.beta1_sd)
                logp += -0.5 * ((beta1 - pr.beta1_mean) / pr.beta1_sd) ** 2
                grad[pos] = float(g @ self._x) - (beta1 - pr.beta1_mean) / pr.beta1_sd**2

        if not math.isfinite(logp):
            return -math.inf, np.zeros_like(theta)
        return logp, grad

    def log_density(self, theta: np.ndarray) -> float:
        return self.value_and_grad(theta)[0]

    def gradient(self, theta: np.ndarray) -> np.ndarray:
        return self.value_and_grad(theta)[1]

    # -- parameter-space helpers ----------------------------------------

    def mu(self, params: ModelParameters) -> np.ndarray:
        """Fitted means for every observation under constrained parameters."""
        eta = (
            params.beta0
            + params.delta_B[self._b]
            + params.delta_S[self._s]
            + params.delta_Y[self._y]
            + params.delta_SY[self._sy]
        )
        if params.beta1 is not None and self._x is not None:
            eta = eta + params.beta1 * self._x
        return np.exp(np.clip(eta, -LINPRED_CLAMP, LINPRED_CLAMP))


def log_posterior(
    theta: np.ndarray,
    table: ObservationTable,
    priors: PriorConfig | None = None,
    extension: BeforeAfterExtension | None = None,
    likelihood: str = NEGATIVE_BINOMIAL,
) -> float:
    """Unnormalised log posterior in unconstrained space (Jacobians included)."""
    return ModelDesign(table, priors, extension, likelihood).log_density(theta)


def grad_log_posterior(
    theta: np.ndarray,
    table: ObservationTable,
    priors: PriorConfig | None = None,
    extension: BeforeAfterExtension | None = None,
    likelihood: str = NEGATIVE_BINOMIAL,
) -> np.ndarray:
    """Analytic gradient of :func:`log_posterior` for every coordinate."""
    return ModelDesign(table, priors, extension, likelihood).gradient(theta)


def nb_sample(rng: np.random.Generator, mu: np.ndarray, phi: float) -> np.ndarray:
    """Draw NB(mu, phi) counts; phi = inf falls back to Poisson."""
    mu = np.asarray(mu, dtype=np.float64)
    if math.isinf(phi):
        return rng.poisson(mu)
    return rng.negative_binomial(phi, phi / (phi + mu))


def sample_prior_parameters(
    table: ObservationTable,
    priors: PriorConfig | None = None,
    rng: np.random.Generator | None = None,
    likelihood: str = NEGATIVE_BINOMIAL,
) -> ModelParameters:
    """One draw of the full parameter block from the priors."""
    pr = priors or PriorConfig()
    rng = rng if rng is not None else np.random.default_rng()
    scale = 1.0 / pr.sigma_rate
    return ModelParameters(
        beta0=float(rng.normal(pr.beta0_mean, pr.beta0_sd)),
        zeta_B=rng.normal(size=len(table.stations)),
        zeta_S=rng.normal(size=len(table.sites)),
        zeta_Y=rng.normal(size=len(table.years)),
        zeta_SY=rng.normal(size=len(table.site_year_pairs)),
        sigma_B=float(rng.gamma(pr.sigma_shape, scale)),
        sigma_S=float(rng.gamma(pr.sigma_shape, scale)),
        sigma_Y=float(rng.gamma(pr.sigma_shape, scale)),
        sigma_SY=float(rng.gamma(pr.sigma_shape, scale)),
        phi=float(rng.gamma(pr.phi_shape, 1.0 / pr.phi_rate))
        if likelihood == NEGATIVE_BINOMIAL
        else math.inf,
    )


def prior_predictive_sample(
    table: ObservationTable,
    priors: PriorConfig | None = None,
    rng: np.random.Generator | None = None,
    likelihood: str = NEGATIVE_BINOMIAL,
) -> ObservationTable:
    """Simulate a dataset on the table's design from the priors."""
    rng = rng if rng is not None else np.random.default_rng()
    params = sample_prior_parameters(table, priors, rng, likelihood)
    return table.with_counts(posterior_predictive_sample(params, table, rng))


def posterior_predictive_sample(
    params: ModelParameters,
    table: ObservationTable,
    rng: np.random.Generator,
) -> np.ndarray:
    """One replicated response vector using the draw's means and phi."""
    design = ModelDesign(table, likelihood=POISSON if math.isinf(params.phi) else NEGATIVE_BINOMIAL)
    return nb_sample(rng, design.mu(params), params.phi)
