"""No-U-Turn sampler with dual-averaging step size and windowed mass adaptation.

The transition is the multinomial NUTS variant: trajectory states are
weighted by exp(-(H - H0)) and candidates are drawn progressively while the
binary tree doubles, stopping on a U-turn of the endpoints (measured with
the current diagonal metric) or on divergence (energy error above 1000).

Warmup interleaves dual averaging of the step size toward a target
acceptance statistic with Stan-style expanding windows that re-estimate a
diagonal mass matrix from the warmup draws; each mass update restarts the
step-size adaptation from a freshly searched reasonable epsilon.

Every chain owns an independent, reproducible random stream derived by
SeedSequence spawning from (seed, chain index), so results are bit
reproducible and chains never interact.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from numpy.random import Generator, SeedSequence, default_rng

from ._io import read_json, write_csv, write_json
from .data import ObservationTable
from .model import (
    NEGATIVE_BINOMIAL,
    BeforeAfterExtension,
    ModelDesign,
    ModelParameters,
    ParameterLayout,
    PriorConfig,
)

# Hamiltonian error (natural-log units) beyond which a leapfrog step is
# flagged divergent; matches the convention of the reference samplers.
DIVERGENCE_THRESHOLD = 1000.0

_MAX_INIT_ATTEMPTS = 100
_DIAGNOSTIC_COLUMNS = ("divergent", "treedepth", "accept_stat", "energy")

Target = Callable[[np.ndarray], "tuple[float, np.ndarray]"]


class SamplerError(RuntimeError):
    """Base class for sampling failures."""


class TargetError(SamplerError):
    """The target density was unusable (non-finite at every initial point)."""


class InitializationError(SamplerError):
    """Warmup never produced a non-divergent trajectory."""


@dataclass(frozen=True)
class SamplerConfig:
    """Sampling run configuration.

    ``iterations`` counts warmup plus retained draws per chain, so each
    chain keeps ``iterations - warmup`` rows.
    """

    chains: int = 4
    iterations: int = 5000
    warmup: int = 2500
    target_accept: float = 0.99
    max_treedepth: int = 20
    seed: int = 0
    init_scale: float = 2.0
    jobs: int = 1

    def __post_init__(self):
        if self.chains < 1:
            raise ValueError("chains must be >= 1")
        if not 0 <= self.warmup < self.iterations:
            raise ValueError("need 0 <= warmup < iterations")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must be in (0, 1)")
        if self.max_treedepth < 1:
            raise ValueError("max_treedepth must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be a non-negative integer")
        if self.init_scale < 0:
            raise ValueError("init_scale must be non-negative")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")

    @property
    def kept(self) -> int:
        return self.iterations - self.warmup

    def to_dict(self) -> dict:
        return {
            "chains": self.chains,
            "iterations": self.iterations,
            "warmup": self.warmup,
            "target_accept": self.target_accept,
            "max_treedepth": self.max_treedepth,
            "seed": self.seed,
            "init_scale": self.init_scale,
            "jobs": self.jobs,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "SamplerConfig":
        return cls(**{k: payload[k] for k in cls().to_dict() if k in payload})


@dataclass(frozen=True)
class PosteriorDraws:
    """Retained constrained-space draws with per-draw sampler diagnostics."""

    names: tuple[str, ...]
    draws: np.ndarray          # (chains, kept, dim)
    divergent: np.ndarray      # (chains, kept) bool
    treedepth: np.ndarray      # (chains, kept) int
    accept_stat: np.ndarray    # (chains, kept) float
    energy: np.ndarray         # (chains, kept) float
    config: SamplerConfig
    layout: Optional[ParameterLayout] = None

    def __post_init__(self):
        chains, kept, dim = self.draws.shape
        if chains != self.config.chains or kept != self.config.kept:
            raise ValueError("draw matrix shape does not match the config")
        if dim != len(self.names):
            raise ValueError("column count does not match names")

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    @property
    def n_kept(self) -> int:
        return self.draws.shape[1]

    @property
    def total(self) -> int:
        return self.n_chains * self.n_kept

    @property
    def n_divergent(self) -> int:
        return int(self.divergent.sum())

    def _col(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown parameter {name!r}") from None

    def column(self, name: str) -> np.ndarray:
        """Per-chain matrix (chains, kept) for one named parameter."""
        return self.draws[:, :, self._col(name)]

    def flat(self, name: str) -> np.ndarray:
        """All retained draws of one parameter, chains concatenated in order."""
        return self.column(name).reshape(-1)

    def parameters(self, flat_index: int) -> ModelParameters:
        """Constrained parameter block for one retained draw (model fits only)."""
        if self.layout is None:
            raise ValueError("draws carry no model layout")
        chain, row = divmod(flat_index, self.n_kept)
        return self.layout.params_from_constrained(self.draws[chain, row])

    def save(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for k in range(self.n_chains):
            rows = []
            for i in range(self.n_kept):
                rows.append(
                    list(self.draws[k, i])
                    + [
                        int(self.divergent[k, i]),
                        int(self.treedepth[k, i]),
                        float(self.accept_stat[k, i]),
                        float(self.energy[k, i]),
                    ]
                )
            write_csv(out / f"draws_chain{k}.csv", list(self.names) + list(_DIAGNOSTIC_COLUMNS), rows)
        write_json(
            out / "meta.json",
            {
                "config": self.config.to_dict(),
                "names": list(self.names),
                "layout": self.layout.to_dict() if self.layout else None,
                "divergences": self.n_divergent,
                "chains": self.n_chains,
                "kept": self.n_kept,
            },
        )

    @classmethod
    def load(cls, out_dir: str | Path) -> "PosteriorDraws":
        out = Path(out_dir)
        meta = read_json(out / "meta.json")
        names = tuple(meta["names"])
        config = SamplerConfig.from_dict(meta["config"])
        chains, kept, dim = meta["chains"], meta["kept"], len(names)
        draws = np.empty((chains, kept, dim))
        divergent = np.empty((chains, kept), dtype=bool)
        treedepth = np.empty((chains, kept), dtype=np.int64)
        accept = np.empty((chains, kept))
        energy = np.empty((chains, kept))
        for k in range(chains):
            raw = np.genfromtxt(out / f"draws_chain{k}.csv", delimiter=",", skip_header=1)
            raw = raw.reshape(kept, dim + len(_DIAGNOSTIC_COLUMNS))
            draws[k] = raw[:, :dim]
            divergent[k] = raw[:, dim] > 0.5
            treedepth[k] = raw[:, dim + 1].astype(np.int64)
            accept[k] = raw[:, dim + 2]
            energy[k] = raw[:, dim + 3]
        layout = ParameterLayout.from_dict(meta["layout"]) if meta.get("layout") else None
        return cls(names, draws, divergent, treedepth, accept, energy, config, layout)


# ---------------------------------------------------------------------------
# adaptation machinery
# ---------------------------------------------------------------------------


class _DualAveraging:
    """Nesterov dual averaging of log(step size) toward a target acceptance."""

    def __init__(self, eps0: float, target: float, gamma=0.05, t0=10.0, kappa=0.75):
        self.mu = math.log(10.0 * eps0)
        self.target = target
        self.gamma = gamma
        self.t0 = t0
        self.kappa = kappa
        self.log_eps = math.log(eps0)
        self.log_eps_bar = 0.0
        self.h_bar = 0.0
        self.m = 0

    def update(self, accept_stat: float) -> float:
        self.m += 1
        frac = 1.0 / (self.m + self.t0)
        self.h_bar = (1.0 - frac) * self.h_bar + frac * (self.target - accept_stat)
        self.log_eps = self.mu - math.sqrt(self.m) / self.gamma * self.h_bar
        w = self.m ** (-self.kappa)
        self.log_eps_bar = w * self.log_eps + (1.0 - w) * self.log_eps_bar
        return math.exp(self.log_eps)

    def adapted(self) -> float:
        return math.exp(self.log_eps_bar) if self.m > 0 else math.exp(self.log_eps)


class _Welford:
    """Streaming mean/variance accumulator for the mass-matrix windows."""

    def __init__(self, dim: int):
        self.n = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def add(self, x: np.ndarray) -> None:
        self.n += 1
        delta = x - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (x - self.mean)

    def variance(self) -> np.ndarray:
        if self.n < 2:
            return np.ones_like(self.mean)
        var = self.m2 / (self.n - 1)
        # Stan-style shrinkage toward a small diagonal for short windows.
        return (self.n / (self.n + 5.0)) * var + 1e-3 * (5.0 / (self.n + 5.0))


@dataclass(frozen=True)
class AdaptationState:
    """Warmup schedule: mass-update iteration indices and window membership."""

    window_ends: tuple[int, ...]
    slow_start: int
    slow_end: int

    @classmethod
    def for_warmup(cls, warmup: int) -> "AdaptationState":
        if warmup < 20:
            return cls((), 0, 0)
        if warmup >= 1000:
            init_buffer, term_buffer, base_window = 75, 50, 25
        else:
            # proportional shrink of the 75/50/25 split used for long warmups
            init_buffer = max(1, round(0.075 * warmup))
            term_buffer = max(1, round(0.050 * warmup))
            base_window = max(1, round(0.025 * warmup))
        slow_end = warmup - term_buffer
        ends = []
        pos, size = init_buffer, base_window
        while pos < slow_end:
            end = pos + size
            if end + 2 * size > slow_end:
                ends.append(slow_end)
                break
            ends.append(end)
            pos, size = end, 2 * size
        return cls(tuple(ends), init_buffer, slow_end)

    def in_slow_window(self, iteration: int) -> bool:
        return self.slow_start <= iteration < self.slow_end

    def is_window_end(self, iteration: int) -> bool:
        return (iteration + 1) in self.window_ends


# ---------------------------------------------------------------------------
# NUTS transition
# ---------------------------------------------------------------------------


class _Point:
    """One phase-space state along a trajectory."""

    __slots__ = ("theta", "r", "logp", "grad", "energy")

    def __init__(self, theta, r, logp, grad, energy):
        self.theta = theta
        self.r = r
        self.logp = logp
        self.grad = grad
        self.energy = energy


class _Tree:
    __slots__ = ("minus", "plus", "prop", "logw", "stop", "diverged", "alpha_sum", "n_alpha")

    def __init__(self, minus, plus, prop, logw, stop, diverged, alpha_sum, n_alpha):
        self.minus = minus
        self.plus = plus
        self.prop = prop
        self.logw = logw
        self.stop = stop
        self.diverged = diverged
        self.alpha_sum = alpha_sum
        self.n_alpha = n_alpha


def leapfrog_step(
    theta: np.ndarray,
    r: np.ndarray,
    grad: np.ndarray,
    eps: float,
    inv_mass: np.ndarray,
    target: Target,
):
    """One leapfrog step of the Hamiltonian dynamics; returns (theta, r, logp, grad)."""
    r_half = r + 0.5 * eps * grad
    theta_new = theta + eps * inv_mass * r_half
    logp_new, grad_new = target(theta_new)
    r_new = r_half + 0.5 * eps * grad_new
    return theta_new, r_new, logp_new, grad_new


def _kinetic(r: np.ndarray, inv_mass: np.ndarray) -> float:
    return 0.5 * float(r @ (inv_mass * r))


def _energy(logp: float, r: np.ndarray, inv_mass: np.ndarray) -> float:
    if not math.isfinite(logp):
        return math.inf
    k = _kinetic(r, inv_mass)
    return -logp + k if math.isfinite(k) else math.inf


def _uturn(minus: _Point, plus: _Point, inv_mass: np.ndarray) -> bool:
    dq = plus.theta - minus.theta
    return float(dq @ (inv_mass * minus.r)) < 0.0 or float(dq @ (inv_mass * plus.r)) < 0.0


def _build_tree(
    depth: int,
    edge: _Point,
    direction: int,
    h0: float,
    eps: float,
    inv_mass: np.ndarray,
    target: Target,
    rng: Generator,
) -> _Tree:
    if depth == 0:
        theta, r, logp, grad = leapfrog_step(
            edge.theta, edge.r, edge.grad, direction * eps, inv_mass, target
        )
        energy = _energy(logp, r, inv_mass)
        d_h = energy - h0
        diverged = not (d_h < DIVERGENCE_THRESHOLD)
        point = _Point(theta, r, logp, grad, energy)
        logw = -d_h if math.isfinite(d_h) else -math.inf
        alpha = math.exp(min(0.0, -d_h)) if math.isfinite(d_h) else 0.0
        return _Tree(point, point, point, logw, diverged, diverged, alpha, 1)

    inner = _build_tree(depth - 1, edge, direction, h0, eps, inv_mass, target, rng)
    if inner.stop:
        return inner
    outer_edge = inner.minus if direction < 0 else inner.plus
    outer = _build_tree(depth - 1, outer_edge, direction, h0, eps, inv_mass, target, rng)

    logw = np.logaddexp(inner.logw, outer.logw)
    prop = inner.prop
    if not outer.stop and rng.random() < math.exp(min(0.0, outer.logw - logw)):
        prop = outer.prop
    minus = outer.minus if direction < 0 else inner.minus
    plus = inner.plus if direction < 0 else outer.plus
    stop = outer.stop or _uturn(minus, plus, inv_mass)
    return _Tree(
        minus,
        plus,
        prop,
        logw,
        stop,
        inner.diverged or outer.diverged,
        inner.alpha_sum + outer.alpha_sum,
        inner.n_alpha + outer.n_alpha,
    )


def _transition(
    current: _Point,
    eps: float,
    inv_mass: np.ndarray,
    max_treedepth: int,
    target: Target,
    rng: Generator,
):
    """One NUTS update; returns (point, accept_stat, treedepth, divergent)."""
    mass = 1.0 / inv_mass
    r0 = rng.normal(size=current.theta.shape) * np.sqrt(mass)
    h0 = _energy(current.logp, r0, inv_mass)
    start = _Point(current.theta, r0, current.logp, current.grad, h0)

    selected = start
    log_w_total = 0.0
    minus = plus = start
    alpha_sum, n_alpha = 0.0, 0
    diverged = False
    depth = 0

    while depth < max_treedepth:
        direction = 1 if rng.integers(0, 2) else -1
        edge = plus if direction > 0 else minus
        tree = _build_tree(depth, edge, direction, h0, eps, inv_mass, target, rng)
        alpha_sum += tree.alpha_sum
        n_alpha += tree.n_alpha
        diverged = diverged or tree.diverged
        if tree.stop:
            break
        # biased progressive sampling: favour the new subtree
        if rng.random() < math.exp(min(0.0, tree.logw - log_w_total)):
            selected = tree.prop
        log_w_total = float(np.logaddexp(log_w_total, tree.logw))
        if direction > 0:
            plus = tree.plus
        else:
            minus = tree.minus
        depth += 1
        if _uturn(minus, plus, inv_mass):
            break

    accept_stat = alpha_sum / max(n_alpha, 1)
    return selected, accept_stat, depth, diverged


def _find_reasonable_eps(point: _Point, inv_mass: np.ndarray, target: Target, rng: Generator) -> float:
    """Double/halve the step size until the one-step acceptance crosses 0.5."""
    eps = 1.0
    mass = 1.0 / inv_mass
    r0 = rng.normal(size=point.theta.shape) * np.sqrt(mass)
    h0 = _energy(point.logp, r0, inv_mass)

    def log_accept(eps_try: float) -> float:
        _, r1, logp1, _ = leapfrog_step(point.theta, r0, point.grad, eps_try, inv_mass, target)
        h1 = _energy(logp1, r1, inv_mass)
        return h0 - h1 if math.isfinite(h1) else -math.inf

    la = log_accept(eps)
    direction = 1.0 if la > math.log(0.5) else -1.0
    for _ in range(100):
        eps *= 2.0**direction
        la = log_accept(eps)
        if direction * la <= direction * math.log(0.5):
            break
        if not 1e-10 < eps < 1e10:
            break
    return min(max(eps, 1e-10), 1e10)


# ---------------------------------------------------------------------------
# chain driver
# ---------------------------------------------------------------------------


def _init_point(target: Target, dim: int, init_scale: float, rng: Generator) -> _Point:
    for _ in range(_MAX_INIT_ATTEMPTS):
        theta0 = rng.uniform(-init_scale, init_scale, dim)
        logp, grad = target(theta0)
        if math.isfinite(logp) and np.all(np.isfinite(grad)):
            return _Point(theta0, np.zeros(dim), logp, np.asarray(grad, dtype=np.float64), 0.0)
    raise TargetError(
        f"no finite log density found in {_MAX_INIT_ATTEMPTS} initialisation attempts"
    )


def _run_chain(target: Target, dim: int, config: SamplerConfig, chain_index: int):
    # extreme trajectories legitimately overflow; non-finite energies are
    # handled as divergences, so silence the per-op warnings wholesale
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        return _run_chain_impl(target, dim, config, chain_index)


def _run_chain_impl(target: Target, dim: int, config: SamplerConfig, chain_index: int):
    rng = default_rng(SeedSequence(config.seed, spawn_key=(chain_index,)))
    current = _init_point(target, dim, config.init_scale, rng)

    inv_mass = np.ones(dim)
    eps = _find_reasonable_eps(current, inv_mass, target, rng)
    averaging = _DualAveraging(eps, config.target_accept)
    schedule = AdaptationState.for_warmup(config.warmup)
    welford = _Welford(dim)

    kept = config.kept
    draws = np.empty((kept, dim))
    divergent = np.empty(kept, dtype=bool)
    treedepth = np.empty(kept, dtype=np.int64)
    accept = np.empty(kept)
    energy = np.empty(kept)
    any_clean_warmup = config.warmup == 0

    for it in range(config.iterations):
        warm = it < config.warmup
        current, a_stat, depth, div = _transition(
            current, eps, inv_mass, config.max_treedepth, target, rng
        )
        if warm:
            if not div:
                any_clean_warmup = True
            eps = averaging.update(a_stat)
            if schedule.in_slow_window(it):
                welford.add(current.theta)
            if schedule.is_window_end(it):
                inv_mass = np.maximum(welford.variance(), 1e-12)
                welford = _Welford(dim)
                eps = _find_reasonable_eps(current, inv_mass, target, rng)
                averaging = _DualAveraging(eps, config.target_accept)
            if it + 1 == config.warmup:
                eps = averaging.adapted()
        else:
            i = it - config.warmup
            draws[i] = current.theta
            divergent[i] = div
            treedepth[i] = depth
            accept[i] = a_stat
            energy[i] = current.energy

    if not any_clean_warmup:
        raise InitializationError(
            "every warmup iteration diverged; try a smaller init_scale or "
            "check the target's gradient"
        )
    return draws, divergent, treedepth, accept, energy


def _run_chain_task(args):
    return _run_chain(*args)


def sample(
    target: Target,
    dim: int,
    config: SamplerConfig,
    transform: Callable[[np.ndarray], np.ndarray] | None = None,
    names: "tuple[str, ...] | None" = None,
    layout: ParameterLayout | None = None,
) -> PosteriorDraws:
    """Run NUTS chains against ``target`` (log density and gradient).

    ``transform`` maps each retained unconstrained draw to the stored
    (constrained) row; ``names`` labels the stored columns. Chains run in
    separate processes when ``config.jobs`` > 1, which requires the target
    to be picklable; results are identical either way.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if names is None:
        names = tuple(f"theta{i}" for i in range(dim))
    if len(names) != dim:
        raise ValueError("names length must equal dim")

    tasks = [(target, dim, config, k) for k in range(config.chains)]
    if config.jobs > 1 and config.chains > 1:
        with ProcessPoolExecutor(max_workers=min(config.jobs, config.chains)) as pool:
            results = list(pool.map(_run_chain_task, tasks))
    else:
        results = [_run_chain(*t) for t in tasks]

    kept = config.kept
    draws = np.empty((config.chains, kept, dim))
    divergent = np.empty((config.chains, kept), dtype=bool)
    treedepth = np.empty((config.chains, kept), dtype=np.int64)
    accept = np.empty((config.chains, kept))
    energy = np.empty((config.chains, kept))
    for k, (d, dv, td, ac, en) in enumerate(results):
        if transform is not None:
            d = np.array([transform(row) for row in d])
        draws[k] = d
        divergent[k] = dv
        treedepth[k] = td
        accept[k] = ac
        energy[k] = en

    return PosteriorDraws(
        names=tuple(names),
        draws=draws,
        divergent=divergent,
        treedepth=treedepth,
        accept_stat=accept,
        energy=energy,
        config=config,
        layout=layout,
    )


def fit_model(
    table: ObservationTable,
    priors: PriorConfig | None = None,
    config: SamplerConfig | None = None,
    extension: BeforeAfterExtension | None = None,
    likelihood: str = NEGATIVE_BINOMIAL,
) -> PosteriorDraws:
    """Fit the abundance model to an observation table with NUTS."""
    if len(table) == 0:
        raise ValueError("cannot fit an empty table")
    config = config or SamplerConfig()
    design = ModelDesign(table, priors, extension, likelihood)
    layout = design.layout
    return sample(
        design.value_and_grad,
        layout.dim,
        config,
        transform=layout.constrain_vector,
        names=layout.names,
        layout=layout,
    )
