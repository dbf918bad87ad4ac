"""Simulation-based evaluation of the monitoring design.

For each cell of a decline (rho) x effort (alpha stations per site) grid,
repeatedly: draw one fitted posterior parameter set, simulate undisturbed
data on the original design, simulate a disturbed new year whose mean is
the baseline-year mean scaled by rho, refit the model with a before/after
dummy, and record the posterior probability that the disturbance effect is
negative plus the health-category credibilities of the re-estimated
decline. Cell means over replicates estimate detection power and the
expected category calls.

Replicates are independent jobs with pre-assigned seed streams, so grids
are reproducible, can run on a process pool, and can resume from a
checkpoint directory by replicate id.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from numpy.random import SeedSequence, default_rng

from ._io import read_json, write_csv, write_json
from .data import AggregatedObservation, ObservationTable
from .indicators import CategoryScheme, FoldChangePosterior, credibility
from .model import BeforeAfterExtension, ModelDesign, ModelParameters, PriorConfig, nb_sample
from .sampler import PosteriorDraws, SamplerConfig, SamplerError, fit_model

DEFAULT_RHO_LEVELS = (0.05, 0.25, 0.5, 0.7, 0.9, 1.0)
DEFAULT_ALPHA_LEVELS = (5, 10, 20)

# Desk-scale refit default; the full-size setting used for the main fit is
# a cluster-scale job across thousands of replicates.
DESK_FIT_CONFIG = SamplerConfig(
    chains=2, iterations=1500, warmup=750, target_accept=0.95, max_treedepth=12
)


class SimulationError(RuntimeError):
    """The grid could not produce a usable result. CLI maps this to exit 5."""


@dataclass(frozen=True)
class ScenarioGrid:
    """Decline x effort grid with a replicate count per cell."""

    rho_levels: tuple[float, ...] = DEFAULT_RHO_LEVELS
    alpha_levels: tuple[int, ...] = DEFAULT_ALPHA_LEVELS
    replicates: int = 500

    def __post_init__(self):
        if not self.rho_levels or any(r <= 0 for r in self.rho_levels):
            raise ValueError("rho levels must be positive")
        if not self.alpha_levels or any(a < 1 for a in self.alpha_levels):
            raise ValueError("alpha levels must be positive station counts")
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        object.__setattr__(self, "rho_levels", tuple(float(r) for r in self.rho_levels))
        object.__setattr__(self, "alpha_levels", tuple(int(a) for a in self.alpha_levels))

    @property
    def cells(self) -> "list[tuple[float, int]]":
        return [(rho, alpha) for rho in self.rho_levels for alpha in self.alpha_levels]

    def validate_for(self, table: ObservationTable) -> None:
        base = max(len(table.stations_of_site(site)) for site in table.sites)
        low = [a for a in self.alpha_levels if a < base]
        if low:
            raise ValueError(
                f"alpha levels {low} are below the base station count per site ({base})"
            )


@dataclass(frozen=True)
class NewYearBlock:
    """Disturbed new-year simulation output with its station design."""

    sites: tuple[str, ...]
    stations: tuple[str, ...]
    mu: np.ndarray
    a_star: np.ndarray
    n_new_stations: int


@dataclass(frozen=True)
class SimulatedDataset:
    """One replicate's simulated responses and provenance."""

    a_baseline: np.ndarray
    a_new: np.ndarray
    draw_index: int
    rho: float
    alpha: int

    def __post_init__(self):
        if len(self.a_new) == 0:
            raise ValueError("new-year block is empty")

    @property
    def combined(self) -> np.ndarray:
        """Baseline block followed by the new-year block."""
        return np.concatenate([self.a_baseline, self.a_new])


def simulate_baseline(
    params: ModelParameters, table: ObservationTable, rng: np.random.Generator
) -> np.ndarray:
    """Simulate undisturbed responses at the original design points."""
    design = ModelDesign(table)
    return nb_sample(rng, design.mu(params), params.phi)


def simulate_new_year(
    params: ModelParameters,
    table: ObservationTable,
    rho: float,
    alpha: int,
    rng: np.random.Generator,
    baseline_year: int | None = None,
) -> NewYearBlock:
    """Simulate a disturbed new year at ``alpha`` stations per site.

    The new-year mean is the fitted baseline-year mean scaled by rho, with
    freshly drawn year and site-year deviations. Original station effects
    are reused; new station effects are drawn only for the stations added
    beyond each site's existing ones.
    """
    if rho <= 0:
        raise ValueError("rho must be positive")
    baseline_year = baseline_year if baseline_year is not None else min(table.years)
    year_pos = table.years.index(baseline_year)
    station_pos = {s: i for i, s in enumerate(table.stations)}

    delta_y_new = float(rng.normal(0.0, params.sigma_Y))
    base_term = params.beta0 + params.delta_Y[year_pos] + math.log(rho)

    sites, stations, log_mu = [], [], []
    total_new = 0
    for site_idx, site in enumerate(table.sites):
        existing = table.stations_of_site(site)
        if alpha < len(existing):
            raise ValueError(
                f"alpha={alpha} is below the {len(existing)} existing stations at {site!r}"
            )
        n_new = alpha - len(existing)
        total_new += n_new
        delta_sy_new = float(rng.normal(0.0, params.sigma_SY))
        site_term = base_term + params.delta_S[site_idx] + delta_y_new + delta_sy_new
        for station in existing:
            sites.append(site)
            stations.append(station)
            log_mu.append(site_term + params.delta_B[station_pos[station]])
        new_effects = rng.normal(0.0, params.sigma_B, size=n_new)
        for j in range(n_new):
            sites.append(site)
            stations.append(f"{site}+sim{j + 1:02d}")
            log_mu.append(site_term + float(new_effects[j]))

    mu = np.exp(np.clip(np.array(log_mu), -40.0, 40.0))
    return NewYearBlock(
        sites=tuple(sites),
        stations=tuple(stations),
        mu=mu,
        a_star=nb_sample(rng, mu, params.phi),
        n_new_stations=total_new,
    )


def extend_table(
    table: ObservationTable,
    a_baseline: np.ndarray,
    block: NewYearBlock,
    new_year: int,
) -> ObservationTable:
    """Concatenate simulated baseline rows with the new-year block."""
    observations = [
        AggregatedObservation(o.site, o.year, o.station_id, int(v))
        for o, v in zip(table.observations, a_baseline)
    ]
    observations += [
        AggregatedObservation(site, new_year, station, int(v))
        for site, station, v in zip(block.sites, block.stations, block.a_star)
    ]
    return ObservationTable.from_observations(observations)


@dataclass(frozen=True)
class ReplicateResult:
    rho: float
    alpha: int
    replicate: int
    draw_index: int
    ok: bool
    p_beta1_negative: float | None
    category_probs: "dict[str, float] | None"
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "rho": self.rho,
            "alpha": self.alpha,
            "replicate": self.replicate,
            "draw_index": self.draw_index,
            "ok": self.ok,
            "p_beta1_negative": self.p_beta1_negative,
            "category_probs": self.category_probs,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "ReplicateResult":
        return cls(
            rho=float(payload["rho"]),
            alpha=int(payload["alpha"]),
            replicate=int(payload["replicate"]),
            draw_index=int(payload["draw_index"]),
            ok=bool(payload["ok"]),
            p_beta1_negative=payload.get("p_beta1_negative"),
            category_probs=payload.get("category_probs"),
            error=payload.get("error"),
        )


@dataclass(frozen=True)
class CellResult:
    rho: float
    alpha: int
    mean_power: float
    mean_category_probs: dict[str, float]
    completed: int
    failed: int


@dataclass(frozen=True)
class PowerResult:
    """Aggregated grid output plus the raw per-replicate records."""

    grid: ScenarioGrid
    scheme: CategoryScheme
    seed: int
    cells: tuple[CellResult, ...]
    replicates: tuple[ReplicateResult, ...]

    def cell(self, rho: float, alpha: int) -> CellResult:
        for c in self.cells:
            if math.isclose(c.rho, rho) and c.alpha == alpha:
                return c
        raise KeyError(f"no cell for rho={rho}, alpha={alpha}")

    def cells_csv(self, path) -> None:
        header = ["rho", "alpha", "mean_power", "completed", "failed"] + [
            f"p_{label.replace(' ', '_')}" for label in self.scheme.labels
        ]
        rows = []
        for c in self.cells:
            rows.append(
                [c.rho, c.alpha, c.mean_power, c.completed, c.failed]
                + [c.mean_category_probs[label] for label in self.scheme.labels]
            )
        write_csv(path, header, rows)

    def replicates_json(self, path) -> None:
        write_json(
            path,
            {
                "seed": self.seed,
                "grid": {
                    "rho_levels": list(self.grid.rho_levels),
                    "alpha_levels": list(self.grid.alpha_levels),
                    "replicates": self.grid.replicates,
                },
                "replicates": [r.to_dict() for r in self.replicates],
            },
        )


def _fold_change_draws(refit: PosteriorDraws, new_year: int, baseline: int,
                       include_beta1: bool) -> np.ndarray:
    d_new = refit.flat(f"zeta_Y[{new_year}]") * refit.flat("sigma_Y")
    d_base = refit.flat(f"zeta_Y[{baseline}]") * refit.flat("sigma_Y")
    log_ratio = d_new - d_base
    if include_beta1:
        log_ratio = log_ratio + refit.flat("beta1")
    return np.exp(log_ratio)


def run_replicate(
    table: ObservationTable,
    params: ModelParameters,
    rho: float,
    alpha: int,
    priors: PriorConfig,
    fit_config: SamplerConfig,
    scheme: CategoryScheme,
    sim_seed: SeedSequence,
    baseline_year: int,
    include_beta1_in_ratio: bool = False,
    draw_index: int = -1,
) -> tuple[float, dict[str, float]]:
    """Simulate one replicate, refit with the before/after dummy, score it.

    Returns P(beta1 < 0) and the category probabilities of the re-estimated
    decline ratio.
    """
    rng = default_rng(sim_seed)
    a_baseline = simulate_baseline(params, table, rng)
    block = simulate_new_year(params, table, rho, alpha, rng, baseline_year)
    dataset = SimulatedDataset(
        a_baseline=a_baseline, a_new=block.a_star, draw_index=draw_index, rho=rho, alpha=alpha
    )
    new_year = max(table.years) + 1
    combined = extend_table(table, dataset.a_baseline, block, new_year)
    extension = BeforeAfterExtension.for_new_year(combined, new_year)
    refit = fit_model(combined, priors=priors, config=fit_config, extension=extension)
    p_neg = float((refit.flat("beta1") < 0.0).sum()) / refit.total
    ratio = _fold_change_draws(refit, new_year, baseline_year, include_beta1_in_ratio)
    probs = credibility(
        FoldChangePosterior("overall", new_year, baseline_year, ratio), scheme
    )
    return p_neg, probs


def _replicate_task(args) -> ReplicateResult:
    (table, params, rho, alpha, rep, draw_index, priors, fit_config, scheme,
     sim_ss, fit_seed, baseline_year, include_beta1) = args
    try:
        p_neg, probs = run_replicate(
            table,
            params,
            rho,
            alpha,
            priors,
            replace(fit_config, seed=fit_seed),
            scheme,
            sim_ss,
            baseline_year,
            include_beta1,
            draw_index=draw_index,
        )
        return ReplicateResult(rho, alpha, rep, draw_index, True, p_neg, probs)
    except (SamplerError, ValueError) as exc:
        return ReplicateResult(rho, alpha, rep, draw_index, False, None, None, str(exc))


def _checkpoint_name(cell_index: int, rep: int) -> str:
    return f"rep_{cell_index:03d}_{rep:05d}.json"


def run_grid(
    fitted: PosteriorDraws,
    table: ObservationTable,
    grid: ScenarioGrid,
    fit_config: SamplerConfig | None = None,
    priors: PriorConfig | None = None,
    scheme: CategoryScheme | None = None,
    seed: int = 0,
    baseline_year: int | None = None,
    jobs: int = 1,
    checkpoint_dir: str | Path | None = None,
    include_beta1_in_ratio: bool = False,
    progress: bool = False,
) -> PowerResult:
    """Run the full decline x effort grid of replicate refits.

    Per cell, each replicate consumes one posterior draw chosen by a seeded
    without-replacement schedule. Failed replicate fits are recorded and
    skipped; cell means cover completed replicates only. With a checkpoint
    directory, finished replicates are loaded instead of re-run, and the
    final result is identical to an uninterrupted run with the same seed.
    """
    if fitted.layout is None:
        raise ValueError("fitted draws carry no model layout")
    grid.validate_for(table)
    fit_config = fit_config or DESK_FIT_CONFIG
    priors = priors or PriorConfig()
    scheme = scheme or CategoryScheme.default()
    baseline_year = baseline_year if baseline_year is not None else min(table.years)
    if baseline_year not in table.years:
        raise ValueError(f"baseline year {baseline_year} not present in the table")

    checkpoint = Path(checkpoint_dir) if checkpoint_dir else None
    done: dict[tuple[int, int], ReplicateResult] = {}
    if checkpoint:
        checkpoint.mkdir(parents=True, exist_ok=True)
        _check_grid_signature(checkpoint, grid, seed)
        for path in sorted(checkpoint.glob("rep_*.json")):
            payload = read_json(path)
            done[(int(payload["cell_index"]), int(payload["replicate"]))] = (
                ReplicateResult.from_dict(payload)
            )

    tasks = []
    pending_keys = []
    for cell_index, (rho, alpha) in enumerate(grid.cells):
        cell_ss = SeedSequence(seed, spawn_key=(cell_index,))
        schedule_rng = default_rng(cell_ss)
        n = fitted.total
        draw_schedule = schedule_rng.choice(n, size=grid.replicates, replace=grid.replicates > n)
        rep_seeds = cell_ss.spawn(grid.replicates)
        for rep in range(grid.replicates):
            if (cell_index, rep) in done:
                continue
            sim_ss, fit_ss = rep_seeds[rep].spawn(2)
            draw_index = int(draw_schedule[rep])
            params = fitted.parameters(draw_index)
            tasks.append(
                (
                    table,
                    params,
                    rho,
                    alpha,
                    rep,
                    draw_index,
                    priors,
                    fit_config,
                    scheme,
                    sim_ss,
                    int(fit_ss.generate_state(1, np.uint64)[0] >> 1),
                    baseline_year,
                    include_beta1_in_ratio,
                )
            )
            pending_keys.append((cell_index, rep))

    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            fresh = list(pool.map(_replicate_task, tasks, chunksize=1))
    else:
        fresh = []
        for i, task in enumerate(tasks):
            fresh.append(_replicate_task(task))
            if progress and (i + 1) % 10 == 0:
                print(f"  replicates {i + 1}/{len(tasks)} done", flush=True)

    for key, result in zip(pending_keys, fresh):
        done[key] = result
        if checkpoint:
            payload = result.to_dict()
            payload["cell_index"] = key[0]
            write_json(checkpoint / _checkpoint_name(*key), payload)

    cells = []
    for cell_index, (rho, alpha) in enumerate(grid.cells):
        results = [done[(cell_index, rep)] for rep in range(grid.replicates)]
        good = [r for r in results if r.ok]
        if good:
            mean_power = float(np.mean([r.p_beta1_negative for r in good]))
            mean_probs = {
                label: float(np.mean([r.category_probs[label] for r in good]))
                for label in scheme.labels
            }
        else:
            mean_power = math.nan
            mean_probs = {label: math.nan for label in scheme.labels}
        cells.append(
            CellResult(
                rho=rho,
                alpha=alpha,
                mean_power=mean_power,
                mean_category_probs=mean_probs,
                completed=len(good),
                failed=len(results) - len(good),
            )
        )

    ordered = [done[(ci, rep)] for ci in range(len(grid.cells)) for rep in range(grid.replicates)]
    return PowerResult(
        grid=grid,
        scheme=scheme,
        seed=seed,
        cells=tuple(cells),
        replicates=tuple(ordered),
    )


def _check_grid_signature(checkpoint: Path, grid: ScenarioGrid, seed: int) -> None:
    signature = {
        "rho_levels": list(grid.rho_levels),
        "alpha_levels": list(grid.alpha_levels),
        "replicates": grid.replicates,
        "seed": seed,
    }
    sig_path = checkpoint / "grid.json"
    if sig_path.exists():
        existing = read_json(sig_path)
        if existing != signature:
            raise SimulationError(
                f"checkpoint directory {checkpoint} was created for a different "
                f"grid or seed; use a fresh directory"
            )
    else:
        write_json(sig_path, signature)


def category_curve(result: PowerResult, scheme: CategoryScheme | None = None):
    """Mean category probabilities per decline level, with the truth's bin.

    Cells sharing a rho level (different efforts) are averaged with equal
    weight. Returns one row per rho level.
    """
    scheme = scheme or result.scheme
    rows = []
    for rho in result.grid.rho_levels:
        cells = [c for c in result.cells if math.isclose(c.rho, rho)]
        means = {
            label: float(np.mean([c.mean_category_probs[label] for c in cells]))
            for label in scheme.labels
        }
        rows.append(
            {
                "rho": rho,
                "expected_category": scheme.category_of(rho),
                **{f"p_{label.replace(' ', '_')}": means[label] for label in scheme.labels},
            }
        )
    return rows


def category_curve_csv(rows, path) -> None:
    if not rows:
        raise ValueError("no category-curve rows")
    header = list(rows[0].keys())
    write_csv(path, header, [[row[k] for k in header] for row in rows])
