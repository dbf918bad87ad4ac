"""Command-line entry points: fit, report, diagnose, simulate.

Subcommands hand results to each other through files only (a draws
directory written by ``fit`` feeds the other three), so whole pipelines
are reproducible from (inputs, flags, seed). Exit codes: 0 success,
2 usage, 3 data error, 4 nonconvergence, 5 simulation failure.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
import warnings
from pathlib import Path

from numpy.random import SeedSequence, default_rng

from ._io import write_csv, write_json
from ._svg import SvgCanvas
from .data import DataError, IndicatorList, aggregate, load_schema, parse_deployments
from .diagnostics import (
    dispersion_check,
    max_rhat,
    ppc_summary,
    split_rhat,
    summary_table,
    summary_to_csv,
    summary_to_text,
)
from .indicators import (
    REPORT_STYLES,
    CategoryScheme,
    build_status_report,
    fold_change,
    render_report,
    site_fold_change,
)
from .model import PriorConfig
from .powersim import (
    DESK_FIT_CONFIG,
    ScenarioGrid,
    SimulationError,
    category_curve,
    category_curve_csv,
    run_grid,
)
from .sampler import PosteriorDraws, SamplerConfig, SamplerError, fit_model

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NONCONVERGENCE = 4
EXIT_SIMULATION = 5

SEED_ENV_VAR = "REEFGAUGE_SEED"
RHAT_LIMIT = 1.05

SUMMARY_PARAMS = ("exp(beta0)", "sigma_S", "sigma_Y", "sigma_SY", "sigma_B", "phi")


def _resolve_seed(args, required: bool) -> int | None:
    if args.seed is not None:
        return args.seed
    env = os.environ.get(SEED_ENV_VAR)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise DataError(f"{SEED_ENV_VAR}={env!r} is not an integer") from None
    if required:
        return None
    return 0


def _sampler_config(args, seed: int, defaults: SamplerConfig) -> SamplerConfig:
    return SamplerConfig(
        chains=args.chains if args.chains is not None else defaults.chains,
        iterations=args.iterations if args.iterations is not None else defaults.iterations,
        warmup=args.warmup if args.warmup is not None else defaults.warmup,
        target_accept=args.adapt_target if args.adapt_target is not None else defaults.target_accept,
        max_treedepth=args.max_treedepth if args.max_treedepth is not None else defaults.max_treedepth,
        seed=seed,
        jobs=args.jobs,
    )


def _load_table(args):
    data_path = Path(args.data)
    schema_path = data_path.with_suffix(data_path.suffix + ".schema.json")
    schema = load_schema(schema_path) if schema_path.exists() else None
    records = parse_deployments(data_path, schema)
    indicators = IndicatorList.from_json(args.indicators)
    return aggregate(records, indicators)


def _load_scheme(args) -> CategoryScheme:
    if args.scheme:
        return CategoryScheme.from_json(args.scheme)
    return CategoryScheme.default()


def _require_inputs(parser, paths) -> None:
    for p in paths:
        if p is not None and not Path(p).exists():
            parser.error(f"input file not found: {p}")


def cmd_fit(args, parser) -> int:
    _require_inputs(parser, [args.data, args.indicators])
    seed = _resolve_seed(args, required=False)
    table = _load_table(args)
    config = _sampler_config(args, seed, SamplerConfig())
    draws = fit_model(table, priors=PriorConfig(), config=config)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    draws.save(out)
    rows = summary_table(draws, SUMMARY_PARAMS)
    summary_to_csv(rows, out / "summary.csv")
    print(summary_to_text(rows), end="")

    worst = max_rhat(draws)
    print(f"divergences: {draws.n_divergent}")
    print(f"max R-hat: {worst:.4f}")
    if draws.n_chains >= 2 and (math.isnan(worst) or worst > RHAT_LIMIT):
        print(f"warning: chains did not converge (R-hat > {RHAT_LIMIT})", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    return EXIT_OK


def cmd_report(args, parser) -> int:
    _require_inputs(parser, [args.draws, args.scheme])
    draws = PosteriorDraws.load(args.draws)
    if draws.layout is None:
        raise DataError("draws directory was not produced by a model fit")
    scheme = _load_scheme(args)
    layout = draws.layout
    baseline = args.baseline_year if args.baseline_year is not None else min(layout.years)
    if baseline not in layout.years:
        raise DataError(f"baseline year {baseline} is not among the fitted years {layout.years}")

    report = build_status_report(draws, scheme, baseline)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "status.json", report.to_jsonable())

    posteriors = {}
    for year in layout.years:
        posteriors[("overall", year)] = fold_change(draws, year, baseline)
    for site in layout.sites:
        if site in report.excluded_sites:
            continue
        for s, year in layout.site_year_pairs:
            if s == site:
                posteriors[(site, year)] = site_fold_change(draws, site, year, baseline)

    written = [out / "status.json"]
    for style in REPORT_STYLES:
        written += render_report(report, style, out, posteriors)
    if report.excluded_sites:
        print(f"excluded single-year sites: {', '.join(report.excluded_sites)}")
    print(f"wrote {len(written)} report files to {out}")
    return EXIT_OK


def cmd_diagnose(args, parser) -> int:
    _require_inputs(parser, [args.draws, args.data, args.indicators])
    seed = _resolve_seed(args, required=False)
    draws = PosteriorDraws.load(args.draws)
    table = _load_table(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    rng = default_rng(SeedSequence(seed, spawn_key=(1,)))
    ppc = ppc_summary(draws, table, rng, n_rep=args.replicates or 1000)
    ppc.write_csv(out / "ppc_scatter.csv", out / "ppc_density.csv")
    _ppc_scatter_svg(ppc).save(out / "ppc_scatter.svg")
    _ppc_density_svg(ppc).save(out / "ppc_density.svg")

    config = _sampler_config(args, seed, SamplerConfig(chains=2, iterations=1500, warmup=750))
    report = dispersion_check(
        table, PriorConfig(), config, default_rng(SeedSequence(seed, spawn_key=(2,)))
    )
    write_json(out / "dispersion.json", report.to_dict())

    rhat_rows = []
    for name in draws.names:
        matrix = draws.column(name)
        if matrix.shape[0] >= 2 and matrix.shape[1] >= 4 and matrix.std() > 0:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                value = split_rhat(matrix)
            if not math.isnan(value):
                rhat_rows.append((name, value))
    write_csv(out / "rhat.csv", ["parameter", "rhat"], rhat_rows)

    print(f"dispersion: observed {report.observed_stat:.3f}, p = {report.p_value:.4f}")
    worst = max((r for _, r in rhat_rows), default=math.nan)
    print(f"max R-hat: {worst:.4f}")
    return EXIT_OK


def cmd_simulate(args, parser) -> int:
    _require_inputs(parser, [args.draws, args.data, args.indicators, args.scheme])
    seed = _resolve_seed(args, required=True)
    if seed is None:
        parser.error(f"simulate requires --seed (or {SEED_ENV_VAR})")
    draws = PosteriorDraws.load(args.draws)
    table = _load_table(args)
    scheme = _load_scheme(args)

    grid = ScenarioGrid(
        rho_levels=tuple(args.rho) if args.rho else ScenarioGrid().rho_levels,
        alpha_levels=tuple(args.alpha) if args.alpha else ScenarioGrid().alpha_levels,
        replicates=args.replicates if args.replicates is not None else 500,
    )
    print(f"grid: {len(grid.rho_levels)} decline x {len(grid.alpha_levels)} effort "
          f"= {len(grid.cells)} cells, {grid.replicates} replicates each")
    try:
        grid.validate_for(table)
    except ValueError as exc:
        parser.error(str(exc))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fit_defaults = _sampler_config(args, 0, DESK_FIT_CONFIG)
    result = run_grid(
        draws,
        table,
        grid,
        fit_config=fit_defaults,
        scheme=scheme,
        seed=seed,
        baseline_year=args.baseline_year,
        jobs=args.jobs,
        checkpoint_dir=args.checkpoint or out / "checkpoints",
        progress=True,
    )
    result.cells_csv(out / "power_cells.csv")
    result.replicates_json(out / "power_replicates.json")
    category_curve_csv(category_curve(result), out / "category_curve.csv")

    failed = sum(c.failed for c in result.cells)
    if any(c.completed == 0 for c in result.cells):
        print("error: at least one grid cell completed no replicates", file=sys.stderr)
        return EXIT_SIMULATION
    for c in result.cells:
        print(f"rho={c.rho:g} alpha={c.alpha}: power={c.mean_power:.3f} "
              f"({c.completed} ok, {c.failed} failed)")
    if failed:
        print(f"warning: {failed} replicate fits failed and were skipped", file=sys.stderr)
    return EXIT_OK


def _ppc_scatter_svg(ppc) -> SvgCanvas:
    width, height, pad = 360, 360, 45
    top = max(float(ppc.observed.max()), float(ppc.mean_predicted.max()), 1.0) * 1.05
    canvas = SvgCanvas(width, height)

    def sx(v):
        return pad + v / top * (width - 2 * pad)

    def sy(v):
        return height - pad - v / top * (height - 2 * pad)

    canvas.line(sx(0), sy(0), sx(top), sy(0))
    canvas.line(sx(0), sy(0), sx(0), sy(top))
    canvas.line(sx(0), sy(0), sx(top), sy(top), stroke="#888888", dashed=True)
    for obs, pred in zip(ppc.observed, ppc.mean_predicted):
        canvas.circle(sx(float(obs)), sy(float(pred)), 3, fill="#1f6fb4", opacity=0.7)
    canvas.text(width / 2, height - 8, "observed", size=11, anchor="middle")
    canvas.text(12, 20, "mean prediction", size=11)
    return canvas


def _ppc_density_svg(ppc) -> SvgCanvas:
    width, height, pad = 480, 280, 40
    peak = max(float(ppc.replicate_density.max()), float(ppc.observed_density.max()), 1e-9)
    top_bin = float(ppc.bins.max()) + 1
    canvas = SvgCanvas(width, height)

    def sx(v):
        return pad + v / top_bin * (width - 2 * pad)

    def sy(d):
        return height - pad - d / peak * (height - 2 * pad)

    step = max(1, ppc.n_replicates // 200)
    for r in range(0, ppc.n_replicates, step):
        pts = [(sx(b), sy(d)) for b, d in zip(ppc.bins, ppc.replicate_density[r])]
        canvas.polyline(pts, stroke="#bbbbbb", stroke_width=0.6)
    pts = [(sx(b), sy(d)) for b, d in zip(ppc.bins, ppc.observed_density)]
    canvas.polyline(pts, stroke="black", stroke_width=2.0)
    canvas.line(sx(0), sy(0), sx(top_bin), sy(0))
    canvas.text(width / 2, height - 8, "summed count", size=11, anchor="middle")
    canvas.text(12, 20, "density", size=11)
    return canvas


def _add_common(sub, *, data=False, draws=False, sampler=False, scheme=False):
    sub.add_argument("--out", required=True, help="output directory for this run")
    sub.add_argument("--seed", type=int, default=None,
                     help=f"random seed (falls back to {SEED_ENV_VAR})")
    sub.add_argument("--jobs", type=int, default=1, help="worker processes")
    if data:
        sub.add_argument("--data", required=True, help="deployment CSV")
        sub.add_argument("--indicators", required=True, help="indicator species JSON")
    if draws:
        sub.add_argument("--draws", required=True, help="draws directory from `fit`")
    if sampler:
        sub.add_argument("--chains", type=int, default=None)
        sub.add_argument("--iter", dest="iterations", type=int, default=None)
        sub.add_argument("--warmup", type=int, default=None)
        sub.add_argument("--adapt-target", dest="adapt_target", type=float, default=None)
        sub.add_argument("--max-treedepth", dest="max_treedepth", type=int, default=None)
    if scheme:
        sub.add_argument("--scheme", default=None, help="category scheme JSON")
        sub.add_argument("--baseline-year", dest="baseline_year", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="reefgauge",
        description="Fit, report and stress-test BRUVS abundance monitoring data",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    fit = subs.add_parser("fit", help="fit the abundance model and save draws")
    _add_common(fit, data=True, sampler=True)

    report = subs.add_parser("report", help="derive health-status credibilities")
    _add_common(report, draws=True, scheme=True)

    diagnose = subs.add_parser("diagnose", help="posterior predictive and dispersion checks")
    _add_common(diagnose, data=True, draws=True, sampler=True)
    diagnose.add_argument("--replicates", type=int, default=None,
                          help="posterior predictive replicates (default 1000)")

    simulate = subs.add_parser("simulate", help="power simulation over a decline x effort grid")
    _add_common(simulate, data=True, draws=True, sampler=True, scheme=True)
    simulate.add_argument("--rho", type=float, nargs="+", default=None,
                          help="decline factors (default 0.05 0.25 0.5 0.7 0.9 1)")
    simulate.add_argument("--alpha", type=int, nargs="+", default=None,
                          help="stations per site (default 5 10 20)")
    simulate.add_argument("--replicates", type=int, default=None,
                          help="replicates per cell (default 500)")
    simulate.add_argument("--checkpoint", default=None,
                          help="checkpoint directory (default <out>/checkpoints)")
    return parser


_COMMANDS = {
    "fit": cmd_fit,
    "report": cmd_report,
    "diagnose": cmd_diagnose,
    "simulate": cmd_simulate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args, parser)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except SimulationError as exc:
        print(f"simulation error: {exc}", file=sys.stderr)
        return EXIT_SIMULATION
    except SamplerError as exc:
        print(f"sampler error: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE


if __name__ == "__main__":
    sys.exit(main())
