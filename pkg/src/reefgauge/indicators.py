"""Decision products: fold-change posteriors and traffic-light credibilities.

A fold change compares a year's modelled mean abundance with the baseline
year on the ratio scale; its posterior draws are binned into ordered
health-status categories. Credibility of a category is the fraction of
draws falling in its fold-change interval (empirical mass, no smoothing),
so credibilities always partition to one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._io import write_json
from ._svg import SvgCanvas
from .diagnostics import hdi
from .model import pair_name
from .sampler import PosteriorDraws

REPORT_STYLES = ("mean-only", "mean-interval", "full-credibility")


class ExcludedScopeError(ValueError):
    """A site cannot be compared to the baseline year (e.g. single-year site)."""


@dataclass(frozen=True)
class Category:
    """One health-status band on the fold-change scale: [lower, upper)."""

    label: str
    lower: float
    upper: float
    color: str


@dataclass(frozen=True)
class CategoryScheme:
    """Ordered, contiguous fold-change categories covering [0, inf)."""

    categories: tuple[Category, ...]

    def __post_init__(self):
        if not self.categories:
            raise ValueError("scheme has no categories")
        cats = self.categories
        if cats[0].lower != 0.0:
            raise ValueError("first category must start at 0")
        if not math.isinf(cats[-1].upper):
            raise ValueError("last category must extend to infinity")
        for a, b in zip(cats, cats[1:]):
            if a.upper != b.lower:
                raise ValueError(f"categories {a.label!r} and {b.label!r} are not contiguous")
        for c in cats:
            if not c.upper > c.lower:
                raise ValueError(f"category {c.label!r} is empty")
        if len({c.label for c in cats}) != len(cats):
            raise ValueError("duplicate category labels")

    @classmethod
    def default(cls) -> "CategoryScheme":
        """Traffic-light defaults; the 0.9 cut keeps 'very good' within a
        10% decline of baseline. All bounds are configuration, not contract."""
        return cls(
            (
                Category("poor", 0.0, 0.5, "#d7191c"),
                Category("fair", 0.5, 0.7, "#fdae61"),
                Category("good", 0.7, 0.9, "#a6d96a"),
                Category("very good", 0.9, math.inf, "#1a9641"),
            )
        )

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(c.label for c in self.categories)

    @property
    def colors(self) -> tuple[str, ...]:
        return tuple(c.color for c in self.categories)

    def category_of(self, value: float) -> str:
        if value < 0:
            raise ValueError("fold changes are non-negative")
        for c in self.categories:
            if c.lower <= value < c.upper:
                return c.label
        return self.categories[-1].label

    def to_jsonable(self) -> list:
        return [
            {
                "label": c.label,
                "lower": c.lower,
                "upper": None if math.isinf(c.upper) else c.upper,
                "color": c.color,
            }
            for c in self.categories
        ]

    @classmethod
    def from_jsonable(cls, payload) -> "CategoryScheme":
        cats = []
        for item in payload:
            upper = item.get("upper")
            cats.append(
                Category(
                    label=str(item["label"]),
                    lower=float(item["lower"]),
                    upper=math.inf if upper is None else float(upper),
                    color=str(item.get("color", "#777777")),
                )
            )
        return cls(tuple(cats))

    @classmethod
    def from_json(cls, path: str | Path) -> "CategoryScheme":
        import json

        return cls.from_jsonable(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class FoldChangePosterior:
    """Per-draw ratio of one scope-year's mean abundance to the baseline."""

    scope: str
    year: int
    baseline: int
    draws: np.ndarray

    def __post_init__(self):
        draws = np.asarray(self.draws, dtype=np.float64)
        if draws.ndim != 1 or len(draws) == 0:
            raise ValueError("draws must be a non-empty vector")
        if np.any(draws <= 0):
            raise ValueError("fold-change draws must be positive")
        object.__setattr__(self, "draws", draws)


def _year_delta(draws: PosteriorDraws, year: int) -> np.ndarray:
    layout = draws.layout
    if layout is None:
        raise ValueError("draws carry no model layout")
    if year not in layout.years:
        raise ValueError(f"year {year} was not in the fitted data")
    return draws.flat(f"zeta_Y[{year}]") * draws.flat("sigma_Y")


def _pair_delta(draws: PosteriorDraws, site: str, year: int) -> np.ndarray:
    layout = draws.layout
    if (site, year) not in layout.site_year_pairs:
        raise ExcludedScopeError(
            f"site {site!r} has no data for year {year}; it cannot be compared "
            f"to that baseline"
        )
    return draws.flat(f"zeta_SY[{pair_name(site, year)}]") * draws.flat("sigma_SY")


def fold_change(draws: PosteriorDraws, year: int, baseline: int) -> FoldChangePosterior:
    """Overall fold change: exp(Delta_year - Delta_baseline) per draw."""
    delta = _year_delta(draws, year) - _year_delta(draws, baseline)
    return FoldChangePosterior("overall", year, baseline, np.exp(delta))


def site_fold_change(
    draws: PosteriorDraws, site: str, year: int, baseline: int
) -> FoldChangePosterior:
    """Site-level fold change with the site-year interaction folded in.

    The site main effect cancels in the ratio; year effects and the
    site-year deviations both contribute.
    """
    layout = draws.layout
    if layout is None:
        raise ValueError("draws carry no model layout")
    if site not in layout.sites:
        raise ValueError(f"unknown site {site!r}")
    delta = (
        _year_delta(draws, year)
        + _pair_delta(draws, site, year)
        - _year_delta(draws, baseline)
        - _pair_delta(draws, site, baseline)
    )
    return FoldChangePosterior(site, year, baseline, np.exp(delta))


def credibility(posterior: FoldChangePosterior, scheme: CategoryScheme) -> dict[str, float]:
    """Posterior mass per category (relative area under the curve)."""
    draws = posterior.draws
    n = len(draws)
    return {
        c.label: float(((draws >= c.lower) & (draws < c.upper)).sum()) / n
        for c in scheme.categories
    }


def p_decline(posterior: FoldChangePosterior) -> float:
    """Probability the abundance declined: fraction of ratio draws below 1."""
    return float((posterior.draws < 1.0).sum()) / len(posterior.draws)


@dataclass(frozen=True)
class StatusEntry:
    scope: str
    year: int
    credibility: dict[str, float]
    p_decline: float
    median: float
    hdi_lower: float
    hdi_upper: float


@dataclass(frozen=True)
class StatusReport:
    """Credibility tables per scope and year, against one baseline year."""

    baseline: int
    scheme: CategoryScheme
    entries: tuple[StatusEntry, ...]
    excluded_sites: tuple[str, ...]

    def entry(self, scope: str, year: int) -> StatusEntry:
        for e in self.entries:
            if e.scope == scope and e.year == year:
                return e
        raise KeyError(f"no entry for {scope!r} year {year}")

    @property
    def scopes(self) -> tuple[str, ...]:
        seen = []
        for e in self.entries:
            if e.scope not in seen:
                seen.append(e.scope)
        return tuple(seen)

    def to_jsonable(self) -> dict:
        scopes: dict = {}
        for e in self.entries:
            scopes.setdefault(e.scope, {})[str(e.year)] = {
                "credibility": e.credibility,
                "p_decline": e.p_decline,
                "median": e.median,
                "hdi": [e.hdi_lower, e.hdi_upper],
            }
        return {
            "baseline_year": self.baseline,
            "scheme": self.scheme.to_jsonable(),
            "scopes": scopes,
            "excluded_sites": list(self.excluded_sites),
        }


def _entry(posterior: FoldChangePosterior, scheme: CategoryScheme) -> StatusEntry:
    draws = posterior.draws
    if len(draws) >= 20:
        lower, upper = hdi(draws)
    else:
        lower, upper = float(draws.min()), float(draws.max())
    return StatusEntry(
        scope=posterior.scope,
        year=posterior.year,
        credibility=credibility(posterior, scheme),
        p_decline=p_decline(posterior),
        median=float(np.median(draws)),
        hdi_lower=lower,
        hdi_upper=upper,
    )


def build_status_report(
    draws: PosteriorDraws,
    scheme: CategoryScheme | None = None,
    baseline: int | None = None,
) -> StatusReport:
    """Assemble overall and per-site credibilities for every fitted year.

    Sites lacking a baseline-year visit cannot be expressed relative to the
    baseline and are listed as excluded instead of reported.
    """
    layout = draws.layout
    if layout is None:
        raise ValueError("draws carry no model layout")
    scheme = scheme or CategoryScheme.default()
    baseline = int(baseline) if baseline is not None else min(layout.years)
    if baseline not in layout.years:
        raise ValueError(f"baseline year {baseline} was not in the fitted data")

    entries = [_entry(fold_change(draws, year, baseline), scheme) for year in layout.years]

    excluded = []
    for site in layout.sites:
        site_years = [y for s, y in layout.site_year_pairs if s == site]
        if baseline not in site_years:
            excluded.append(site)
            continue
        for year in site_years:
            entries.append(_entry(site_fold_change(draws, site, year, baseline), scheme))

    return StatusReport(
        baseline=baseline,
        scheme=scheme,
        entries=tuple(entries),
        excluded_sites=tuple(excluded),
    )


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def _interval_labels(entry: StatusEntry, scheme: CategoryScheme) -> list[str]:
    out = []
    for c in scheme.categories:
        if entry.hdi_lower < c.upper and entry.hdi_upper >= c.lower:
            out.append(c.label)
    return out


def _density_svg(entry: StatusEntry, posterior_draws: np.ndarray, scheme: CategoryScheme) -> SvgCanvas:
    """Histogram density of the ratio draws with category-coloured regions."""
    width, height, pad = 480, 260, 40
    draws = posterior_draws
    hi = max(1.2, float(np.quantile(draws, 0.995)))
    bins = np.linspace(0.0, hi, 81)
    dens, edges = np.histogram(draws, bins=bins, density=True)
    peak = dens.max() if dens.max() > 0 else 1.0

    def sx(v):
        return pad + (v / hi) * (width - 2 * pad)

    def sy(d):
        return height - pad - (d / peak) * (height - 2 * pad)

    canvas = SvgCanvas(width, height)
    color_of = {c.label: c.color for c in scheme.categories}
    for i, d in enumerate(dens):
        left, right = edges[i], edges[i + 1]
        mid = 0.5 * (left + right)
        canvas.rect(sx(left), sy(d), sx(right) - sx(left), sy(0) - sy(d),
                    fill=color_of[scheme.category_of(mid)], opacity=0.85)
    canvas.line(sx(0), sy(0), sx(hi), sy(0))
    canvas.line(sx(0), sy(0), sx(0), pad)
    if hi >= 1.0:
        canvas.line(sx(1.0), sy(0), sx(1.0), pad, stroke="#555555", dashed=True)
        canvas.text(sx(1.0), pad - 6, "no change", size=10, anchor="middle", fill="#555555")
    for tick in np.arange(0.0, hi + 1e-9, 0.25):
        canvas.line(sx(tick), sy(0), sx(tick), sy(0) + 4)
        canvas.text(sx(tick), sy(0) + 16, f"{tick:.2f}", size=9, anchor="middle")
    canvas.text(width / 2, height - 6, "fold change relative to baseline", size=11, anchor="middle")
    canvas.text(
        pad, 18,
        f"{entry.scope} {entry.year} vs baseline (P(decline) = {entry.p_decline:.2f})",
        size=12, bold=True,
    )
    x = pad
    for c in scheme.categories:
        canvas.rect(x, 24, 10, 10, fill=c.color)
        canvas.text(x + 14, 33, f"{c.label} {entry.credibility[c.label] * 100:.0f}%", size=10)
        x += 14 + 7 * len(c.label) + 42
    return canvas


def _pies_svg(report: StatusReport) -> SvgCanvas:
    """Grid of per-site, per-year credibility pies (bold very-good share)."""
    site_entries = [e for e in report.entries if e.scope != "overall"]
    sites = sorted({e.scope for e in site_entries})
    years = sorted({e.year for e in site_entries})
    cell, pad_left, pad_top = 110, 110, 50
    width = pad_left + cell * max(len(years), 1) + 20
    height = pad_top + cell * max(len(sites), 1) + 20
    canvas = SvgCanvas(width, height)
    best_label = report.scheme.labels[-1]
    for j, year in enumerate(years):
        canvas.text(pad_left + cell * j + cell / 2, pad_top - 16, str(year), size=12,
                    anchor="middle", bold=True)
    for i, site in enumerate(sites):
        canvas.text(12, pad_top + cell * i + cell / 2, site, size=11)
        for j, year in enumerate(years):
            try:
                entry = report.entry(site, year)
            except KeyError:
                continue
            cx = pad_left + cell * j + cell / 2
            cy = pad_top + cell * i + cell / 2 - 8
            fracs = [entry.credibility[label] for label in report.scheme.labels]
            canvas.pie(cx, cy, 34, fracs, report.scheme.colors)
            canvas.text(cx, cy + 52, f"{entry.credibility[best_label] * 100:.0f}%",
                        size=10, anchor="middle", bold=True)
    x = 12
    for c in report.scheme.categories:
        canvas.rect(x, height - 18, 10, 10, fill=c.color)
        canvas.text(x + 14, height - 9, c.label, size=10)
        x += 14 + 7 * len(c.label) + 16
    return canvas


def render_report(
    report: StatusReport,
    style: str,
    out_dir: str | Path,
    fold_posteriors: "dict[tuple[str, int], FoldChangePosterior] | None" = None,
) -> "list[Path]":
    """Write one communication style to ``out_dir`` and return the files.

    mean-only:        a single category label per scope-year, classified
                      from the posterior median ratio.
    mean-interval:    every category the 95% HDI intersects.
    full-credibility: the complete credibility table, plus density plots
                      (overall scope) and per-site pie tables when the
                      fold-change posteriors are supplied.
    """
    if style not in REPORT_STYLES:
        raise ValueError(f"style must be one of {REPORT_STYLES}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    scheme = report.scheme

    if style == "mean-only":
        payload = {}
        for e in report.entries:
            payload.setdefault(e.scope, {})[str(e.year)] = scheme.category_of(e.median)
        path = out / "report_mean_only.json"
        write_json(path, {"baseline_year": report.baseline, "classification": payload})
        written.append(path)
    elif style == "mean-interval":
        payload = {}
        for e in report.entries:
            payload.setdefault(e.scope, {})[str(e.year)] = _interval_labels(e, scheme)
        path = out / "report_mean_interval.json"
        write_json(path, {"baseline_year": report.baseline, "possible_categories": payload})
        written.append(path)
    else:
        path = out / "report_credibility.json"
        write_json(path, report.to_jsonable())
        written.append(path)
        if fold_posteriors:
            for (scope, year), posterior in sorted(fold_posteriors.items()):
                if scope != "overall" or year == report.baseline:
                    continue
                entry = report.entry(scope, year)
                svg_path = out / f"density_{scope}_{year}.svg"
                _density_svg(entry, posterior.draws, scheme).save(svg_path)
                written.append(svg_path)
        pies = out / "site_pies.svg"
        _pies_svg(report).save(pies)
        written.append(pies)
    return written
