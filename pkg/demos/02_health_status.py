"""Turn a fitted posterior into traffic-light health-status products.

Shows the decision pipeline: per-year fold changes relative to the
baseline year, category credibilities as posterior mass, probability of
decline, and the three communication styles written as JSON/SVG files
under demo_output/.
"""

import math
from pathlib import Path

from numpy.random import default_rng

from reefgauge import (
    CategoryScheme,
    ModelParameters,
    SamplerConfig,
    build_status_report,
    credibility,
    fit_model,
    fold_change,
    grid_table,
    p_decline,
    posterior_predictive_sample,
    render_report,
    site_fold_change,
)

rng = default_rng(2019)
design = grid_table(["east", "west", "north"], [2018, 2019, 2020], 5)

# Simulate a population that genuinely dips in 2019: the year effect for
# 2019 sits below the 2018 baseline.
truth = ModelParameters(
    beta0=math.log(12.0),
    zeta_B=rng.normal(size=len(design.stations)),
    zeta_S=rng.normal(size=len(design.sites)),
    zeta_Y=[0.4, -0.8, 0.1],
    zeta_SY=rng.normal(size=len(design.site_year_pairs)),
    sigma_B=0.4, sigma_S=0.22, sigma_Y=0.6, sigma_SY=0.3,
    phi=2.5,
)
table = design.with_counts(posterior_predictive_sample(truth, design, rng))

config = SamplerConfig(chains=2, iterations=1500, warmup=750,
                       target_accept=0.99, max_treedepth=12, seed=2)
draws = fit_model(table, config=config)
print(f"fitted; divergences: {draws.n_divergent}")

# The default scheme: poor [0, 0.5), fair [0.5, 0.7), good [0.7, 0.9),
# very good [0.9, inf). Bounds and colours are plain configuration.
scheme = CategoryScheme.default()

for year in (2019, 2020):
    posterior = fold_change(draws, year, baseline=2018)
    probs = credibility(posterior, scheme)
    pretty = ", ".join(f"{k} {v * 100:.0f}%" for k, v in probs.items())
    print(f"{year} vs 2018: P(decline) = {p_decline(posterior):.2f}; {pretty}")

# Site-level view: the site-year interaction lets each site tell its own
# story against the shared baseline year.
posterior = site_fold_change(draws, "east", 2019, baseline=2018)
print(f"east 2019 vs 2018: median fold change {float(sorted(posterior.draws)[len(posterior.draws) // 2]):.2f}")

# One report, three communication styles.
report = build_status_report(draws, scheme, baseline=2018)
out = Path(__file__).parent / "demo_output"
posteriors = {("overall", y): fold_change(draws, y, 2018) for y in (2018, 2019, 2020)}
for style in ("mean-only", "mean-interval", "full-credibility"):
    files = render_report(report, style, out, posteriors)
    print(f"{style}: wrote {', '.join(p.name for p in files)}")
