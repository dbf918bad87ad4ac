"""reefgauge: Bayesian abundance monitoring for BRUVS count data.

A numpy/scipy library (plus a thin CLI) that fits a hierarchical
negative-binomial model of summed MaxN counts with a built-in No-U-Turn
sampler, turns posterior fold changes into traffic-light health-status
credibilities, and evaluates monitoring-design power by simulation.
"""

from .data import (
    AggregatedObservation,
    DataError,
    DeploymentRecord,
    EmptyTableError,
    IndicatorList,
    IndicatorSpecies,
    ObservationTable,
    RowError,
    SchemaError,
    aggregate,
    grid_table,
    parse_deployments,
)
from .diagnostics import (
    DispersionReport,
    PPCSummary,
    SummaryRow,
    bayes_r2,
    dispersion_check,
    hdi,
    ppc_summary,
    split_rhat,
    summary_table,
    variance_fold,
)
from .indicators import (
    Category,
    CategoryScheme,
    ExcludedScopeError,
    FoldChangePosterior,
    StatusEntry,
    StatusReport,
    build_status_report,
    credibility,
    fold_change,
    p_decline,
    render_report,
    site_fold_change,
)
from .model import (
    NEGATIVE_BINOMIAL,
    POISSON,
    BeforeAfterExtension,
    ModelDesign,
    ModelParameters,
    ParameterLayout,
    PriorConfig,
    grad_log_posterior,
    linear_predictor,
    log_posterior,
    nb_log_pmf,
    posterior_predictive_sample,
    prior_predictive_sample,
    sample_prior_parameters,
)
from .powersim import (
    PowerResult,
    ScenarioGrid,
    SimulatedDataset,
    SimulationError,
    category_curve,
    run_grid,
    simulate_baseline,
    simulate_new_year,
)
from .sampler import (
    InitializationError,
    PosteriorDraws,
    SamplerConfig,
    SamplerError,
    TargetError,
    fit_model,
    sample,
)

__version__ = "0.1.0"
