"""Mode-matched inverse-gamma priors for multilevel variance components.

The package walks the full arc: construct a prior whose mode sits at a
stated variance (from a standard deviation with degrees of freedom, or from
a mode with chosen strength), fit the two-level random-intercept model by
conjugate Gibbs sampling or maximum likelihood, and run Monte Carlo studies
that score bias, RMSE, coverage, and error rates across prior regimes.
"""

from .distributions import (
    GammaDist,
    IgStats,
    InverseGammaPrior,
    ScaledChiSquare,
    chisq_to_gamma,
    gamma_reciprocal_to_ig,
    ig_reciprocal_to_gamma,
    ig_stats,
    quantile,
    sample,
    standard_gamma,
)
from .estimators import (
    EstimationError,
    FitResult,
    FitStats,
    GibbsDraws,
    McmcSettings,
    ParamEstimate,
    PosteriorSummary,
    PriorConfig,
    VariancePrior,
    fit_stats,
    gibbs_fit,
    gibbs_fit_multi,
    marginal_loglik,
    ml_fit,
    psrf,
    summarize,
)
from .harness import (
    REGIMES,
    CellMetrics,
    MetricRow,
    MetricSummary,
    ReplicateRecord,
    SensitivityRow,
    StudyPlan,
    TwoStageRule,
    compute_metrics,
    run_cell,
    run_grid,
    sensitivity_sweep,
    two_stage_cell,
)
from .model import (
    ConditionSpec,
    DesignMatrices,
    ModelFormula,
    TrueParams,
    TwoLevelDataset,
    build_design,
    generate,
    read_dataset_csv,
    solve_condition,
    write_dataset_csv,
)
from .priors import (
    DerivationTrace,
    ModeTarget,
    PriorStrength,
    SubsampleRule,
    derive_ig_from_sd,
    emit_prior_syntax,
    make_ig_from_mode,
    mode_matched_ig,
    perturb_strength,
    scale_for_subsample,
)

__version__ = "0.1.0"

__all__ = [
    "GammaDist",
    "InverseGammaPrior",
    "ScaledChiSquare",
    "IgStats",
    "ig_stats",
    "chisq_to_gamma",
    "gamma_reciprocal_to_ig",
    "ig_reciprocal_to_gamma",
    "sample",
    "standard_gamma",
    "quantile",
    "ModeTarget",
    "PriorStrength",
    "DerivationTrace",
    "SubsampleRule",
    "mode_matched_ig",
    "make_ig_from_mode",
    "derive_ig_from_sd",
    "scale_for_subsample",
    "perturb_strength",
    "emit_prior_syntax",
    "ConditionSpec",
    "TrueParams",
    "TwoLevelDataset",
    "ModelFormula",
    "DesignMatrices",
    "solve_condition",
    "generate",
    "build_design",
    "read_dataset_csv",
    "write_dataset_csv",
    "EstimationError",
    "VariancePrior",
    "PriorConfig",
    "McmcSettings",
    "ParamEstimate",
    "FitStats",
    "FitResult",
    "GibbsDraws",
    "PosteriorSummary",
    "ml_fit",
    "gibbs_fit",
    "gibbs_fit_multi",
    "fit_stats",
    "psrf",
    "summarize",
    "marginal_loglik",
    "REGIMES",
    "StudyPlan",
    "CellMetrics",
    "MetricRow",
    "MetricSummary",
    "ReplicateRecord",
    "TwoStageRule",
    "SensitivityRow",
    "compute_metrics",
    "run_cell",
    "run_grid",
    "two_stage_cell",
    "sensitivity_sweep",
    "__version__",
]
