"""Latent change score / growth curve models with individually varying
measurement occasions: model building, FIML estimation, derived change
quantities, and a Monte Carlo evaluation harness."""

__version__ = "0.1.0"

from .forms import (
    Framework,
    FunctionalForm,
    Kind,
    LoadingMatrix,
    ParameterSet,
    Schedule,
    build_loading_matrix,
    instantaneous_rate,
)
from .moments import (
    ImpliedMoments,
    LongitudinalSample,
    SingularCovarianceError,
    implied_moments,
    loglik,
    loglik_by_individual,
    loglik_gradient,
)
from .estimation import (
    FitConfig,
    FitResult,
    FitStatus,
    default_start,
    fit,
    information_criteria,
)
from .change import (
    DerivedChange,
    FactorScores,
    derived_moments,
    derived_moments_mc_check,
    factor_scores,
)
from .simulate import (
    MetricRow,
    MetricSummary,
    SimulationDesign,
    WAVES_6_EQUAL,
    WAVES_10_EQUAL,
    WAVES_10_UNEQUAL,
    compute_metrics,
    generate_dataset,
    preset_design,
    preset_names,
    run_study,
)

__all__ = [
    "__version__",
    "Framework",
    "FunctionalForm",
    "Kind",
    "LoadingMatrix",
    "ParameterSet",
    "Schedule",
    "build_loading_matrix",
    "instantaneous_rate",
    "ImpliedMoments",
    "LongitudinalSample",
    "SingularCovarianceError",
    "implied_moments",
    "loglik",
    "loglik_by_individual",
    "loglik_gradient",
    "FitConfig",
    "FitResult",
    "FitStatus",
    "default_start",
    "fit",
    "information_criteria",
    "DerivedChange",
    "FactorScores",
    "derived_moments",
    "derived_moments_mc_check",
    "factor_scores",
    "MetricRow",
    "MetricSummary",
    "SimulationDesign",
    "WAVES_6_EQUAL",
    "WAVES_10_EQUAL",
    "WAVES_10_UNEQUAL",
    "compute_metrics",
    "generate_dataset",
    "preset_design",
    "preset_names",
    "run_study",
]
