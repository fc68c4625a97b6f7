"""Joint regression of the mean, scale and correlation of clustered responses.

Three stacked estimating equations are solved by successive scoring; the
block-triangular sandwich gives standard errors that account for the scale
and correlation equations depending on the mean.  Covariates for each
component can be chosen by LIC or QIC.
"""

from .exceptions import (
    CandidateLimitError,
    CovarianceRepairError,
    DivergenceError,
    GEEError,
    IdentifiabilityError,
)
from .fitter import FitOptions, FitResult, fit, initialize
from .model import (
    Cluster,
    ClusterDataset,
    LinkSpec,
    ModelSpec,
    ThetaVector,
    VarianceFunction,
    WorkingStructure,
    evaluate_marginals,
    get_link,
    get_variance_function,
    make_dataset,
)
from .equations import cluster_quantities, estimating_functions, evaluate
from .variance import SandwichResult, SlopeMatrix, block_diagnostics, sandwich
from .selection import (
    CandidateSupport,
    CriterionValue,
    SelectionResult,
    lic_joint,
    lic_marginal,
    qic,
    select,
)
from .simulate import (
    ReplicateSummary,
    ScenarioConfig,
    generate_cluster,
    lp_constant_variance_fit,
    run_estimation_study,
    run_selection_study,
    scenario_config,
)

__version__ = "0.1.0"

__all__ = [
    "CandidateLimitError",
    "CovarianceRepairError",
    "DivergenceError",
    "GEEError",
    "IdentifiabilityError",
    "FitOptions",
    "FitResult",
    "fit",
    "initialize",
    "Cluster",
    "ClusterDataset",
    "LinkSpec",
    "ModelSpec",
    "ThetaVector",
    "VarianceFunction",
    "WorkingStructure",
    "evaluate_marginals",
    "get_link",
    "get_variance_function",
    "make_dataset",
    "cluster_quantities",
    "estimating_functions",
    "evaluate",
    "SandwichResult",
    "SlopeMatrix",
    "block_diagnostics",
    "sandwich",
    "CandidateSupport",
    "CriterionValue",
    "SelectionResult",
    "lic_joint",
    "lic_marginal",
    "qic",
    "select",
    "ReplicateSummary",
    "ScenarioConfig",
    "generate_cluster",
    "lp_constant_variance_fit",
    "run_estimation_study",
    "run_selection_study",
    "scenario_config",
]
