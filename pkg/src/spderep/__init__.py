"""Bayesian non-stationary SPDE spatial modelling with replicated fields."""

__version__ = "0.1.0"

from .mesh import (
    FemMatrices,
    MeshError,
    Projector,
    TriangleMesh,
    assemble_fem,
    build_structured_mesh,
    project,
    read_mesh_json,
    write_mesh_json,
)
from .spde import (
    CovariateField,
    HyperParams,
    SpdeConfig,
    assemble_precision,
    local_params,
    matern_covariance,
    matern_variance,
    nominal_summary,
    stationary_summary,
)
from .priors import (
    CoherenceInputs,
    ElicitationError,
    GaussianPrior,
    QuantileTargets,
    nominal_prior_quantile,
    solve_nonstationary_prior,
    solve_stationary_prior,
    stationary_prior,
)
from .gmrf import (
    ConstraintSet,
    FactoredPrecision,
    FactorizationError,
    condition_on_constraints,
    constrained_log_density,
    factorize,
    gaussian_log_density,
    sample,
    selected_variances,
)
from .model import ModelConfig, ObservationSet, ReplicateModel
from .inference import (
    HyperPosterior,
    InferenceError,
    LatentSystem,
    explore_hyperposterior,
    joint_marginal_loglik,
    log_marginal_posterior,
    posterior_marginals,
    predict,
)
from .scores import (
    DicResult,
    ScoreReport,
    crps_gaussian,
    dic,
    field_recovery_scores,
    loo_cv,
)
from .simstudy import SimScenario, StudyInfra, run_study, sample_dataset
