"""Simulation-based calibration checks for Gaussian process regression code."""

__version__ = "0.1.0"

from .kernels import (
    InputPoints,
    KernelSpec,
    LinearCoregionalization,
    SquaredExponential,
    SumKernel,
    eval_kernel,
)
from .linalg import (
    CovMatrix,
    NotPositiveDefinite,
    SingularTriangular,
    cholesky_with_jitter,
    mvn_sample,
    triangular_solve,
)
from .models import (
    Exact,
    FaultSpec,
    GaussianLikelihood,
    GpModel,
    NoNoiseInPredictiveVariance,
    PosteriorGaussian,
    ScaledPosteriorVariance,
    ShiftedPosteriorMean,
    Sparse,
    TransposedMixingMatrix,
    WrongTriangularSide,
    apply_fault,
    exact_posterior,
    log_marginal_likelihood,
    sample_posterior,
    sample_prior_joint,
    simulate_observations,
    sparse_posterior,
    strip_fault,
)
from .engine import (
    RankTally,
    SbcConfig,
    SbcRunError,
    compute_rank,
    pool_tally,
    posterior_correlation,
    run_sbc,
    run_trial,
)
from .diagnostics import (
    DiagnosticsConfig,
    UniformityReport,
    build_reports,
    chi_square_uniformity,
    ecdf_band_check,
    mc_calibrated_pvalue,
    rebin,
    regularized_gamma_q,
    valley_score,
)
from .margcheck import (
    FitFailed,
    HyperPrior,
    MargCheckReport,
    OptimizerConfig,
    Type2FitResult,
    fit_type2,
    run_marg_check,
    sample_hyper_prior,
)
from .config import ConfigError, ExperimentConfig, parse_config, serialize_config

__all__ = [name for name in dir() if not name.startswith("_")]
