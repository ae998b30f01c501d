"""Bayesian multivariate logistic factor regression with pre-estimated factors.

Joint MAP estimation of latent factors, loadings and coefficients, a
calibrated Gaussian posterior for (Lam, B), JIC selection of the latent
dimension, and a simulation harness.
"""

__version__ = "0.1.0"

from .errors import FlairError, NumericalError, ValidationError
from .estimation import MapTrace, map_fit, postprocess, update_factor, update_outcome_params
from .initialization import InitResult, jic, jic_path, select_k, select_tau, svd_initialize
from .model import (
    Dataset,
    FactorState,
    FitOptions,
    PriorConfig,
    linear_predictor,
    log_joint_posterior,
    log_likelihood,
)
from .numcore import get_link, link_eval, link_inverse, sample_truncated_normal, truncated_svd
from .pipeline import FlairFit, fit_flair
from .posterior import (
    GaussianPosterior,
    IntervalSet,
    build_posterior,
    calibrate_rho,
    compute_V,
    compute_Vj,
    credible_intervals,
    posterior_mean_sigma,
    predict_probabilities,
    sample_posterior,
)
from .simeval import (
    REFERENCE_CONFIG,
    FitReport,
    SimConfig,
    SimTruth,
    auc,
    empirical_coverage,
    make_holdout_mask,
    rel_frob_error_B,
    rel_frob_error_lambda_outer,
    run_replication,
    simulate_dataset,
)
