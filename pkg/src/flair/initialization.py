"""SVD-based starting values, prior-scale selection and choice of the latent
dimension by the joint-likelihood information criterion."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import ValidationError
from .model import (
    TAU_LOWER,
    TAU_UPPER,
    Dataset,
    FactorState,
    PriorConfig,
    log_likelihood,
)
from .numcore import get_link, truncated_svd

__all__ = [
    "InitResult",
    "default_epsilon",
    "threshold_probabilities",
    "impute_for_init",
    "svd_initialize",
    "select_tau",
    "jic",
    "jic_path",
    "select_k",
    "RANDOMIZED_SVD_CELLS",
]

# Above this many cells the initial SVDs switch to the randomized algorithm.
RANDOMIZED_SVD_CELLS = 5_000_000


@dataclass(frozen=True, eq=False)
class InitResult:
    state0: FactorState
    tau_lambda: np.ndarray
    tau_B: np.ndarray
    loglik: float
    unclamped: FactorState = None

    def prior(self, c_lambda=10.0, c_B=10.0) -> PriorConfig:
        return PriorConfig(
            k=self.state0.k,
            tau_lambda=self.tau_lambda,
            tau_B=self.tau_B,
            c_lambda=c_lambda,
            c_B=c_B,
        )


def default_epsilon(n: int, p: int) -> float:
    """Clamp level min(0.1, 1/sqrt(min(n, p))), never below 1e-4."""
    return max(1e-4, min(0.1, 1.0 / math.sqrt(min(n, p))))


def threshold_probabilities(P, eps: float) -> np.ndarray:
    if not 0.0 < eps < 0.5:
        raise ValidationError(f"eps must lie in (0, 0.5), got {eps}")
    return np.clip(np.asarray(P, dtype=float), eps, 1.0 - eps)


def impute_for_init(Y, mask=None) -> np.ndarray:
    """Fill held-out cells with (row mean) * (column mean) of the observed cells."""
    Y = np.asarray(Y, dtype=float)
    if mask is None:
        return Y.copy()
    mask = np.asarray(mask, dtype=bool)
    obs = ~mask
    row_n = obs.sum(axis=1)
    col_n = obs.sum(axis=0)
    if np.any(row_n == 0):
        raise ValidationError(f"row {int(np.argmin(row_n))} is entirely held out")
    if np.any(col_n == 0):
        raise ValidationError(f"column {int(np.argmin(col_n))} is entirely held out")
    Yo = np.where(obs, Y, 0.0)
    row_mean = Yo.sum(axis=1) / row_n
    col_mean = Yo.sum(axis=0) / col_n
    return np.where(mask, np.outer(row_mean, col_mean), Y)


def _svd_method(n, p, method):
    if method is None or method == "auto":
        return "randomized" if n * p > RANDOMIZED_SVD_CELLS else "exact"
    return method


def _solve_normal(X, rhs):
    """(X^T X)^{-1} rhs with an explicit rank check."""
    G = X.T @ X
    try:
        c, low = scipy.linalg.cho_factor(G)
    except np.linalg.LinAlgError:
        raise ValidationError("design matrix X is rank deficient (X^T X singular)") from None
    if np.linalg.cond(G) > 1e12:
        raise ValidationError("design matrix X is numerically rank deficient")
    return scipy.linalg.cho_solve((c, low), rhs)


def select_tau(Lam_hat, B_hat, k=None, lower=TAU_LOWER, upper=TAU_UPPER):
    """Per-outcome prior scales T(k^{-1/2} ||row||), hard-truncated to [lower, upper].

    Both the loading and the coefficient scales use k^{-1/2}.
    """
    Lam_hat = np.atleast_2d(np.asarray(Lam_hat, dtype=float))
    B_hat = np.atleast_2d(np.asarray(B_hat, dtype=float))
    if k is None:
        k = Lam_hat.shape[1]
    scale = 1.0 / math.sqrt(k)
    tau_l = np.clip(scale * np.linalg.norm(Lam_hat, axis=1), lower, upper)
    tau_b = np.clip(scale * np.linalg.norm(B_hat, axis=1), lower, upper)
    return tau_l, tau_b


def svd_initialize(data: Dataset, k: int, link="logit", method=None, *, eps=None,
                   c_lambda=10.0, c_B=10.0, seed=0) -> InitResult:
    """Starting values for (M, Lam, B) from two truncated SVDs.

    The (imputed) outcome matrix is approximated at rank k + q, clamped to
    [eps, 1 - eps] and mapped through the inverse link. Coefficients come from
    least squares on X; the residual's rank-k SVD gives sqrt(n) L_k for the
    factors and R_k S_k / sqrt(n) for the loadings. All blocks are finally
    clamped onto their prior boxes.
    """
    link = get_link(link)
    n, p, q = data.n, data.p, data.q
    k = int(k)
    if k < 1:
        raise ValidationError("k must be >= 1")
    if k + q > min(n, p):
        raise ValidationError(f"k + q = {k + q} exceeds min(n, p) = {min(n, p)}")
    method = _svd_method(n, p, method)
    if eps is None:
        eps = default_epsilon(n, p)

    Y = impute_for_init(data.Y, data.mask)
    Y_hat = truncated_svd(Y, k + q, method, seed=seed).reconstruct()
    Z_hat = link.inverse(threshold_probabilities(Y_hat, eps))

    X = data.X
    B_hat = _solve_normal(X, X.T @ Z_hat).T
    Zc = Z_hat - X @ B_hat.T
    svd = truncated_svd(Zc, k, method, seed=seed + 1)
    M_hat = math.sqrt(n) * svd.U
    Lam_hat = svd.V * svd.D / math.sqrt(n)

    prior_box = PriorConfig.constant(k, p, c_lambda=c_lambda, c_B=c_B)
    raw = FactorState(M_hat, Lam_hat, B_hat)
    state0 = raw.project(prior_box)
    tau_l, tau_b = select_tau(state0.Lam, state0.B, k)
    return InitResult(
        state0=state0,
        tau_lambda=tau_l,
        tau_B=tau_b,
        loglik=log_likelihood(state0, data, link),
        unclamped=raw,
    )


def jic_penalty(k: int, n: int, p: int) -> float:
    return k * max(n, p) * math.log(min(n, p))


def jic(data: Dataset, k: int, link="logit", method=None, *, init: InitResult = None, **kw) -> float:
    """JIC(k) = -2 l_k + k max(n, p) log min(n, p), with l_k taken at the SVD
    initialization for dimension k."""
    if k < 1:
        raise ValidationError("k must be >= 1")
    if init is None:
        init = svd_initialize(data, k, link, method, **kw)
    return -2.0 * init.loglik + jic_penalty(k, data.n, data.p)


def jic_path(data: Dataset, k_max: int, link="logit", method=None, **kw) -> np.ndarray:
    """JIC values for k = 1..k_max (entry i corresponds to k = i + 1)."""
    if k_max < 1:
        raise ValidationError("k_max must be >= 1")
    return np.array([jic(data, k, link, method, **kw) for k in range(1, int(k_max) + 1)])


def select_k(data: Dataset, k_max: int, link="logit", method=None, **kw) -> int:
    """Minimizer of JIC over 1..k_max; ties go to the smaller k."""
    values = jic_path(data, k_max, link, method, **kw)
    return int(np.argmin(values)) + 1
