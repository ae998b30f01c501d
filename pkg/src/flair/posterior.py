"""Gaussian approximation to the posterior of (Lam, B) given the factors.

Every outcome gets an independent normal N(theta_j, rho^2 V_j), where V_j is
the inverse negative Hessian of its conditional log posterior and rho >= 1 is
a single inflation factor that restores frequentist coverage.

Parameter blocks inside ``V`` are ordered (beta_j, lambda_j): the first ``q``
rows and columns belong to the coefficients, the last ``k`` to the loadings.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import stats

from .errors import NumericalError, ValidationError
from .model import Dataset, FactorState, PriorConfig, linear_predictor
from .numcore import LinkFunction, child_rng, get_link, make_rng

__all__ = [
    "GaussianPosterior",
    "IntervalSet",
    "PosteriorSamples",
    "compute_Vj",
    "compute_V",
    "rho_pair_matrix",
    "calibrate_rho",
    "build_posterior",
    "sample_posterior",
    "posterior_mean_sigma",
    "credible_intervals",
    "predict_probabilities",
]


@dataclass(frozen=True, eq=False)
class GaussianPosterior:
    Lam: np.ndarray  # (p, k) posterior means of the loadings
    B: np.ndarray  # (p, q) posterior means of the coefficients
    V: np.ndarray  # (p, q + k, q + k), ordered (beta, lambda)
    rho: float
    M: np.ndarray
    X: np.ndarray
    link: LinkFunction

    @property
    def p(self):
        return self.Lam.shape[0]

    @property
    def k(self):
        return self.Lam.shape[1]

    @property
    def q(self):
        return self.B.shape[1]

    @property
    def theta(self) -> np.ndarray:
        """Posterior means as (p, q + k), matching the block order of ``V``."""
        return np.hstack([self.B, self.Lam])

    def V_lambda(self) -> np.ndarray:
        q = self.q
        return self.V[:, q:, q:]

    def V_beta(self) -> np.ndarray:
        q = self.q
        return self.V[:, :q, :q]

    def with_rho(self, rho: float) -> "GaussianPosterior":
        return GaussianPosterior(self.Lam, self.B, self.V, float(rho), self.M, self.X, self.link)


@dataclass(frozen=True, eq=False)
class IntervalSet:
    lower: np.ndarray
    upper: np.ndarray
    alpha: float
    target: str
    rows: Optional[np.ndarray] = None

    def __post_init__(self):
        if np.any(self.lower > self.upper):
            raise NumericalError("interval with lower bound above upper bound")

    def contains(self, truth) -> np.ndarray:
        truth = np.asarray(truth)
        return (truth >= self.lower) & (truth <= self.upper)


@dataclass(frozen=True, eq=False)
class PosteriorSamples:
    """Draws for a subset of outcomes; arrays are indexed (draw, outcome, .)."""

    B: np.ndarray
    Lam: np.ndarray
    rows: np.ndarray

    @property
    def n_draws(self):
        return self.B.shape[0]

    def lambda_outer(self) -> np.ndarray:
        """Per-draw Lam Lam^T restricted to ``rows``, shape (N, r, r)."""
        return np.einsum("sik,sjk->sij", self.Lam, self.Lam)


def _prior_precision(prior: PriorConfig, q: int, k: int) -> np.ndarray:
    return np.hstack([
        np.repeat((1.0 / prior.tau_B**2)[:, None], q, axis=1),
        np.repeat((1.0 / prior.tau_lambda**2)[:, None], k, axis=1),
    ])


def _neg_hessians(state, data, prior, link, cols=None):
    link = get_link(link)
    design = np.hstack([data.X, state.M])
    n, d = design.shape
    Z = linear_predictor(state, data.X)
    if cols is not None:
        Z = Z[:, cols]
    Y = data.Y if cols is None else data.Y[:, cols]
    obs = data.observed if cols is None else data.observed[:, cols]
    W = -link.d2loglik(Y, Z) * obs
    outer = (design[:, :, None] * design[:, None, :]).reshape(n, d * d)
    H = (W.T @ outer).reshape(-1, d, d)
    prec = _prior_precision(prior, data.q, state.k)
    if cols is not None:
        prec = prec[cols]
    idx = np.arange(d)
    H[:, idx, idx] += prec
    return H


def _spd_inverse(H):
    try:
        L = np.linalg.cholesky(H)
    except np.linalg.LinAlgError:
        raise NumericalError("negative Hessian is not positive definite") from None
    d = H.shape[-1]
    Linv = np.linalg.solve(L, np.broadcast_to(np.eye(d), H.shape))
    V = np.swapaxes(Linv, -1, -2) @ Linv
    return 0.5 * (V + np.swapaxes(V, -1, -2))


def compute_V(state: FactorState, data: Dataset, prior: PriorConfig, link="logit") -> np.ndarray:
    """Inverse negative Hessians for all outcomes, shape (p, q + k, q + k)."""
    return _spd_inverse(_neg_hessians(state, data, prior, link))


def compute_Vj(j: int, state: FactorState, data: Dataset, prior: PriorConfig, link="logit") -> np.ndarray:
    """[sum_i w_ij x_i x_i^T + diag(tau_beta^-2 I_q, tau_lambda^-2 I_k)]^{-1}
    with x_i = (x_i, eta_i) and training cells only."""
    if not 0 <= j < data.p:
        raise ValidationError(f"outcome index {j} out of range")
    return _spd_inverse(_neg_hessians(state, data, prior, link, cols=[j]))[0]


def _sigma2(state, data, link):
    link = get_link(link)
    Z = linear_predictor(state, data.X)
    obs = data.observed
    info = np.sum(link.fisher_weight(Z) * obs, axis=0)
    n_obs = obs.sum(axis=0)
    return link.noise_variance + n_obs / info


def rho_pair_matrix(Lam, sigma2) -> np.ndarray:
    """All squared pair coefficients b_jj'^2 as a (p, p) matrix (small p only)."""
    Lam = np.asarray(Lam, dtype=float)
    sigma2 = np.asarray(sigma2, dtype=float)
    return _pair_block(Lam, Lam, sigma2, sigma2, diag=True)


def _pair_block(La, Lb, sa, sb, diag=False):
    na = np.sum(La**2, axis=1)
    nb = np.sum(Lb**2, axis=1)
    G = La @ Lb.T
    num = np.outer(na, nb) + G**2
    den = sb[None, :] * na[:, None] + sa[:, None] * nb[None, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = np.where(den > 0, num / den, 0.0)
    b2 = 1.0 + frac
    if diag:
        idx = np.arange(La.shape[0])
        b2[idx, idx] = 1.0 + na / (2.0 * sa)
    return b2


def calibrate_rho(state: FactorState, data: Dataset, link="logit", *, block=2048,
                  subsample=None, seed=0) -> float:
    """Variance inflation rho = max over ordered pairs (j, j') of b_jj'.

    ``sigma_j^2`` adds the latent-noise variance of the link (1.702^2 for the
    logit) to the inverse mean Fisher weight of column j. Pairs in which both
    loadings vanish contribute the limiting value 1. With ``subsample=m`` only
    pairs whose first index lies in a random subset of m outcomes are scanned.
    """
    Lam = state.Lam
    p = Lam.shape[0]
    s2 = _sigma2(state, data, link)
    rows = np.arange(p)
    if subsample is not None and subsample < p:
        rows = np.sort(make_rng(seed).choice(p, int(subsample), replace=False))
    diag = 1.0 + np.sum(Lam**2, axis=1) / (2.0 * s2)
    best = float(np.max(diag[rows]))
    for start in range(0, rows.size, block):
        r = rows[start:start + block]
        b2 = _pair_block(Lam[r], Lam, s2[r], s2)
        b2[np.arange(r.size), r] = 1.0  # diagonal handled above
        best = max(best, float(b2.max()))
    return float(np.sqrt(best))


def build_posterior(state: FactorState, data: Dataset, prior: PriorConfig, link="logit",
                    rho=None, **rho_kw) -> GaussianPosterior:
    """Gaussian approximation around a post-processed MAP state."""
    link = get_link(link)
    V = compute_V(state, data, prior, link)
    if rho is None:
        rho = calibrate_rho(state, data, link, **rho_kw)
    return GaussianPosterior(
        Lam=state.Lam.copy(), B=state.B.copy(), V=V, rho=float(rho),
        M=state.M, X=data.X, link=link,
    )


def _resolve_rows(rows, p):
    if rows is None:
        return np.arange(p)
    rows = np.asarray(rows, dtype=int).reshape(-1)
    if rows.size and (rows.min() < 0 or rows.max() >= p):
        raise ValidationError("outcome index out of range")
    return rows


def sample_posterior(post: GaussianPosterior, n_mc: int, seed=0, rows=None, rho=None) -> PosteriorSamples:
    """Draw theta_j ~ N(theta_j, rho^2 V_j) independently for each outcome.

    Outcome ``j`` uses its own child stream of ``seed``, so the draws for a
    given outcome do not depend on which other outcomes are requested, and
    changing ``rho`` rescales the same standard-normal innovations.
    """
    if n_mc < 1:
        raise ValidationError("n_mc must be >= 1")
    if isinstance(seed, np.random.Generator):
        seed = int(seed.integers(0, 2**63))
    rows = _resolve_rows(rows, post.p)
    rho = post.rho if rho is None else float(rho)
    V = post.V[rows]
    try:
        L = np.linalg.cholesky(V)
    except np.linalg.LinAlgError:
        raise NumericalError("posterior covariance is not positive definite") from None
    d = V.shape[-1]
    eps = np.empty((int(n_mc), rows.size, d))
    for slot, j in enumerate(rows):
        eps[:, slot, :] = child_rng(seed, int(j)).standard_normal((int(n_mc), d))
    theta = post.theta[rows][None, :, :] + rho * np.einsum("jab,sjb->sja", L, eps)
    q = post.q
    return PosteriorSamples(B=theta[:, :, :q], Lam=theta[:, :, q:], rows=rows)


def posterior_mean_sigma(post: GaussianPosterior):
    """Closed-form E[Lam Lam^T] = Lam Lam^T + rho^2 diag(tr V_lambda_j), and E[B]."""
    tr = np.trace(post.V_lambda(), axis1=1, axis2=2)
    Sigma = post.Lam @ post.Lam.T
    Sigma[np.diag_indices_from(Sigma)] += post.rho**2 * tr
    return Sigma, post.B.copy()


def credible_intervals(post: GaussianPosterior, target="B", alpha=0.05, n_mc=2000, seed=0,
                       rows=None, rho=None, block_cells=4_000_000) -> IntervalSet:
    """Equal-tail (1 - alpha) credible intervals.

    ``target="B"`` is exact from the marginal normals. ``target="LambdaOuter"``
    uses Monte Carlo quantiles over ``n_mc`` draws for the principal submatrix
    indexed by ``rows`` (all outcomes when ``rows`` is None).
    """
    if not 0.0 < alpha < 1.0:
        raise ValidationError("alpha must lie in (0, 1)")
    rho = post.rho if rho is None else float(rho)
    target_key = str(target).lower().replace("_", "")
    if target_key == "b":
        z = stats.norm.ppf(1.0 - alpha / 2.0)
        sd = np.sqrt(np.diagonal(post.V_beta(), axis1=1, axis2=2))
        half = z * rho * sd
        return IntervalSet(post.B - half, post.B + half, alpha, "B")
    if target_key not in ("lambdaouter", "submatrix"):
        raise ValidationError(f"unknown interval target {target!r}")
    if n_mc * alpha / 2.0 < 5:
        raise ValidationError(
            f"n_mc={n_mc} too small for alpha={alpha}: need n_mc * alpha / 2 >= 5"
        )
    draws = sample_posterior(post, n_mc, seed=seed, rows=rows, rho=rho)
    Ls = draws.Lam
    r = Ls.shape[1]
    lower = np.empty((r, r))
    upper = np.empty((r, r))
    step = max(1, int(block_cells // max(1, n_mc * r)))
    for start in range(0, r, step):
        sl = slice(start, start + step)
        outer = np.einsum("sik,sjk->sij", Ls[:, sl], Ls)
        lo, hi = np.quantile(outer, [alpha / 2.0, 1.0 - alpha / 2.0], axis=0)
        lower[sl], upper[sl] = lo, hi
    return IntervalSet(lower, upper, alpha, "LambdaOuter", rows=draws.rows)


def predict_probabilities(post: GaussianPosterior, rows=None, cols=None) -> np.ndarray:
    """h(x_i^T beta_j + eta_i^T lambda_j) at the posterior means."""
    n = post.M.shape[0]
    r = _resolve_rows(rows, n)
    c = _resolve_rows(cols, post.p)
    z = post.X[r] @ post.B[c].T + post.M[r] @ post.Lam[c].T
    return post.link.h(z)
