"""Shared domain types: datasets, priors, fit options and the factor state."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .errors import ValidationError
from .numcore import get_link

__all__ = [
    "Dataset",
    "PriorConfig",
    "FactorState",
    "FitOptions",
    "factor_bound",
    "linear_predictor",
    "log_likelihood",
    "log_joint_posterior",
    "column_log_likelihood",
    "TAU_LOWER",
    "TAU_UPPER",
]

TAU_LOWER = 0.5
TAU_UPPER = 20.0
FEAS_TOL = 1e-9


def factor_bound(k: int, n: int) -> float:
    """Box bound 2 sqrt(log(k n)) on the latent factors."""
    return 2.0 * math.sqrt(math.log(k * n))


@dataclass(frozen=True, eq=False)
class Dataset:
    """Binary outcomes ``Y`` (n, p), covariates ``X`` (n, q) and an optional
    holdout ``mask`` (True = held out, excluded from every likelihood term).

    The first column of ``X`` must be the intercept.
    """

    Y: np.ndarray
    X: np.ndarray
    mask: Optional[np.ndarray] = None
    names: Optional[Sequence[str]] = None

    def __post_init__(self):
        Y = np.asarray(self.Y, dtype=float)
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if Y.ndim != 2:
            raise ValidationError("Y must be a 2-d matrix")
        if X.ndim != 2 or X.shape[0] != Y.shape[0]:
            raise ValidationError(f"X has shape {X.shape}; expected ({Y.shape[0]}, q)")
        if not np.all((Y == 0.0) | (Y == 1.0)):
            raise ValidationError("Y entries must be 0 or 1")
        if not np.all(np.isfinite(X)):
            raise ValidationError("X contains non-finite values")
        if not np.all(X[:, 0] == 1.0):
            raise ValidationError("first column of X must be the all-ones intercept")
        mask = self.mask
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != Y.shape:
                raise ValidationError(f"mask shape {mask.shape} differs from Y shape {Y.shape}")
            if not mask.any():
                mask = None
        if self.names is not None and len(self.names) != Y.shape[1]:
            raise ValidationError("names must have one label per outcome column")
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "mask", mask)

    @property
    def n(self) -> int:
        return self.Y.shape[0]

    @property
    def p(self) -> int:
        return self.Y.shape[1]

    @property
    def q(self) -> int:
        return self.X.shape[1]

    @property
    def observed(self) -> np.ndarray:
        """Float weights, 1 for training cells and 0 for held-out cells."""
        if self.mask is None:
            return np.ones_like(self.Y)
        return (~self.mask).astype(float)

    def with_mask(self, mask) -> "Dataset":
        return replace(self, mask=mask)


@dataclass(frozen=True, eq=False)
class PriorConfig:
    """Truncated-normal prior hyperparameters.

    ``tau_lambda`` and ``tau_B`` are per-outcome prior scales; ``c_lambda`` and
    ``c_B`` bound the loadings and coefficients in infinity norm.
    """

    k: int
    tau_lambda: np.ndarray
    tau_B: np.ndarray
    c_lambda: float = 10.0
    c_B: float = 10.0

    def __post_init__(self):
        tl = np.asarray(self.tau_lambda, dtype=float).reshape(-1)
        tb = np.asarray(self.tau_B, dtype=float).reshape(-1)
        if self.k < 1:
            raise ValidationError("latent dimension k must be >= 1")
        if self.c_lambda <= 0 or self.c_B <= 0:
            raise ValidationError("box bounds c_lambda and c_B must be positive")
        if tl.shape != tb.shape:
            raise ValidationError("tau_lambda and tau_B must have the same length")
        if np.any(tl <= 0) or np.any(tb <= 0):
            raise ValidationError("prior scales must be positive")
        object.__setattr__(self, "tau_lambda", tl)
        object.__setattr__(self, "tau_B", tb)

    @classmethod
    def constant(cls, k, p, tau=1.0, **kw) -> "PriorConfig":
        return cls(k=k, tau_lambda=np.full(p, float(tau)), tau_B=np.full(p, float(tau)), **kw)


@dataclass(frozen=True, eq=False)
class FactorState:
    """Factors ``M`` (n, k), loadings ``Lam`` (p, k), coefficients ``B`` (p, q)."""

    M: np.ndarray
    Lam: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        for name in ("M", "Lam", "B"):
            a = np.array(getattr(self, name), dtype=float)
            if a.ndim != 2:
                raise ValidationError(f"{name} must be 2-d")
            object.__setattr__(self, name, a)
        if self.M.shape[1] != self.Lam.shape[1]:
            raise ValidationError("M and Lam must share the latent dimension")
        if self.Lam.shape[0] != self.B.shape[0]:
            raise ValidationError("Lam and B must have one row per outcome")

    @property
    def k(self) -> int:
        return self.M.shape[1]

    def copy(self) -> "FactorState":
        return FactorState(self.M.copy(), self.Lam.copy(), self.B.copy())

    def is_feasible(self, prior: PriorConfig, tol: float = FEAS_TOL) -> bool:
        n, k = self.M.shape
        return (
            np.max(np.abs(self.M), initial=0.0) <= factor_bound(k, n) + tol
            and np.max(np.abs(self.Lam), initial=0.0) <= prior.c_lambda + tol
            and np.max(np.abs(self.B), initial=0.0) <= prior.c_B + tol
        )

    def project(self, prior: PriorConfig) -> "FactorState":
        """Clamp every block onto its infinity-norm box."""
        n, k = self.M.shape
        cm = factor_bound(k, n)
        return FactorState(
            np.clip(self.M, -cm, cm),
            np.clip(self.Lam, -prior.c_lambda, prior.c_lambda),
            np.clip(self.B, -prior.c_B, prior.c_B),
        )


@dataclass(frozen=True)
class FitOptions:
    """Settings of the alternating projected Newton solver."""

    nu_outcome: float = 0.3
    nu_factor: float = 1.0
    inner_tol: float = 1e-3
    outer_tol: float = 1e-3
    max_inner: int = 100
    max_outer: int = 100
    link: str = "logit"
    seed: int = 0
    max_halvings: int = 30

    def __post_init__(self):
        for name in ("nu_outcome", "nu_factor"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValidationError(f"{name} must lie in (0, 1], got {v}")
        for name in ("inner_tol", "outer_tol"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")
        if self.max_inner < 1 or self.max_outer < 1:
            raise ValidationError("iteration caps must be >= 1")
        get_link(self.link)


def linear_predictor(state: FactorState, X) -> np.ndarray:
    """Z = X B^T + M Lam^T."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] != state.M.shape[0] or X.shape[1] != state.B.shape[1]:
        raise ValidationError(
            f"X shape {X.shape} incompatible with M {state.M.shape} and B {state.B.shape}"
        )
    return X @ state.B.T + state.M @ state.Lam.T


def column_log_likelihood(Z, data: Dataset, link="logit") -> np.ndarray:
    """Per-outcome Bernoulli log-likelihood over training cells, shape (p,)."""
    link = get_link(link)
    ll = link.loglik(data.Y, Z)
    if data.mask is not None:
        ll = np.where(data.mask, 0.0, ll)
    return ll.sum(axis=0)


def log_likelihood(state: FactorState, data: Dataset, link="logit") -> float:
    """Joint log-likelihood log p(Y | X, M, Lam, B) over training cells."""
    Z = linear_predictor(state, data.X)
    return float(np.sum(column_log_likelihood(Z, data, link)))


def _check_prior(state: FactorState, prior: PriorConfig):
    p = state.Lam.shape[0]
    if prior.tau_lambda.shape[0] != p:
        raise ValidationError(f"prior has {prior.tau_lambda.shape[0]} scales, state has {p} outcomes")


def log_joint_posterior(state: FactorState, data: Dataset, prior: PriorConfig, link="logit") -> float:
    """Unnormalized log joint posterior of (M, Lam, B).

    Sum of the training-cell log-likelihood and the Gaussian kernels of the
    priors; the truncation constants are dropped.
    """
    _check_prior(state, prior)
    Z = linear_predictor(state, data.X)
    col = column_log_likelihood(Z, data, link)
    col = col - 0.5 * np.sum(state.Lam**2, axis=1) / prior.tau_lambda**2
    col = col - 0.5 * np.sum(state.B**2, axis=1) / prior.tau_B**2
    return float(np.sum(col) - 0.5 * np.sum(state.M**2))
