"""Constrained joint MAP estimation by alternating projected Newton ascent,
and post-processing into the identifiable parameterization."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import NumericalError, ValidationError
from .initialization import InitResult
from .model import (
    Dataset,
    FactorState,
    FitOptions,
    PriorConfig,
    factor_bound,
    log_joint_posterior,
)
from .numcore import get_link

__all__ = [
    "MapTrace",
    "update_outcome_params",
    "update_factor",
    "outcome_objective",
    "outcome_gradient_hessian",
    "map_fit",
    "postprocess",
]

JITTER = 1e-8


@dataclass
class MapTrace:
    """Per-outer-iteration record of the alternating solver.

    ``log_posterior[0]`` is the value at the starting point; entry ``t`` is the
    value after ``t`` full (outcome, factor) sweeps.
    """

    log_posterior: list = field(default_factory=list)
    outcome_newton_steps: list = field(default_factory=list)
    factor_newton_steps: list = field(default_factory=list)
    outcome_seconds: list = field(default_factory=list)
    factor_seconds: list = field(default_factory=list)
    converged: bool = False

    @property
    def n_outer(self) -> int:
        return len(self.log_posterior) - 1

    def to_dict(self) -> dict:
        return {
            "log_posterior": [float(v) for v in self.log_posterior],
            "outcome_newton_steps": [int(v) for v in self.outcome_newton_steps],
            "factor_newton_steps": [int(v) for v in self.factor_newton_steps],
            "outcome_seconds": [float(v) for v in self.outcome_seconds],
            "factor_seconds": [float(v) for v in self.factor_seconds],
            "converged": bool(self.converged),
            "n_outer": self.n_outer,
        }


def _batched_solve(A, b):
    """Solve A[u] x[u] = b[u] for a stack of SPD matrices, with one jitter retry."""
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        d = A.shape[-1]
        try:
            L = np.linalg.cholesky(A + JITTER * np.eye(d))
        except np.linalg.LinAlgError:
            raise NumericalError("Newton system is not positive definite even after jitter") from None
    y = np.linalg.solve(L, b[..., None])
    return np.linalg.solve(np.swapaxes(L, -1, -2), y)[..., 0]


class _Subproblems:
    """A stack of independent penalized GLM problems sharing one design.

    Unit ``u`` has parameter ``theta[u]`` (length d), responses ``Y[:, u]``,
    observation weights ``obs[:, u]`` and linear predictor
    ``offset[:, u] + design @ theta[u]``. Each maximizes
    ``sum_i obs * loglik - 0.5 * sum(prec[u] * theta[u]**2)`` over the box
    ``[-bound, bound]^d``.
    """

    def __init__(self, Y, obs, design, offset, prec, bound, link):
        self.Y = Y
        self.obs = obs
        self.design = design
        self.offset = offset
        self.prec = prec
        self.bound = bound
        self.link = link
        m, d = design.shape
        self._outer = (design[:, :, None] * design[:, None, :]).reshape(m, d * d)

    def _z(self, theta, units):
        z = self.design @ theta.T
        if self.offset is not None:
            z = z + self.offset[:, units]
        return z

    def objective(self, theta, units):
        z = self._z(theta, units)
        ll = self.link.loglik(self.Y[:, units], z) * self.obs[:, units]
        return ll.sum(axis=0) - 0.5 * np.sum(self.prec[units] * theta**2, axis=1)

    def grad_neg_hess(self, theta, units):
        z = self._z(theta, units)
        y, w = self.Y[:, units], self.obs[:, units]
        d1 = self.link.dloglik(y, z) * w
        d2 = -self.link.d2loglik(y, z) * w
        d = theta.shape[1]
        g = d1.T @ self.design - self.prec[units] * theta
        H = (d2.T @ self._outer).reshape(-1, d, d)
        idx = np.arange(d)
        H[:, idx, idx] += self.prec[units]
        return g, H

    def solve(self, theta, nu, tol, max_iter, max_halvings, units=None):
        """Projected damped Newton ascent; returns (theta, steps per unit)."""
        theta = np.array(theta, dtype=float)
        n_units = theta.shape[0]
        steps = np.zeros(n_units, dtype=int)
        active = np.arange(n_units) if units is None else np.asarray(units)
        lo, hi = -self.bound, self.bound
        for _ in range(max_iter):
            if active.size == 0:
                break
            th = theta[active]
            g, H = self.grad_neg_hess(th, active)
            direction = _batched_solve(H, g)
            f_old = self.objective(th, active)
            step = np.full(active.size, nu)
            cand = np.clip(th + step[:, None] * direction, lo, hi)
            f_new = self.objective(cand, active)
            bad = ~(f_new >= f_old)
            for _ in range(max_halvings):
                if not bad.any():
                    break
                step[bad] *= 0.5
                cand[bad] = np.clip(th[bad] + step[bad, None] * direction[bad], lo, hi)
                f_new[bad] = self.objective(cand[bad], active[bad])
                bad = ~(f_new >= f_old)
            cand[bad] = th[bad]
            if not np.all(np.isfinite(cand)):
                raise NumericalError("Newton update produced non-finite parameters")
            moved = np.linalg.norm(cand - th, axis=1)
            theta[active] = cand
            steps[active] += 1
            active = active[moved >= tol]
        return theta, steps


def _outcome_problems(state: FactorState, data: Dataset, prior: PriorConfig, link):
    design = np.hstack([data.X, state.M])
    q, k = data.q, state.k
    prec = np.hstack([
        np.repeat((1.0 / prior.tau_B**2)[:, None], q, axis=1),
        np.repeat((1.0 / prior.tau_lambda**2)[:, None], k, axis=1),
    ])
    bound = np.concatenate([np.full(q, prior.c_B), np.full(k, prior.c_lambda)])
    return _Subproblems(data.Y, data.observed, design, None, prec, bound, link)


def _factor_problems(state: FactorState, data: Dataset, link):
    n, k = state.M.shape
    offset = state.B @ data.X.T  # (p, n)
    prec = np.ones((n, k))
    bound = np.full(k, factor_bound(k, n))
    return _Subproblems(data.Y.T, data.observed.T, state.Lam, offset, prec, bound, link)


def _theta(state: FactorState) -> np.ndarray:
    return np.hstack([state.B, state.Lam])


def outcome_objective(j, theta_j, state, data, prior, link="logit") -> float:
    """Per-outcome log posterior at ``theta_j = (beta_j, lambda_j)`` given M."""
    sub = _outcome_problems(state, data, prior, get_link(link))
    return float(sub.objective(np.atleast_2d(theta_j), np.array([j]))[0])


def outcome_gradient_hessian(j, theta_j, state, data, prior, link="logit"):
    """Analytic gradient and Hessian of :func:`outcome_objective`.

    Parameter order is (beta_j, lambda_j).
    """
    sub = _outcome_problems(state, data, prior, get_link(link))
    g, negH = sub.grad_neg_hess(np.atleast_2d(theta_j), np.array([j]))
    return g[0], -negH[0]


def _sweep_outcomes(state, data, prior, opts, link, units=None):
    sub = _outcome_problems(state, data, prior, link)
    theta, steps = sub.solve(
        _theta(state), opts.nu_outcome, opts.inner_tol, opts.max_inner, opts.max_halvings, units
    )
    q = data.q
    return FactorState(state.M, theta[:, q:], theta[:, :q]), steps


def _sweep_factors(state, data, opts, link, units=None):
    sub = _factor_problems(state, data, link)
    M, steps = sub.solve(
        state.M, opts.nu_factor, opts.inner_tol, opts.max_inner, opts.max_halvings, units
    )
    return FactorState(M, state.Lam, state.B), steps


def _check_index(i, size, what):
    if not 0 <= int(i) < size:
        raise ValidationError(f"{what} index {i} out of range [0, {size})")


def update_outcome_params(j, state, data, prior, opts=None):
    """Projected Newton update of (lambda_j, beta_j) with M held fixed.

    Returns ``(lambda_j, beta_j)``.
    """
    opts = opts or FitOptions()
    _check_index(j, data.p, "outcome")
    new, _ = _sweep_outcomes(state, data, prior, opts, get_link(opts.link), units=[int(j)])
    return new.Lam[j].copy(), new.B[j].copy()


def update_factor(i, state, data, prior, opts=None):
    """Projected Newton update of eta_i with Lam and B held fixed."""
    opts = opts or FitOptions()
    _check_index(i, data.n, "sample")
    new, _ = _sweep_factors(state, data, opts, get_link(opts.link), units=[int(i)])
    return new.M[i].copy()


def map_fit(data: Dataset, prior: PriorConfig, opts: FitOptions = None, init=None):
    """Joint MAP of (M, Lam, B) under the box constraints.

    Alternates a sweep over all outcomes (M fixed) with a sweep over all
    samples (Lam, B fixed) until the relative increase of the log posterior
    falls below ``opts.outer_tol`` or ``opts.max_outer`` sweeps have run.

    ``init`` may be an :class:`InitResult` or a :class:`FactorState`.
    """
    opts = opts or FitOptions()
    link = get_link(opts.link)
    if init is None:
        raise ValidationError("map_fit needs a starting point")
    state = init.state0 if isinstance(init, InitResult) else init
    if state.M.shape[0] != data.n or state.B.shape != (data.p, data.q):
        raise ValidationError("starting state does not match the data dimensions")
    if not state.is_feasible(prior):
        raise ValidationError("starting state violates the box constraints")

    trace = MapTrace()
    current = log_joint_posterior(state, data, prior, link)
    if not math.isfinite(current):
        raise NumericalError("log posterior is not finite at the starting point")
    trace.log_posterior.append(current)

    for it in range(1, opts.max_outer + 1):
        t0 = time.perf_counter()
        state, s_out = _sweep_outcomes(state, data, prior, opts, link)
        t1 = time.perf_counter()
        state, s_fac = _sweep_factors(state, data, opts, link)
        t2 = time.perf_counter()
        new = log_joint_posterior(state, data, prior, link)
        if not math.isfinite(new):
            raise NumericalError(f"log posterior became non-finite at outer iteration {it}")
        trace.log_posterior.append(new)
        trace.outcome_newton_steps.append(int(s_out.sum()))
        trace.factor_newton_steps.append(int(s_fac.sum()))
        trace.outcome_seconds.append(t1 - t0)
        trace.factor_seconds.append(t2 - t1)
        rel = (new - current) / abs(current) if current != 0 else abs(new - current)
        current = new
        if rel < opts.outer_tol:
            trace.converged = True
            break
    return state, trace


def postprocess(state: FactorState, X) -> FactorState:
    """Map a MAP triple onto M^T M = n I_k and M^T X = 0 without changing
    X B^T + M Lam^T."""
    X = np.asarray(X, dtype=float)
    n, k = state.M.shape
    G = X.T @ X
    try:
        cf = scipy.linalg.cho_factor(G)
    except np.linalg.LinAlgError:
        raise ValidationError("X^T X is singular") from None
    coef = scipy.linalg.cho_solve(cf, X.T @ state.M)  # (q, k): (X^T X)^{-1} X^T M
    Mc = state.M - X @ coef
    U, D, Vt = scipy.linalg.svd(Mc, full_matrices=False)
    if D[-1] <= 1e-10 * max(D[0], 1e-300):
        raise NumericalError("centered factor matrix is rank deficient; reduce k")
    V = Vt.T
    M_t = math.sqrt(n) * U
    Lam_t = state.Lam @ (V * D) / math.sqrt(n)
    B_t = state.B + state.Lam @ coef.T
    return FactorState(M_t, Lam_t, B_t)
