"""Dense numerical primitives: link functions, truncated SVD, truncated-normal
sampling and seeded random streams."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy import special

from .errors import ValidationError

__all__ = [
    "LinkFunction",
    "LogitLink",
    "ProbitLink",
    "get_link",
    "link_eval",
    "link_inverse",
    "SvdResult",
    "truncated_svd",
    "sample_truncated_normal",
    "make_rng",
    "spawn_rngs",
]

# 1.702 * N(0, 1) is the usual normal approximation to the logistic noise.
LOGISTIC_NORMAL_SCALE = 1.702


def _check_finite(z):
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise ValidationError("link evaluated at a non-finite linear predictor")
    return z


def _check_open_unit(pi):
    pi = np.asarray(pi, dtype=float)
    if not np.all((pi > 0.0) & (pi < 1.0)):
        raise ValidationError("probabilities must lie strictly inside (0, 1); threshold first")
    return pi


class LinkFunction:
    """Inverse link h: R -> (0, 1) plus the Bernoulli log-likelihood pieces.

    Subclasses provide ``h``, ``dh`` and ``inverse``; the log-likelihood of a
    single Bernoulli cell and its first two derivatives in the linear predictor
    are exposed as ``loglik``, ``dloglik`` and ``d2loglik`` so that the Newton
    solvers can stay link agnostic.
    """

    name = "base"

    def __call__(self, z):
        return self.h(_check_finite(z))

    def __repr__(self):
        return f"{type(self).__name__}()"

    def __eq__(self, other):
        return type(self) is type(other)

    def __hash__(self):
        return hash(self.name)

    # Precision proxy used by rho calibration: Fisher information of one cell.
    def fisher_weight(self, z):
        raise NotImplementedError

    # Variance of the latent noise when y = 1{y* > 0}.
    noise_variance = 1.0


class LogitLink(LinkFunction):
    name = "logit"
    noise_variance = LOGISTIC_NORMAL_SCALE**2

    def h(self, z):
        return special.expit(z)

    def dh(self, z):
        p = special.expit(z)
        return p * (1.0 - p)

    def inverse(self, pi):
        return special.logit(pi)

    def loglik(self, y, z):
        # y log h(z) + (1 - y) log(1 - h(z)) = y z - log(1 + e^z)
        return y * z - np.logaddexp(0.0, z)

    def dloglik(self, y, z):
        return y - special.expit(z)

    def d2loglik(self, y, z):
        p = special.expit(z)
        return -p * (1.0 - p)

    def fisher_weight(self, z):
        p = special.expit(z)
        return p * (1.0 - p)


class ProbitLink(LinkFunction):
    name = "probit"
    noise_variance = 1.0

    def h(self, z):
        return special.ndtr(z)

    def dh(self, z):
        return np.exp(-0.5 * np.square(z)) / np.sqrt(2.0 * np.pi)

    def inverse(self, pi):
        return special.ndtri(pi)

    @staticmethod
    def _mills(t):
        # phi(t) / Phi(t), computed in log space to survive the far tail
        log_phi = -0.5 * np.square(t) - 0.5 * np.log(2.0 * np.pi)
        return np.exp(log_phi - special.log_ndtr(t))

    def loglik(self, y, z):
        s = 2.0 * y - 1.0
        return special.log_ndtr(s * z)

    def dloglik(self, y, z):
        s = 2.0 * y - 1.0
        return s * self._mills(s * z)

    def d2loglik(self, y, z):
        t = (2.0 * y - 1.0) * z
        r = self._mills(t)
        return -r * (t + r)

    def fisher_weight(self, z):
        p = special.ndtr(z)
        d = self.dh(z)
        return np.square(d) / np.clip(p * (1.0 - p), 1e-300, None)


_LINKS = {"logit": LogitLink, "probit": ProbitLink}


def get_link(link="logit") -> LinkFunction:
    """Resolve a link given by name (``"logit"``/``"probit"``) or instance."""
    if isinstance(link, LinkFunction):
        return link
    try:
        return _LINKS[str(link).lower()]()
    except KeyError:
        raise ValidationError(f"unknown link {link!r}; expected one of {sorted(_LINKS)}") from None


def link_eval(link, z):
    """Evaluate h(z); raises :class:`ValidationError` on non-finite input."""
    return get_link(link).h(_check_finite(z))


def link_inverse(link, pi):
    """Evaluate h^{-1}(pi) for pi strictly inside (0, 1)."""
    return get_link(link).inverse(_check_open_unit(pi))


@dataclass(frozen=True)
class SvdResult:
    U: np.ndarray
    D: np.ndarray
    V: np.ndarray

    @property
    def rank(self) -> int:
        return self.D.shape[0]

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.D) @ self.V.T


def _fix_signs(U, V):
    # Deterministic orientation: the largest-magnitude entry of each left
    # singular vector is positive.
    idx = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[idx, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    return U * signs, V * signs


def _randomized_svd(A, r, oversample, n_power, rng):
    n, p = A.shape
    ell = min(r + oversample, min(n, p))
    omega = rng.standard_normal((p, ell))
    Q, _ = np.linalg.qr(A @ omega)
    for _ in range(n_power):
        Q, _ = np.linalg.qr(A.T @ Q)
        Q, _ = np.linalg.qr(A @ Q)
    small = Q.T @ A
    Ub, D, Vt = scipy.linalg.svd(small, full_matrices=False, lapack_driver="gesdd")
    return Q @ Ub[:, :r], D[:r], Vt[:r].T


def truncated_svd(A, r, method="exact", *, oversample=10, n_power=2, seed=0) -> SvdResult:
    """Rank-``r`` singular value decomposition of a dense matrix.

    Parameters
    ----------
    A : ndarray (n, p)
    r : int
        Number of singular triplets, ``1 <= r <= min(n, p)``.
    method : {"exact", "randomized"}
        ``"randomized"`` uses a Gaussian sketch with ``oversample`` extra
        columns and ``n_power`` power iterations (re-orthonormalized at each
        half step), seeded by ``seed`` so the result is reproducible.

    Returns
    -------
    SvdResult
        ``U`` (n, r) and ``V`` (p, r) with orthonormal columns, ``D`` sorted
        nonincreasing. Column signs are normalized so that repeated calls give
        identical output.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2:
        raise ValidationError("truncated_svd expects a 2-d array")
    n, p = A.shape
    r = int(r)
    if not 1 <= r <= min(n, p):
        raise ValidationError(f"rank r={r} outside [1, {min(n, p)}]")
    method = str(method).lower()
    if method == "exact":
        try:
            U, D, Vt = scipy.linalg.svd(A, full_matrices=False, lapack_driver="gesdd")
        except np.linalg.LinAlgError:
            U, D, Vt = scipy.linalg.svd(A, full_matrices=False, lapack_driver="gesvd")
        U, D, V = U[:, :r], D[:r], Vt[:r].T
    elif method == "randomized":
        U, D, V = _randomized_svd(A, r, oversample, n_power, make_rng(seed))
    else:
        raise ValidationError(f"unknown SVD method {method!r}")
    U, V = _fix_signs(U, V)
    return SvdResult(U=U, D=np.maximum(D, 0.0), V=V)


def make_rng(seed=None) -> np.random.Generator:
    """PCG64 generator; passes an existing Generator through unchanged."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def spawn_rngs(seed, count: int) -> list[np.random.Generator]:
    """Independent child streams of a master seed.

    Child ``j`` depends only on ``(seed, j)``, never on how many siblings were
    requested or in which order they are consumed.
    """
    if isinstance(seed, np.random.Generator):
        seed = int(seed.integers(0, 2**63))
    ss = np.random.SeedSequence(seed)
    return [np.random.Generator(np.random.PCG64(child)) for child in ss.spawn(int(count))]


def child_rng(seed, index: int) -> np.random.Generator:
    """Stream ``index`` of :func:`spawn_rngs` without building its siblings."""
    ss = np.random.SeedSequence(seed, spawn_key=(int(index),))
    return np.random.Generator(np.random.PCG64(ss))


def _sample_tn_inverse_cdf(rng, a, b, size):
    # Work in the lower half so that Phi(a), Phi(b) keep relative precision.
    flip = a > 0
    a, b = np.where(flip, -b, a), np.where(flip, -a, b)
    log_pa = special.log_ndtr(a)
    log_pb = special.log_ndtr(b)
    u = rng.uniform(size=size)
    # log{Phi(a) + u (Phi(b) - Phi(a))}
    log_p = log_pb + np.log(u + (1.0 - u) * np.exp(log_pa - log_pb))
    x = special.ndtri_exp(log_p)
    x = np.clip(x, a, b)
    return np.where(flip, -x, x)


def sample_truncated_normal(rng, mu=0.0, sigma=1.0, lo=-np.inf, hi=np.inf, size=None):
    """Draw from N(mu, sigma^2) conditioned on [lo, hi].

    Rejection from the untruncated normal is used whenever the interval holds
    at least 10% of the mass; otherwise the inverse CDF is evaluated in log
    space. Arguments broadcast like numpy distributions; with ``size=None`` and
    scalar arguments a float is returned.
    """
    rng = make_rng(rng)
    mu, sigma, lo, hi = (np.asarray(v, dtype=float) for v in (mu, sigma, lo, hi))
    if np.any(sigma <= 0):
        raise ValidationError("sigma must be positive")
    if np.any(lo >= hi):
        raise ValidationError("truncation bounds require lo < hi")
    shape = np.broadcast_shapes(mu.shape, sigma.shape, lo.shape, hi.shape) if size is None else tuple(np.atleast_1d(size))
    a = np.broadcast_to((lo - mu) / sigma, shape)
    b = np.broadcast_to((hi - mu) / sigma, shape)
    mass = special.ndtr(b) - special.ndtr(a)

    std = np.empty(shape)
    rej = mass >= 0.1
    if np.any(~rej):
        std[~rej] = _sample_tn_inverse_cdf(rng, a[~rej], b[~rej], int(np.sum(~rej)))
    todo = np.flatnonzero(rej)
    a_flat, b_flat, std_flat = a.reshape(-1), b.reshape(-1), std.reshape(-1)
    while todo.size:
        draw = rng.standard_normal(todo.size)
        ok = (draw >= a_flat[todo]) & (draw <= b_flat[todo])
        std_flat[todo[ok]] = draw[ok]
        todo = todo[~ok]
    out = np.broadcast_to(mu, shape) + np.broadcast_to(sigma, shape) * std
    out = np.clip(out, np.broadcast_to(lo, shape), np.broadcast_to(hi, shape))
    if out.ndim == 0:
        return float(out)
    return out
