"""Simulation protocols, holdout masks and evaluation metrics."""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy import stats

from .errors import FlairError, ValidationError
from .model import Dataset, FitOptions
from .numcore import child_rng, get_link, make_rng, sample_truncated_normal
from .pipeline import fit_flair
from .posterior import credible_intervals, posterior_mean_sigma, predict_probabilities

__all__ = [
    "SimConfig",
    "SimTruth",
    "FitReport",
    "ReplicationResult",
    "simulate_dataset",
    "make_holdout_mask",
    "rel_frob_error_lambda_outer",
    "rel_frob_error_B",
    "empirical_coverage",
    "auc",
    "REFERENCE_CONFIG",
    "evaluate_fit",
    "run_replication",
]


@dataclass(frozen=True)
class SimConfig:
    """Generative settings.

    Each loading and coefficient is exactly zero with probability
    ``spike_prob`` and otherwise drawn from N(0, sigma2) truncated to
    ``bounds``. Covariates beyond the intercept and the latent factors are
    standard normal.
    """

    n: int = 500
    p: int = 200
    k: int = 2
    q: int = 2
    sigma2: float = 1.0
    spike_prob: float = 0.5
    bounds: tuple = (-5.0, 5.0)
    link: str = "logit"
    seed: int = 0

    def __post_init__(self):
        if min(self.n, self.p) < 1 or self.k < 1 or self.q < 1:
            raise ValidationError("n, p, k and q must be positive (q counts the intercept)")
        if not 0.0 <= self.spike_prob <= 1.0:
            raise ValidationError("spike_prob must lie in [0, 1]")
        if self.sigma2 <= 0:
            raise ValidationError("sigma2 must be positive")
        lo, hi = self.bounds
        if not lo < hi:
            raise ValidationError("bounds must satisfy lo < hi")
        object.__setattr__(self, "bounds", (float(lo), float(hi)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bounds"] = list(self.bounds)
        return d

    def with_seed(self, seed) -> "SimConfig":
        d = asdict(self)
        d["seed"] = int(seed)
        return SimConfig(**d)


# Lower-dimensional protocol with fully stated k, q and sigma^2 (no spike).
REFERENCE_CONFIG = SimConfig(n=500, p=200, k=2, q=2, sigma2=1.0, spike_prob=0.0)


@dataclass(frozen=True, eq=False)
class SimTruth:
    Lam0: np.ndarray
    B0: np.ndarray
    M0: np.ndarray
    Z0: np.ndarray
    Y: np.ndarray
    X: np.ndarray

    @property
    def lambda_outer(self) -> np.ndarray:
        return self.Lam0 @ self.Lam0.T


def _spike_slab(rng, shape, cfg: SimConfig):
    lo, hi = cfg.bounds
    slab = sample_truncated_normal(rng, 0.0, math.sqrt(cfg.sigma2), lo, hi, size=shape)
    if cfg.spike_prob > 0:
        zero = rng.uniform(size=shape) < cfg.spike_prob
        slab = np.where(zero, 0.0, slab)
    return slab


def simulate_dataset(cfg: SimConfig, rng=None):
    """Draw (Dataset, SimTruth) from the latent factor logistic model.

    Uses ``cfg.seed`` when ``rng`` is not given.
    """
    rng = make_rng(cfg.seed if rng is None else rng)
    n, p, k, q = cfg.n, cfg.p, cfg.k, cfg.q
    Lam0 = _spike_slab(rng, (p, k), cfg)
    B0 = _spike_slab(rng, (p, q), cfg)
    X = np.ones((n, q))
    if q > 1:
        X[:, 1:] = rng.standard_normal((n, q - 1))
    M0 = rng.standard_normal((n, k))
    Z0 = X @ B0.T + M0 @ Lam0.T
    prob = get_link(cfg.link).h(Z0)
    Y = (rng.uniform(size=(n, p)) < prob).astype(float)
    return Dataset(Y=Y, X=X), SimTruth(Lam0=Lam0, B0=B0, M0=M0, Z0=Z0, Y=Y, X=X)


def make_holdout_mask(Y, fraction=0.2, stratified=True, rng=None) -> np.ndarray:
    """Boolean mask holding out round(fraction * n * p) cells (True = held out).

    In stratified mode the zero cells and the one cells are sampled separately
    so that the held-out set keeps the global share of ones.
    """
    Y = np.asarray(Y)
    if not 0.0 < fraction < 1.0:
        raise ValidationError("fraction must lie in (0, 1)")
    rng = make_rng(rng)
    n, p = Y.shape
    total = int(round(fraction * n * p))
    flat = Y.reshape(-1)
    mask = np.zeros(n * p, dtype=bool)
    if stratified:
        ones = np.flatnonzero(flat == 1)
        zeros = np.flatnonzero(flat != 1)
        n_ones = int(round(total * ones.size / flat.size))
        n_ones = min(n_ones, ones.size)
        n_zeros = min(total - n_ones, zeros.size)
        mask[rng.choice(ones, n_ones, replace=False)] = True
        mask[rng.choice(zeros, n_zeros, replace=False)] = True
    else:
        mask[rng.choice(n * p, total, replace=False)] = True
    mask = mask.reshape(n, p)
    if np.any(mask.all(axis=1)) or np.any(mask.all(axis=0)):
        raise ValidationError("holdout leaves a row or column without training cells")
    return mask


def rel_frob_error_lambda_outer(est, Lam0) -> float:
    """||est - Lam0 Lam0^T||_F / ||Lam0 Lam0^T||_F."""
    truth = np.asarray(Lam0) @ np.asarray(Lam0).T
    denom = np.linalg.norm(truth)
    if denom == 0:
        raise ValidationError("true loadings are identically zero")
    return float(np.linalg.norm(np.asarray(est) - truth) / denom)


def rel_frob_error_B(est, B0) -> float:
    """||est - B0||_F / sqrt(p q)."""
    B0 = np.asarray(B0)
    return float(np.linalg.norm(np.asarray(est) - B0) / math.sqrt(B0.size))


def empirical_coverage(lower, upper, truth) -> float:
    lower, upper, truth = (np.asarray(a, dtype=float) for a in (lower, upper, truth))
    if not lower.shape == upper.shape == truth.shape:
        raise ValidationError("interval bounds and truth must share a shape")
    return float(np.mean((truth >= lower) & (truth <= upper)))


def auc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney statistic (midranks for ties)."""
    scores = np.asarray(scores, dtype=float).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ValidationError("scores and labels must have the same length")
    pos = labels == 1
    n1 = int(pos.sum())
    n0 = labels.size - n1
    if n1 == 0 or n0 == 0:
        raise ValidationError("AUC needs both classes among the labels")
    ranks = stats.rankdata(scores)
    u = ranks[pos].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


@dataclass
class FitReport:
    """Metrics of one fit against simulation truth (fractions, not percentages)."""

    rel_err_lambda_outer: float = float("nan")
    rel_err_B: float = float("nan")
    coverage_lambda_outer: float = float("nan")
    coverage_B: float = float("nan")
    coverage_lambda_outer_uncorrected: float = float("nan")
    coverage_B_uncorrected: float = float("nan")
    auc: Optional[float] = None
    auc_baseline: Optional[float] = None
    k_selected: Optional[int] = None
    rho: float = float("nan")
    wall_times: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


METRIC_FIELDS = (
    "rel_err_lambda_outer",
    "rel_err_B",
    "coverage_lambda_outer",
    "coverage_B",
    "coverage_lambda_outer_uncorrected",
    "coverage_B_uncorrected",
    "auc",
    "auc_baseline",
    "rho",
)


def coverage_rows(p: int, rng, size: int = 100) -> np.ndarray:
    """Outcomes spanning the principal submatrix used for Lam Lam^T coverage."""
    if p <= size:
        return np.arange(p)
    return np.sort(make_rng(rng).choice(p, size, replace=False))


def evaluate_fit(fit, truth: SimTruth, data: Dataset = None, *, alpha=0.05, n_mc=2000,
                 rng=None, submatrix=100) -> FitReport:
    """Errors, coverage with and without rho, and holdout AUC for one fit."""
    rng = make_rng(rng)
    post = fit.posterior
    Sigma, B = posterior_mean_sigma(post)
    rows = coverage_rows(post.p, rng, submatrix)
    mc_seed = int(rng.integers(0, 2**63))
    sub_truth = truth.lambda_outer[np.ix_(rows, rows)]
    rep = FitReport(
        rel_err_lambda_outer=rel_frob_error_lambda_outer(Sigma, truth.Lam0),
        rel_err_B=rel_frob_error_B(B, truth.B0),
        k_selected=int(fit.k),
        rho=float(post.rho),
        wall_times=dict(fit.timings),
    )
    for rho, suffix in ((post.rho, ""), (1.0, "_uncorrected")):
        iB = credible_intervals(post, "B", alpha, rho=rho)
        setattr(rep, "coverage_B" + suffix, empirical_coverage(iB.lower, iB.upper, truth.B0))
        iL = credible_intervals(post, "LambdaOuter", alpha, n_mc=n_mc, seed=mc_seed, rows=rows, rho=rho)
        setattr(rep, "coverage_lambda_outer" + suffix,
                empirical_coverage(iL.lower, iL.upper, sub_truth))
    if data is not None and data.mask is not None:
        held = data.mask
        probs = predict_probabilities(post)
        rep.auc = auc(probs[held], data.Y[held])
        obs = ~held
        col_rate = (data.Y * obs).sum(axis=0) / obs.sum(axis=0)
        rep.auc_baseline = auc(np.broadcast_to(col_rate, data.Y.shape)[held], data.Y[held])
    return rep


@dataclass
class ReplicationResult:
    config: SimConfig
    reports: list
    mean: dict
    se: dict
    wall_time_mean: float

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "replicates": len(self.reports),
            "mean": self.mean,
            "se": self.se,
            "wall_time_mean": self.wall_time_mean,
            "reports": [r.to_dict() for r in self.reports],
        }


def _aggregate(reports):
    mean, se = {}, {}
    for name in METRIC_FIELDS:
        vals = [getattr(r, name) for r in reports]
        vals = np.array([v for v in vals if v is not None], dtype=float)
        if vals.size == 0:
            mean[name] = se[name] = None
            continue
        mean[name] = float(np.mean(vals))
        se[name] = float(np.std(vals, ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else 0.0
    ks = [r.k_selected for r in reports]
    mean["k_selected"] = float(np.mean(ks))
    return mean, se


def run_replication(cfg: SimConfig, replicates: int, opts: FitOptions = None, *, auto_k=False,
                    k_max=5, alpha=0.05, n_mc=2000, holdout_fraction=None, threads=1,
                    submatrix=100) -> ReplicationResult:
    """Simulate, fit and score ``replicates`` independent datasets.

    Replicate ``r`` draws everything from child stream ``r`` of ``cfg.seed``,
    so results do not depend on ``threads`` or on scheduling order.
    """
    if replicates < 1:
        raise ValidationError("replicates must be >= 1")
    opts = opts or FitOptions(link=cfg.link)

    def one(r):
        try:
            rng = child_rng(cfg.seed, r)
            data, truth = simulate_dataset(cfg, rng)
            if holdout_fraction:
                data = data.with_mask(make_holdout_mask(data.Y, holdout_fraction, True, rng))
            t0 = time.perf_counter()
            fit = fit_flair(data, None if auto_k else cfg.k, k_max=k_max, opts=opts)
            elapsed = time.perf_counter() - t0
            rep = evaluate_fit(fit, truth, data, alpha=alpha, n_mc=n_mc, rng=rng, submatrix=submatrix)
            rep.wall_times["fit_total"] = elapsed
            return rep
        except FlairError as exc:
            raise type(exc)(f"replicate {r}: {exc}") from exc

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            reports = list(pool.map(one, range(replicates)))
    else:
        reports = [one(r) for r in range(replicates)]
    mean, se = _aggregate(reports)
    wall = float(np.mean([r.wall_times["fit_total"] for r in reports]))
    return ReplicationResult(config=cfg, reports=reports, mean=mean, se=se, wall_time_mean=wall)
