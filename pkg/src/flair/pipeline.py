"""End-to-end fit: choose k, initialize, MAP, post-process, calibrate."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ValidationError
from .estimation import MapTrace, map_fit, postprocess
from .initialization import InitResult, jic_path, svd_initialize
from .model import Dataset, FactorState, FitOptions, PriorConfig
from .posterior import GaussianPosterior, build_posterior

__all__ = ["FlairFit", "fit_flair"]


@dataclass(eq=False)
class FlairFit:
    k: int
    init: InitResult
    prior: PriorConfig
    map_state: FactorState
    trace: MapTrace
    state: FactorState  # post-processed
    posterior: GaussianPosterior
    jic: Optional[np.ndarray] = None
    timings: dict = field(default_factory=dict)

    @property
    def rho(self) -> float:
        return self.posterior.rho


def fit_flair(data: Dataset, k: Optional[int] = None, *, k_max: int = 5, opts: FitOptions = None,
              c_lambda: float = 10.0, c_B: float = 10.0, svd_method=None,
              rho_subsample=None) -> FlairFit:
    """Run the full procedure and return every intermediate.

    When ``k`` is None it is chosen by JIC over ``1..k_max`` (candidates with
    ``k + q > min(n, p)`` are skipped).
    """
    opts = opts or FitOptions()
    timings = {}
    t0 = time.perf_counter()
    jic_values = None
    if k is None:
        k_max = min(int(k_max), min(data.n, data.p) - data.q)
        if k_max < 1:
            raise ValidationError("no feasible latent dimension: q >= min(n, p)")
        jic_values = jic_path(data, k_max, opts.link, svd_method, c_lambda=c_lambda, c_B=c_B,
                              seed=opts.seed)
        k = int(np.argmin(jic_values)) + 1
    t1 = time.perf_counter()
    init = svd_initialize(data, k, opts.link, svd_method, c_lambda=c_lambda, c_B=c_B, seed=opts.seed)
    prior = init.prior(c_lambda=c_lambda, c_B=c_B)
    t2 = time.perf_counter()
    map_state, trace = map_fit(data, prior, opts, init)
    t3 = time.perf_counter()
    state = postprocess(map_state, data.X)
    posterior = build_posterior(state, data, prior, opts.link, subsample=rho_subsample, seed=opts.seed)
    t4 = time.perf_counter()
    timings.update(
        select_k=t1 - t0, initialize=t2 - t1, map=t3 - t2, posterior=t4 - t3, total=t4 - t0
    )
    return FlairFit(
        k=k, init=init, prior=prior, map_state=map_state, trace=trace, state=state,
        posterior=posterior, jic=jic_values, timings=timings,
    )
