import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import roc_auc_score

from flair.errors import ValidationError
from flair.model import FitOptions
from flair.numcore import get_link
from flair.pipeline import fit_flair
from flair.posterior import credible_intervals
from flair.simeval import (
    METRIC_FIELDS,
    SimConfig,
    auc,
    empirical_coverage,
    evaluate_fit,
    make_holdout_mask,
    rel_frob_error_B,
    rel_frob_error_lambda_outer,
    run_replication,
    simulate_dataset,
)


def pairwise_auc(scores, labels):
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    total = 0.0
    for a in pos:
        for b in neg:
            total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (pos.size * neg.size)


class TestSimulate:
    def test_full_spike(self):
        cfg = SimConfig(n=200, p=100, spike_prob=1.0, seed=1)
        data, truth = simulate_dataset(cfg)
        assert np.all(truth.Lam0 == 0) and np.all(truth.B0 == 0)
        assert np.all(get_link("logit").h(truth.Z0) == 0.5)
        assert abs(data.Y.mean() - 0.5) <= 3 * math.sqrt(0.25 / (200 * 100))

    def test_bounds(self):
        cfg = SimConfig(n=50, p=400, k=3, q=3, sigma2=9.0, spike_prob=0.0, seed=2)
        _, truth = simulate_dataset(cfg)
        assert np.max(np.abs(truth.Lam0)) <= 5 and np.max(np.abs(truth.B0)) <= 5
        # with sigma2 = 9 the truncation is active
        assert np.max(np.abs(truth.Lam0)) > 4

    def test_seed_reproducible(self):
        a, _ = simulate_dataset(SimConfig(n=30, p=20, seed=9))
        b, _ = simulate_dataset(SimConfig(n=30, p=20, seed=9))
        c, _ = simulate_dataset(SimConfig(n=30, p=20, seed=10))
        assert np.array_equal(a.Y, b.Y) and not np.array_equal(a.Y, c.Y)

    def test_truth_structure(self):
        data, truth = simulate_dataset(SimConfig(n=40, p=30, k=2, q=3, seed=3))
        assert np.array_equal(truth.Z0, truth.X @ truth.B0.T + truth.M0 @ truth.Lam0.T)
        assert np.all(truth.X[:, 0] == 1) and data.X.shape == (40, 3)
        assert set(np.unique(data.Y)) <= {0.0, 1.0}

    def test_spike_fraction(self):
        _, truth = simulate_dataset(SimConfig(n=20, p=2000, k=2, spike_prob=0.5, seed=4))
        assert abs(np.mean(truth.Lam0 == 0) - 0.5) < 0.03

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_mean_probability_matches_mean_outcome(self, seed):
        cfg = SimConfig(n=300, p=100, spike_prob=0.5, seed=seed)
        data, truth = simulate_dataset(cfg)
        P = get_link("logit").h(truth.Z0)
        assert abs(P.mean() - data.Y.mean()) <= 3 * math.sqrt(0.25 / (300 * 100))

    def test_bad_config(self):
        with pytest.raises(ValidationError):
            SimConfig(spike_prob=1.5)
        with pytest.raises(ValidationError):
            SimConfig(sigma2=0.0)
        with pytest.raises(ValidationError):
            SimConfig(q=0)


class TestHoldout:
    def test_count(self, rng):
        Y = (rng.uniform(size=(1000, 100)) < 0.3).astype(float)
        mask = make_holdout_mask(Y, 0.2, stratified=False, rng=1)
        assert abs(mask.sum() - 20000) <= 1
        assert abs(make_holdout_mask(Y, 0.2, rng=1).sum() - 20000) <= 1

    def test_stratified_ones_share(self, rng):
        Y = np.zeros((1000, 100))
        Y.reshape(-1)[rng.choice(100_000, 10_000, replace=False)] = 1
        mask = make_holdout_mask(Y, 0.2, stratified=True, rng=2)
        share = Y[mask].mean()
        assert 0.095 <= share <= 0.105

    def test_reproducible(self, rng):
        Y = (rng.uniform(size=(50, 40)) < 0.5).astype(float)
        a = make_holdout_mask(Y, 0.3, stratified=False, rng=5)
        b = make_holdout_mask(Y, 0.3, stratified=False, rng=5)
        assert np.array_equal(a, b)

    def test_bad_fraction(self):
        with pytest.raises(ValidationError):
            make_holdout_mask(np.zeros((3, 3)), 1.0)

    def test_row_fully_held_out(self):
        with pytest.raises(ValidationError):
            make_holdout_mask(np.zeros((1, 3)), 0.9, stratified=False, rng=0)


class TestMetrics:
    def test_lambda_outer_examples(self, rng):
        L = rng.standard_normal((8, 2))
        LL = L @ L.T
        assert rel_frob_error_lambda_outer(LL, L) == 0.0
        assert rel_frob_error_lambda_outer(2 * LL, L) == pytest.approx(1.0, rel=1e-14)
        with pytest.raises(ValidationError):
            rel_frob_error_lambda_outer(LL, np.zeros((8, 2)))

    def test_lambda_outer_loop(self, rng):
        L = rng.standard_normal((7, 3))
        est = rng.standard_normal((7, 7))
        num = den = 0.0
        for a in range(7):
            for b in range(7):
                t = sum(L[a, l] * L[b, l] for l in range(3))
                num += (est[a, b] - t) ** 2
                den += t * t
        assert rel_frob_error_lambda_outer(est, L) == pytest.approx(math.sqrt(num / den), rel=1e-12)

    def test_B_examples(self, rng):
        B = rng.standard_normal((6, 2))
        assert rel_frob_error_B(B, B) == 0.0
        assert rel_frob_error_B(B + 1, B) == pytest.approx(1.0, rel=1e-14)
        est = rng.standard_normal((6, 2))
        loop = math.sqrt(sum((est[a, b] - B[a, b]) ** 2 for a in range(6) for b in range(2)) / 12)
        assert rel_frob_error_B(est, B) == pytest.approx(loop, rel=1e-12)

    def test_coverage_examples(self):
        t = np.arange(4.0)
        assert empirical_coverage(t, t, t) == 1.0
        assert empirical_coverage(t + 1, t + 2, t) == 0.0
        assert empirical_coverage(t - [1, 1, -1, -1], t + 1, t) == 0.5

    def test_auc_examples(self):
        labels = np.array([0, 0, 1, 1])
        assert auc([0.1, 0.2, 0.8, 0.9], labels) == 1.0
        assert auc([0.5] * 4, labels) == 0.5
        assert auc([0.9, 0.8, 0.2, 0.1], labels) == 0.0
        with pytest.raises(ValidationError):
            auc([0.1, 0.2], [1, 1])

    @given(st.lists(st.integers(0, 5), min_size=4, max_size=40), st.integers(0, 2**31))
    @settings(max_examples=80, deadline=None)
    def test_auc_oracles(self, raw, seed):
        scores = np.array(raw, dtype=float)
        labels = np.random.default_rng(seed).integers(0, 2, scores.size)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        value = auc(scores, labels)
        assert value == pytest.approx(pairwise_auc(scores, labels), abs=1e-12)
        assert value == pytest.approx(roc_auc_score(labels, scores), abs=1e-12)


@pytest.fixture(scope="module")
def tiny_replication():
    cfg = SimConfig(n=60, p=40, k=1, q=2, spike_prob=0.0, seed=3)
    return run_replication(cfg, 2, n_mc=400, holdout_fraction=0.2)


class TestReplication:
    def test_smoke_fields_finite(self, tiny_replication):
        for rep in tiny_replication.reports:
            for name in METRIC_FIELDS:
                assert np.isfinite(getattr(rep, name)), name
            assert rep.k_selected == 1

    def test_aggregation(self, tiny_replication):
        for name in METRIC_FIELDS:
            vals = [getattr(r, name) for r in tiny_replication.reports]
            assert tiny_replication.mean[name] == pytest.approx(np.mean(vals), abs=1e-12)
            assert tiny_replication.se[name] == pytest.approx(np.std(vals, ddof=1) / math.sqrt(2), abs=1e-12)

    def test_threads_match_serial(self, tiny_replication):
        cfg = tiny_replication.config
        threaded = run_replication(cfg, 2, n_mc=400, holdout_fraction=0.2, threads=2)
        for name in METRIC_FIELDS:
            assert threaded.mean[name] == tiny_replication.mean[name]

    def test_to_dict(self, tiny_replication):
        d = tiny_replication.to_dict()
        assert d["replicates"] == 2 and len(d["reports"]) == 2

    def test_bad_replicates(self):
        with pytest.raises(ValidationError):
            run_replication(SimConfig(n=30, p=20, k=1), 0)


def test_coverage_monotone_in_rho():
    cfg = SimConfig(n=150, p=60, k=2, q=2, spike_prob=0.0, seed=8)
    data, truth = simulate_dataset(cfg)
    fit = fit_flair(data, 2, opts=FitOptions())
    prev_B = prev_L = -1.0
    for rho in (1.0, 1.2, 1.5, 2.0):
        iB = credible_intervals(fit.posterior, "B", rho=rho)
        iL = credible_intervals(fit.posterior, "LambdaOuter", n_mc=1000, seed=1, rho=rho)
        cB = empirical_coverage(iB.lower, iB.upper, truth.B0)
        cL = empirical_coverage(iL.lower, iL.upper, truth.lambda_outer)
        assert cB >= prev_B and cL >= prev_L
        prev_B, prev_L = cB, cL


def test_evaluate_fit_without_mask():
    data, truth = simulate_dataset(SimConfig(n=80, p=30, k=1, q=2, spike_prob=0.0, seed=2))
    fit = fit_flair(data, 1)
    rep = evaluate_fit(fit, truth, data, n_mc=400, rng=0)
    assert rep.auc is None and 0 <= rep.coverage_B <= 1 and rep.rel_err_B >= 0
