import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from bayespk.mcstats import (SUMMARY_HEADER, ess_basic, ess_bulk, ess_tail, gpd_fit, loo_compare, mcse_mean,
                             psis_loo, psis_smooth, rhat_basic, split_rank_rhat, summarize_array,
                             write_summary_csv)


def ar1(rho, n, m, seed):
    rng = np.random.default_rng(seed)
    x = np.empty((m, n))
    x[:, 0] = rng.standard_normal(m) / math.sqrt(1 - rho * rho)
    e = rng.standard_normal((m, n))
    for t in range(1, n):
        x[:, t] = rho * x[:, t - 1] + e[:, t]
    return x


def naive_ess(x):
    """Direct-sum autocovariances with the same Geyer truncation, no FFT."""
    m, n = x.shape
    xc = x - x.mean(axis=1, keepdims=True)
    acov = np.array([[np.dot(xc[c, :n - t], xc[c, t:]) / n for t in range(n)] for c in range(m)])
    W = (acov[:, 0] * n / (n - 1)).mean()
    var_plus = W * (n - 1) / n + (np.var(x.mean(axis=1), ddof=1) if m > 1 else 0.0)
    rho = 1.0 - (W - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # Geyer: sum pairs while positive, enforcing monotone pairs; a positive
    # leading term of the first negative pair is added once
    pairs = [rho[0] + rho[1]]
    tail = 0.0
    t = 2
    while t + 1 < n - 2:
        s = rho[t] + rho[t + 1]
        if s < 0:
            tail = max(rho[t], 0.0)
            break
        pairs.append(min(s, pairs[-1]))
        t += 2
    tau = -1.0 + 2.0 * sum(pairs) + tail
    return m * n / max(tau, 1 / math.log10(m * n))


def test_constant_draws():
    r = summarize_array("c", np.full((4, 100), 3.14))
    assert (r.mean, r.median, r.q5, r.q95) == pytest.approx((3.14,) * 4)
    assert r.sd == 0.0 and r.mad == 0.0
    assert r.rhat is None and r.ess_bulk is None and r.ess_tail is None


def test_summary_csv_header_and_na(tmp_path):
    write_summary_csv([summarize_array("c", np.full((2, 10), 1.0))], tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == ",".join(SUMMARY_HEADER)
    assert lines[1].endswith("NA,NA,NA")


def test_iid_normal():
    x = np.random.default_rng(0).standard_normal((4, 1000))
    r = summarize_array("x", x)
    assert abs(r.mean) < 0.05
    assert 0.99 <= r.rhat <= 1.01
    assert 2000 <= r.ess_bulk <= 6000
    assert 1000 <= r.ess_tail <= 6000
    assert mcse_mean(x) == pytest.approx(1 / math.sqrt(4000), rel=0.25)


def test_two_matching_chains():
    x = np.random.default_rng(1).standard_normal((2, 1000))
    assert 0.999 <= split_rank_rhat(x) <= 1.01


def test_separated_chains_hit_rank_ceiling():
    # With disjoint chains the pooled ranks put each split half in a fixed block,
    # so the rank-normalized statistic is bounded: chains carry z-scores of the
    # lower or upper half of N(0,1).  Between-chain variance B/n -> E|Z|^2 = 2/pi,
    # within-chain W -> 1 - 2/pi; R^2 -> 1 + (4/3)(2/pi)/(1 - 2/pi) for 4 split chains
    # (factor 4/3 from the m - 1 = 3 denominator).
    rng = np.random.default_rng(2)
    x = np.stack([rng.normal(0, 1, 1000), rng.normal(10, 1, 1000)])
    ceiling = math.sqrt(1 + (4 / 3) * (2 / math.pi) / (1 - 2 / math.pi))
    assert split_rank_rhat(x) == pytest.approx(ceiling, abs=0.01)
    # the classic statistic on the raw draws exceeds 2 comfortably
    assert rhat_basic(np.concatenate([x[:, :500], x[:, 500:]])) > 2


def test_trending_chain():
    rng = np.random.default_rng(3)
    x = np.stack([np.linspace(0, 1, 1000) + 0.05 * rng.standard_normal(1000) for _ in range(2)])
    assert split_rank_rhat(x) > 1.1


@settings(max_examples=30)
@given(arrays(np.float64, (3, 40), elements=st.floats(-3, 3).map(lambda v: round(v, 6))))
def test_bulk_rhat_invariant_under_monotone_transform(x):
    a, b = split_rank_rhat(x, "bulk"), split_rank_rhat(np.exp(x), "bulk")
    if a is None:
        assert b is None
    else:
        assert abs(a - b) <= 1e-12


def test_folded_rhat_depends_on_scale():
    # folding measures distance from the median, which exp() distorts
    x = np.random.default_rng(10).standard_normal((2, 200))
    x[1] *= 1.5
    assert abs(split_rank_rhat(x, "folded") - split_rank_rhat(np.exp(x), "folded")) > 1e-6


def test_ar1_ess_matches_analytic():
    rho = 0.9
    x = ar1(rho, 5000, 4, seed=4)
    ratio = ess_bulk(x) / x.size
    target = (1 - rho) / (1 + rho)
    assert target / 1.5 <= ratio <= target * 1.5


def test_fft_ess_matches_direct_sum():
    x = ar1(0.6, 400, 3, seed=5)
    assert ess_basic(x) == pytest.approx(naive_ess(x), rel=1e-9)


@settings(max_examples=25)
@given(arrays(np.float64, (2, 30), elements=st.floats(-100, 100)))
def test_summary_invariants(x):
    r = summarize_array("x", x)
    assert r.q5 <= r.median <= r.q95
    assert r.sd >= 0 and r.mad >= 0
    for v in (r.ess_bulk, r.ess_tail):
        assert v is None or v > 0


def test_constant_log_lik_gives_constant_elpd():
    ll = np.full((400, 3), -1.25)
    res = psis_loo(ll)
    np.testing.assert_allclose(res.pointwise, -1.25, atol=1e-13)
    assert np.all(res.pareto_k == -np.inf)
    lw, k = psis_smooth(np.zeros(400))
    np.testing.assert_allclose(np.exp(lw), 1 / 400, rtol=1e-12)


def test_too_few_draws():
    with pytest.raises(ValueError, match="more draws"):
        psis_smooth(np.zeros(10))


def test_nonfinite_log_lik_names_observation():
    ll = np.zeros((100, 4))
    ll[3, 2] = np.nan
    with pytest.raises(ValueError, match="observation 3"):
        psis_loo(ll)


def test_gpd_fit_recovers_shape():
    rng = np.random.default_rng(6)
    for k_true in (0.1, 0.5, 0.8):
        x = np.sort(stats.genpareto.rvs(k_true, scale=2.0, size=4000, random_state=rng))
        k, sigma = gpd_fit(x)
        assert abs(k - k_true) < 0.06
        assert sigma == pytest.approx(2.0, rel=0.1)
        # maximum likelihood as a second route
        k_ml, _, _ = stats.genpareto.fit(x, floc=0.0)
        assert abs(k - k_ml) < 0.05


def test_heavy_tail_flagged():
    rng = np.random.default_rng(7)
    lr = np.log(stats.genpareto.rvs(1.2, size=2000, random_state=rng))
    _, k = psis_smooth(lr)
    assert k > 0.7


def conjugate_setup(seed, n=20, S=4000):
    rng = np.random.default_rng(seed)
    y = rng.normal(1.0, 1.0, n)
    # mu ~ N(0, 10^2), y_i ~ N(mu, 1)
    post_var = 1.0 / (1 / 100 + n)
    post_mean = post_var * y.sum()
    mu = rng.normal(post_mean, math.sqrt(post_var), S)
    ll = stats.norm.logpdf(y[None, :], mu[:, None], 1.0)
    exact = []
    for i in range(n):
        v = 1.0 / (1 / 100 + n - 1)
        m = v * (y.sum() - y[i])
        exact.append(stats.norm.logpdf(y[i], m, math.sqrt(1 + v)))
    return ll, np.array(exact)


def test_loo_against_exact_refit():
    ll, exact = conjugate_setup(8)
    res = psis_loo(ll)
    assert np.max(np.abs(res.pointwise - exact)) <= 0.1
    assert np.all(res.pareto_k < 0.7)
    assert res.elpd_loo == pytest.approx(res.pointwise.sum(), rel=1e-14)
    assert res.n_bad == int(np.sum(res.pareto_k > 0.7))
    assert res.se == pytest.approx(math.sqrt(20 * np.var(res.pointwise, ddof=1)))


def test_loo_compare():
    ll, _ = conjugate_setup(9)
    a = psis_loo(ll)
    b = psis_loo(ll - 0.1 * np.arange(20)[None, :] / 20)
    ab, ba = loo_compare(a, b), loo_compare(b, a)
    assert ab["elpd_diff"] == pytest.approx(-ba["elpd_diff"])
    assert ab["se_diff"] == pytest.approx(ba["se_diff"])
    assert ab["elpd_diff"] == pytest.approx(a.elpd_loo - b.elpd_loo)
