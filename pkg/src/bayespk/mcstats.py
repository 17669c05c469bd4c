"""Posterior summaries, convergence diagnostics and PSIS leave-one-out.

R-hat and ESS follow the rank-normalized split-chain definitions of
Vehtari et al. (2021); PSIS follows Vehtari, Gelman & Gabry (2017) with the
Zhang & Stephens (2009) generalized Pareto fit.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import special, stats

__all__ = [
    "SummaryRow", "LooResult", "summarize", "split_rank_rhat", "rhat_basic", "ess_bulk",
    "ess_tail", "ess_basic", "mcse_mean", "rank_normalize", "psis_loo", "psis_smooth",
    "gpd_fit", "loo_compare", "SUMMARY_HEADER", "write_summary_csv",
]

SUMMARY_HEADER = ("variable", "mean", "median", "sd", "mad", "q5", "q95", "rhat", "ess_bulk", "ess_tail")
KHAT_THRESHOLD = 0.7


def _as_chains(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ValueError("expected draws shaped (chains, iterations)")
    return x


def _split(x: np.ndarray) -> np.ndarray:
    """Halve each chain; an odd final draw is dropped."""
    n = x.shape[1] // 2
    return np.concatenate([x[:, :n], x[:, n:2 * n]], axis=0)


def _degenerate(x: np.ndarray) -> bool:
    return x.shape[1] < 4 or not np.all(np.isfinite(x)) or np.ptp(x) == 0


def rank_normalize(x) -> np.ndarray:
    """Normal scores of pooled average ranks, ``Phi^-1((r - 3/8) / (S + 1/4))``."""
    x = np.asarray(x, dtype=float)
    r = stats.rankdata(x, method="average").reshape(x.shape)
    return special.ndtri((r - 0.375) / (x.size + 0.25))


def rhat_basic(x) -> float | None:
    """Classic potential scale reduction on already split chains."""
    x = _as_chains(x)
    m, n = x.shape
    if m < 2 or n < 2:
        return None
    W = np.mean(np.var(x, axis=1, ddof=1))
    if W <= 0:
        return None
    B = n * np.var(np.mean(x, axis=1), ddof=1)
    return float(math.sqrt(((n - 1) / n * W + B / n) / W))


def split_rank_rhat(chains, kind: str = "max") -> float | None:
    """Rank-normalized split R-hat; ``None`` if undefined.

    ``kind`` selects the bulk statistic, the folded one (ranks of
    ``|x - median|``, sensitive to scale differences) or their maximum,
    which is what summaries report.  Only the bulk statistic is invariant
    under monotone transforms of the draws; folding depends on the scale.
    """
    if kind not in ("max", "bulk", "folded"):
        raise ValueError(f"unknown R-hat kind {kind!r}")
    x = _as_chains(chains)
    if _degenerate(x):
        return None
    xs = _split(x)
    bulk = rhat_basic(rank_normalize(xs))
    if kind == "bulk":
        return bulk
    folded_src = np.abs(xs - np.median(xs))
    folded = rhat_basic(rank_normalize(folded_src)) if np.ptp(folded_src) > 0 else None
    if kind == "folded":
        return folded
    if folded is None:
        return bulk
    if bulk is None:
        return None
    return max(bulk, folded)


def _autocov(x: np.ndarray) -> np.ndarray:
    """Biased autocovariance of each row via zero-padded FFT."""
    m, n = x.shape
    size = 1 << (2 * n - 1).bit_length()
    xc = x - x.mean(axis=1, keepdims=True)
    f = np.fft.rfft(xc, n=size, axis=1)
    return np.fft.irfft(f * np.conj(f), n=size, axis=1)[:, :n] / n


def ess_basic(chains, split: bool = False) -> float | None:
    """ESS from Geyer's initial monotone sequence over the given chains."""
    x = _as_chains(chains)
    if split:
        x = _split(x)
    m, n = x.shape
    if n < 4 or not np.all(np.isfinite(x)) or np.ptp(x) == 0:
        return None
    acov = _autocov(x)
    chain_var = acov[:, 0] * n / (n - 1.0)
    mean_var = chain_var.mean()
    var_plus = mean_var * (n - 1.0) / n
    if m > 1:
        var_plus += np.var(x.mean(axis=1), ddof=1)
    if var_plus <= 0:
        return None
    rho = np.zeros(n)
    rho[0] = 1.0
    rho_even = 1.0
    rho_odd = 1.0 - (mean_var - acov[:, 1].mean()) / var_plus
    rho[1] = rho_odd
    t = 1
    while t < n - 4 and rho_even + rho_odd > 0:
        rho_even = 1.0 - (mean_var - acov[:, t + 1].mean()) / var_plus
        rho_odd = 1.0 - (mean_var - acov[:, t + 2].mean()) / var_plus
        if rho_even + rho_odd >= 0:
            rho[t + 1] = rho_even
            rho[t + 2] = rho_odd
        t += 2
    max_t = t
    if rho_even > 0:
        rho[max_t + 1] = rho_even
    # initial monotone sequence
    t = 1
    while t <= max_t - 2:
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t]:
            rho[t + 1] = rho[t + 2] = 0.5 * (rho[t - 1] + rho[t])
        t += 2
    total = m * n
    tau = -1.0 + 2.0 * rho[:max_t + 1].sum() + rho[max_t + 1]
    tau = max(tau, 1.0 / math.log10(total))
    return float(total / tau)


def ess_bulk(chains) -> float | None:
    x = _as_chains(chains)
    if _degenerate(x):
        return None
    ess = ess_basic(rank_normalize(_split(x)))
    if ess is not None and ess > 2 * x.size:
        warnings.warn(f"bulk ESS {ess:.0f} exceeds twice the number of draws ({x.size})", stacklevel=2)
    return ess


def _ess_quantile(x: np.ndarray, prob: float, upper: bool) -> float | None:
    q = np.quantile(x, prob)
    ind = (x >= q) if upper else (x <= q)
    return ess_basic(_split(ind.astype(float)))


def ess_tail(chains) -> float | None:
    """Min of the ESS of ``1{x <= q05}`` and ``1{x >= q95}`` on split chains."""
    x = _as_chains(chains)
    if _degenerate(x):
        return None
    lo = _ess_quantile(x, 0.05, upper=False)
    hi = _ess_quantile(x, 0.95, upper=True)
    if lo is None or hi is None:
        return None
    return min(lo, hi)


def mcse_mean(chains) -> float | None:
    """Monte Carlo standard error of the mean, ``sd / sqrt(ESS)`` on raw split chains."""
    x = _as_chains(chains)
    if _degenerate(x):
        return None
    ess = ess_basic(_split(x))
    if ess is None:
        return None
    return float(np.std(x, ddof=1) / math.sqrt(ess))


# -- summaries ------------------------------------------------------------------------

@dataclass(frozen=True)
class SummaryRow:
    variable: str
    mean: float
    median: float
    sd: float
    mad: float
    q5: float
    q95: float
    rhat: float | None
    ess_bulk: float | None
    ess_tail: float | None

    def as_tuple(self):
        return tuple(getattr(self, k) for k in SUMMARY_HEADER)


def summarize_array(name: str, chains) -> SummaryRow:
    x = _as_chains(chains)
    flat = x.ravel()
    med = float(np.median(flat))
    q5, q95 = (float(v) for v in np.quantile(flat, [0.05, 0.95]))
    return SummaryRow(
        variable=name,
        mean=float(np.mean(flat)),
        median=med,
        sd=float(np.std(flat, ddof=1)) if flat.size > 1 else 0.0,
        mad=float(1.4826 * np.median(np.abs(flat - med))),
        q5=q5,
        q95=q95,
        rhat=split_rank_rhat(x),
        ess_bulk=ess_bulk(x),
        ess_tail=ess_tail(x),
    )


def summarize(draws, names=None) -> list[SummaryRow]:
    """One :class:`SummaryRow` per parameter of a :class:`~bayespk.nuts.DrawsMatrix`.

    Statistics pool the stored draws of all chains.  R-hat and ESS are
    ``None`` (undefined) for constant draws or chains shorter than four.
    """
    names = list(draws.param_names) if names is None else list(names)
    start = draws.warmup_included
    return [summarize_array(n, draws.param(n)[:, start:]) for n in names]


def _fmt(v) -> str:
    if v is None:
        return "NA"
    return f"{v:.6g}"


def write_summary_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for r in rows:
            w.writerow([r.variable] + [_fmt(v) for v in r.as_tuple()[1:]])


# -- PSIS-LOO -------------------------------------------------------------------------

@dataclass(frozen=True)
class LooResult:
    elpd_loo: float
    se: float
    pointwise: np.ndarray      # elpd_i
    pareto_k: np.ndarray
    p_loo: float

    @property
    def n_bad(self) -> int:
        return int(np.sum(self.pareto_k > KHAT_THRESHOLD))

    @property
    def n_obs(self) -> int:
        return len(self.pointwise)


def gpd_fit(x) -> tuple[float, float]:
    """Zhang-Stephens posterior-mean fit of a generalized Pareto to sorted exceedances.

    The shape is shrunk toward 0.5 by a weak prior worth 10 observations.
    Returns ``(k, sigma)``.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    prior_bs, prior_k = 3.0, 10.0
    m = 30 + int(math.sqrt(n))
    b = 1.0 - np.sqrt(m / (np.arange(1, m + 1) - 0.5))
    b /= prior_bs * x[int(n / 4 + 0.5) - 1]
    b += 1.0 / x[-1]
    k = np.log1p(-b[:, None] * x).mean(axis=1)
    prof = n * (np.log(-b / k) - k - 1.0)
    with np.errstate(over="ignore"):
        w = 1.0 / np.exp(prof - prof[:, None]).sum(axis=1)
    keep = w >= 10 * np.finfo(float).eps
    w, b = w[keep], b[keep]
    w /= w.sum()
    b_post = float(np.sum(b * w))
    k_post = float(np.log1p(-b_post * x).mean())
    sigma = -k_post / b_post
    k_post = (n * k_post + prior_k * 0.5) / (n + prior_k)
    return k_post, sigma


def _gpd_quantile(p, k, sigma):
    if abs(k) < np.finfo(float).eps:
        return -sigma * np.log1p(-p)
    return sigma * np.expm1(-k * np.log1p(-p)) / k


def psis_smooth(log_ratios) -> tuple[np.ndarray, float]:
    """Pareto-smoothed, normalized log weights and the tail shape estimate.

    The largest ``M = ceil(min(0.2 S, 3 sqrt(S)))`` raw ratios are replaced
    by expected order statistics of the fitted tail, then capped at the
    largest raw ratio.  With no ratio above the tail cutoff the weights are
    left alone and ``k = -inf``.
    """
    lw = np.asarray(log_ratios, dtype=float)
    S = lw.size
    M = int(math.ceil(min(0.2 * S, 3.0 * math.sqrt(S))))
    if M < 5:
        raise ValueError(f"{S} draws give a Pareto tail of {M} < 5 points; more draws are needed")
    lw = lw - lw.max()
    order = np.argsort(lw, kind="stable")
    cutoff = max(lw[order[-M - 1]], math.log(np.finfo(float).tiny))
    tail = np.flatnonzero(lw > cutoff)
    if tail.size == 0:
        k = -math.inf
    elif tail.size <= 4:
        k = math.inf
    else:
        ts = tail[np.argsort(lw[tail], kind="stable")]
        ecut = math.exp(cutoff)
        k, sigma = gpd_fit(np.exp(lw[ts]) - ecut)
        if math.isfinite(k):
            p = (np.arange(ts.size) + 0.5) / ts.size
            lw[ts] = np.log(_gpd_quantile(p, k, sigma) + ecut)
            lw = np.minimum(lw, 0.0)
    return lw - special.logsumexp(lw), float(k)


def psis_loo(log_lik) -> LooResult:
    """PSIS-LOO from an (S draws x n observations) pointwise log-likelihood matrix."""
    ll = np.asarray(log_lik, dtype=float)
    if ll.ndim != 2:
        raise ValueError("log_lik must be (draws, observations)")
    bad = np.flatnonzero(~np.all(np.isfinite(ll), axis=0))
    if bad.size:
        raise ValueError(f"non-finite log_lik for observation {int(bad[0]) + 1}")
    S, n = ll.shape
    elpd = np.empty(n)
    ks = np.empty(n)
    for i in range(n):
        lw, k = psis_smooth(-ll[:, i])
        elpd[i] = special.logsumexp(lw + ll[:, i])
        ks[i] = k
    lpd = special.logsumexp(ll, axis=0) - math.log(S)
    se = math.sqrt(n * np.var(elpd, ddof=1)) if n > 1 else 0.0
    return LooResult(float(elpd.sum()), se, elpd, ks, float(lpd.sum() - elpd.sum()))


def loo_compare(a: LooResult, b: LooResult) -> dict:
    """``elpd_diff = a - b`` and the standard error of the pointwise differences."""
    if a.n_obs != b.n_obs:
        raise ValueError("LOO results cover different numbers of observations")
    d = a.pointwise - b.pointwise
    se = math.sqrt(a.n_obs * np.var(d, ddof=1)) if a.n_obs > 1 else 0.0
    return {"elpd_diff": float(d.sum()), "se_diff": se}
