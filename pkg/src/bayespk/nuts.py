"""No-U-Turn sampling with dual-averaging step size and a diagonal metric.

The transition is the slice-sampling NUTS of Hoffman & Gelman (2014,
Algorithm 6).  Warmup follows the windowed scheme of Stan: a fast initial
buffer adapting only the step size, a run of doubling windows each ending
in a regularized variance estimate of the unconstrained draws, and a fast
terminal buffer.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

__all__ = [
    "SamplerConfig", "DrawsMatrix", "Target", "BoundModel", "SamplerInitError",
    "leapfrog", "adaptation_windows", "nuts_sample", "META_COLUMNS",
]

log = logging.getLogger(__name__)

META_COLUMNS = ("lp__", "accept_stat__", "stepsize__", "treedepth__", "n_leapfrog__",
                "divergent__", "energy__")


class SamplerInitError(RuntimeError):
    def __init__(self, chain: int, attempts: int, detail: str = ""):
        super().__init__(f"chain {chain}: no finite log density after {attempts} initialization attempts"
                         + (f" ({detail})" if detail else ""))
        self.chain = chain


@dataclass(frozen=True)
class SamplerConfig:
    n_chains: int = 4
    iter_warmup: int = 1000
    iter_sampling: int = 1000
    seed: int = 0
    target_accept: float = 0.8
    max_treedepth: int = 10
    init: str = "prior"                 # prior | uniform | values
    init_values: tuple | None = None    # constrained values when init == "values"
    delta_max: float = 1000.0
    init_attempts: int = 100

    def __post_init__(self):
        if self.n_chains < 1:
            raise ValueError("n_chains must be positive")
        if self.iter_warmup < 0 or self.iter_sampling < 0 or self.iter_warmup + self.iter_sampling == 0:
            raise ValueError("iteration counts must be non-negative and not both zero")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must lie strictly between 0 and 1")
        if self.max_treedepth < 1:
            raise ValueError("max_treedepth must be positive")
        if self.init not in ("prior", "uniform", "values"):
            raise ValueError(f"unknown init strategy {self.init!r}")
        if self.init == "values" and self.init_values is None:
            raise ValueError("init='values' needs init_values")


class Target(Protocol):
    dim: int
    param_names: list[str]

    def log_density_grad(self, z: np.ndarray) -> tuple[float, np.ndarray]: ...
    def constrain(self, z: np.ndarray) -> np.ndarray: ...
    def initial_point(self, rng: np.random.Generator, strategy: str) -> np.ndarray: ...


class BoundModel:
    """A :class:`~bayespk.models.ModelDef` with its data fixed."""

    def __init__(self, model, data):
        self.model = model
        self.data = data
        self.dim = model.dim(data)
        self.param_names = model.param_names(data)

    def log_density_grad(self, z):
        return self.model.log_joint_grad(self.data, z)

    def constrain(self, z):
        return self.model.constrain(self.data, z)

    def unconstrain(self, theta):
        return self.model.unconstrain(self.data, np.asarray(theta, dtype=float))

    def initial_point(self, rng, strategy):
        return self.model.initial_point(self.data, rng, strategy)


@dataclass
class DrawsMatrix:
    """Draws on the constrained scale with per-iteration sampler diagnostics.

    ``values`` has shape (chains, iterations, parameters).  When the run had
    no sampling iterations the warmup draws are stored instead and
    ``warmup_included`` records how many leading iterations are warmup.
    """

    param_names: list[str]
    values: np.ndarray
    meta: dict
    seed: int
    warmup_included: int = 0
    stepsize: np.ndarray = field(default_factory=lambda: np.zeros(0))
    inv_metric: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    unconstrained: np.ndarray | None = None

    def __post_init__(self):
        if len(set(self.param_names)) != len(self.param_names):
            raise ValueError("parameter names must be unique")
        if self.values.ndim != 3 or self.values.shape[2] != len(self.param_names):
            raise ValueError("values must be (chains, iterations, parameters)")
        for k, v in self.meta.items():
            if v.shape != self.values.shape[:2]:
                raise ValueError(f"meta column {k} has shape {v.shape}")

    @property
    def n_chains(self) -> int:
        return self.values.shape[0]

    @property
    def n_iter(self) -> int:
        return self.values.shape[1]

    def param(self, name: str) -> np.ndarray:
        """(chains, iterations) draws of one parameter."""
        return self.values[:, :, self.param_names.index(name)]

    def divergences(self) -> int:
        return int(self.meta["divergent__"][:, self.warmup_included:].sum())

    def treedepth_hits(self, max_treedepth: int) -> int:
        return int((self.meta["treedepth__"][:, self.warmup_included:] >= max_treedepth).sum())


# -- integrator ---------------------------------------------------------------------

def _leapfrog(q, p, g, eps, target, minv):
    p = p + 0.5 * eps * g
    q = q + eps * minv * p
    # trajectories that leave the typical set produce inf/nan; they end as divergences
    with np.errstate(all="ignore"):
        lp, g = target.log_density_grad(q)
    if math.isfinite(lp):
        p = p + 0.5 * eps * g
    return q, p, lp, g


def leapfrog(q, p, eps: float, grad_log_density, inv_metric=None):
    """One half-kick/drift/half-kick step for ``H = -log p(q) + p' M^-1 p / 2``.

    ``grad_log_density(q)`` returns the gradient of the log density.
    """
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    minv = np.ones_like(q) if inv_metric is None else np.asarray(inv_metric, dtype=float)
    p = p + 0.5 * eps * grad_log_density(q)
    q = q + eps * minv * p
    p = p + 0.5 * eps * grad_log_density(q)
    return q, p


def _kinetic(p, minv):
    return 0.5 * float(np.dot(p, minv * p))


@dataclass
class _State:
    q: np.ndarray
    p: np.ndarray
    lp: float
    g: np.ndarray


@dataclass
class _Tree:
    minus: _State
    plus: _State
    sample: _State
    n: int
    s: bool
    alpha: float
    n_alpha: int
    divergent: bool


class _Transition:
    """One NUTS transition; holds the per-iteration context."""

    def __init__(self, target, minv, eps, rng, max_depth, delta_max, logger_ctx):
        self.target = target
        self.minv = minv
        self.eps = eps
        self.rng = rng
        self.max_depth = max_depth
        self.delta_max = delta_max
        self.ctx = logger_ctx

    def _no_uturn(self, minus: _State, plus: _State) -> bool:
        dq = plus.q - minus.q
        return bool(np.dot(dq, self.minv * minus.p) >= 0 and np.dot(dq, self.minv * plus.p) >= 0)

    def build(self, st: _State, log_u, v, j, joint0) -> _Tree:
        if j == 0:
            q, p, lp, g = _leapfrog(st.q, st.p, st.g, v * self.eps, self.target, self.minv)
            new = _State(q, p, lp, g)
            joint = lp - _kinetic(p, self.minv) if math.isfinite(lp) else -math.inf
            if not math.isfinite(joint):
                joint = -math.inf
            n = int(log_u <= joint)
            s = log_u < self.delta_max + joint
            if not s:
                log.debug("divergent transition %s: joint=%g log_u=%g", self.ctx, joint, log_u)
            alpha = math.exp(min(0.0, joint - joint0)) if joint > -math.inf else 0.0
            return _Tree(new, new, new, n, s, alpha, 1, not s)
        t = self.build(st, log_u, v, j - 1, joint0)
        if not t.s:
            return t
        if v < 0:
            t2 = self.build(t.minus, log_u, v, j - 1, joint0)
            minus, plus = t2.minus, t.plus
        else:
            t2 = self.build(t.plus, log_u, v, j - 1, joint0)
            minus, plus = t.minus, t2.plus
        sample = t.sample
        tot = t.n + t2.n
        if tot > 0 and self.rng.uniform() < t2.n / tot:
            sample = t2.sample
        s = t2.s and self._no_uturn(minus, plus)
        return _Tree(minus, plus, sample, tot, s, t.alpha + t2.alpha, t.n_alpha + t2.n_alpha,
                     t.divergent or t2.divergent)

    def run(self, q, lp, g):
        """Returns (state, accept_stat, depth, n_leapfrog, divergent, energy)."""
        p0 = self.rng.standard_normal(q.size) / np.sqrt(self.minv)
        st0 = _State(q, p0, lp, g)
        joint0 = lp - _kinetic(p0, self.minv)
        log_u = joint0 - self.rng.exponential()
        minus = plus = st0
        sample = st0
        n = 1
        depth = 0
        alpha_sum, n_alpha = 0.0, 0
        divergent = False
        while depth < self.max_depth:
            v = 1 if self.rng.uniform() < 0.5 else -1
            if v < 0:
                t = self.build(minus, log_u, v, depth, joint0)
                minus = t.minus
            else:
                t = self.build(plus, log_u, v, depth, joint0)
                plus = t.plus
            alpha_sum += t.alpha
            n_alpha += t.n_alpha
            divergent = divergent or t.divergent
            depth += 1
            if t.s and self.rng.uniform() < min(1.0, t.n / n):
                sample = t.sample
            n += t.n
            if not (t.s and self._no_uturn(minus, plus)):
                break
        accept = alpha_sum / max(n_alpha, 1)
        energy = -sample.lp + _kinetic(sample.p, self.minv)
        return sample, accept, depth, n_alpha, divergent, energy


# -- adaptation ---------------------------------------------------------------------

def adaptation_windows(n_warmup: int) -> list[tuple[int, int]]:
    """Metric-adaptation windows ``[start, end)`` within warmup.

    A 7.5% initial buffer and a 10% terminal buffer adapt only the step
    size; in between, windows start at 25 iterations and double, the last
    one stretching to the terminal buffer.  Short warmups get none.
    """
    if n_warmup < 20:
        return []
    init = int(0.075 * n_warmup)
    term = int(0.10 * n_warmup)
    slow_end = n_warmup - term
    size = min(25, slow_end - init)
    out = []
    start = init
    while start < slow_end:
        end = start + size
        if end + 2 * size > slow_end:
            end = slow_end
        out.append((start, end))
        start = end
        size *= 2
    return out


class _DualAveraging:
    gamma, t0, kappa = 0.05, 10.0, 0.75

    def __init__(self, eps: float, delta: float):
        self.delta = delta
        self.restart(eps)

    def restart(self, eps: float):
        self.mu = math.log(10.0 * eps)
        self.hbar = 0.0
        self.log_eps_bar = 0.0
        self.m = 0

    def update(self, accept: float) -> float:
        self.m += 1
        m = self.m
        w = 1.0 / (m + self.t0)
        self.hbar = (1.0 - w) * self.hbar + w * (self.delta - accept)
        log_eps = self.mu - math.sqrt(m) / self.gamma * self.hbar
        mk = m ** -self.kappa
        self.log_eps_bar = mk * log_eps + (1.0 - mk) * self.log_eps_bar
        return math.exp(log_eps)

    @property
    def final(self) -> float:
        return math.exp(self.log_eps_bar)


class _Welford:
    def __init__(self, n: int):
        self.k = 0
        self.mean = np.zeros(n)
        self.m2 = np.zeros(n)

    def add(self, x):
        self.k += 1
        d = x - self.mean
        self.mean += d / self.k
        self.m2 += d * (x - self.mean)

    def variance(self) -> np.ndarray:
        n = self.k
        var = self.m2 / (n - 1)
        return var * n / (n + 5.0) + 1e-3 * 5.0 / (n + 5.0)


def _find_reasonable_eps(target, q, lp, g, minv, rng, eps: float = 1.0) -> float:
    """Double or halve ``eps`` until one leapfrog step has acceptance near 1/2."""
    p = rng.standard_normal(q.size) / np.sqrt(minv)
    h0 = lp - _kinetic(p, minv)

    def delta(e):
        _, p1, lp1, _ = _leapfrog(q, p, g, e, target, minv)
        if not math.isfinite(lp1):
            return -math.inf
        return lp1 - _kinetic(p1, minv) - h0

    d = delta(eps)
    direction = 1 if d > math.log(0.5) else -1
    for _ in range(100):
        if direction == 1 and not d > math.log(0.5):
            break
        if direction == -1 and not d < math.log(0.5):
            break
        eps = eps * (2.0 ** direction)
        if eps < 1e-12 or eps > 1e7:
            break
        d = delta(eps)
    return eps


# -- driver -------------------------------------------------------------------------

def _initial(target, cfg: SamplerConfig, rng, chain: int):
    last = ""
    for attempt in range(cfg.init_attempts):
        try:
            if cfg.init == "values":
                z = np.asarray(target.unconstrain(np.asarray(cfg.init_values, dtype=float)), dtype=float)
            else:
                z = np.asarray(target.initial_point(rng, cfg.init), dtype=float)
        except (ValueError, RuntimeError) as e:
            last = str(e)
            if cfg.init == "values":
                break
            continue
        with np.errstate(all="ignore"):
            lp, g = target.log_density_grad(z)
        if math.isfinite(lp) and np.all(np.isfinite(g)):
            return z, lp, g
        last = f"log density {lp}"
        if cfg.init == "values":
            break
    raise SamplerInitError(chain, cfg.init_attempts, last)


def _run_chain(target, cfg: SamplerConfig, chain: int):
    rng = np.random.default_rng([cfg.seed, chain])
    n = target.dim
    q, lp, g = _initial(target, cfg, rng, chain)
    minv = np.ones(n)
    eps = _find_reasonable_eps(target, q, lp, g, minv, rng)
    da = _DualAveraging(eps, cfg.target_accept)
    windows = adaptation_windows(cfg.iter_warmup)
    win_end = {e: s for s, e in windows}
    in_window = lambda it: any(s <= it < e for s, e in windows)
    welford = _Welford(n)

    total = cfg.iter_warmup + cfg.iter_sampling
    store_warm = cfg.iter_sampling == 0
    keep = total if store_warm else cfg.iter_sampling
    vals = np.zeros((keep, len(target.param_names)))
    uncon = np.zeros((keep, n))
    meta = {k: np.zeros(keep) for k in META_COLUMNS}
    row = 0
    for it in range(total):
        warm = it < cfg.iter_warmup
        tr = _Transition(target, minv, eps, rng, cfg.max_treedepth, cfg.delta_max,
                         f"chain={chain} iter={it}")
        st, accept, depth, nleap, div, energy = tr.run(q, lp, g)
        q, lp, g = st.q, st.lp, st.g
        if warm:
            eps = da.update(accept)
            if in_window(it):
                welford.add(q)
            if it + 1 in win_end:
                minv = welford.variance()
                welford = _Welford(n)
                eps = _find_reasonable_eps(target, q, lp, g, minv, rng, eps)
                da.restart(eps)
            if it + 1 == cfg.iter_warmup:
                eps = da.final
        if store_warm or not warm:
            vals[row] = target.constrain(q)
            uncon[row] = q
            for k, v in zip(META_COLUMNS, (lp, accept, tr.eps, depth, nleap, float(div), energy)):
                meta[k][row] = v
            row += 1
    return vals, uncon, meta, eps, minv


def nuts_sample(model, data=None, cfg: SamplerConfig | None = None) -> DrawsMatrix:
    """Run ``cfg.n_chains`` independent NUTS chains.

    Parameters
    ----------
    model : ModelDef or Target
        A built-in model (then ``data`` is its prepared data) or any object
        with the :class:`Target` interface (then ``data`` is ``None``).
    cfg : SamplerConfig

    Chains run one after another; chain ``c`` draws its random numbers from
    ``default_rng([seed, c])`` so its output does not depend on the others.
    """
    cfg = cfg or SamplerConfig()
    target = model if data is None else BoundModel(model, data)
    results = [_run_chain(target, cfg, c) for c in range(cfg.n_chains)]
    values = np.stack([r[0] for r in results])
    meta = {k: np.stack([r[2][k] for r in results]) for k in META_COLUMNS}
    draws = DrawsMatrix(
        param_names=list(target.param_names), values=values, meta=meta, seed=cfg.seed,
        warmup_included=cfg.iter_warmup if cfg.iter_sampling == 0 else 0,
        stepsize=np.array([r[3] for r in results]), inv_metric=np.stack([r[4] for r in results]),
        unconstrained=np.stack([r[1] for r in results]),
    )
    if cfg.iter_sampling == 0:
        warnings.warn("no sampling iterations requested; returning warmup draws only", stacklevel=2)
    hits = draws.treedepth_hits(cfg.max_treedepth)
    if hits and cfg.iter_sampling:
        warnings.warn(f"{hits} transitions hit the maximum tree depth of {cfg.max_treedepth}", stacklevel=2)
    ndiv = draws.divergences()
    if ndiv and cfg.iter_sampling:
        warnings.warn(f"{ndiv} divergent transitions after warmup", stacklevel=2)
    return draws
