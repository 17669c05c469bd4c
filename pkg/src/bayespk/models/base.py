"""Model-evaluation contract shared by the built-in models.

A model maps an unconstrained vector ``zeta`` to named constrained parameter
blocks, evaluates priors and a lognormal measurement model on the
observations of a prepared dataset, and produces generated quantities
(posterior predictive replicates and pointwise log-likelihood).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .. import autodiff as ad
from ..autodiff import value
from ..events import EventSchedule, expand_addl
from ..ivp import IntegrationError
from ..linpk import Plan, build_plan, eigenvalues

__all__ = [
    "ConstraintSpec", "ParamBlock", "ConstraintViolation", "ModelData", "SubjectData",
    "ModelDef", "ka_lower_bound", "allometric_scale", "lognormal_prior", "half_normal_prior",
]


class ConstraintViolation(ValueError):
    """A constrained parameter value lies on or below its lower bound."""


@dataclass(frozen=True)
class ConstraintSpec:
    """Lower bound ``L`` with transform ``theta = L + exp(zeta)``.

    ``lower`` is a constant, ``None`` for an unbounded block, or a callable
    ``lower(theta, raw)`` of the already constrained blocks and of
    ``raw = exp(zeta)`` for the block itself.  A callable may read entries of
    ``raw`` only where its own bound is zero, so those entries are final.
    The log-Jacobian of the transform is ``zeta``.
    """

    lower: float | Callable[[dict, object], object] | None = 0.0

    def bound(self, theta: Mapping, raw=None):
        return self.lower(theta, raw) if callable(self.lower) else self.lower

    @property
    def unbounded(self) -> bool:
        return self.lower is None


@dataclass(frozen=True)
class ParamBlock:
    name: str
    shape: tuple = ()
    constraint: ConstraintSpec = ConstraintSpec()

    @property
    def size(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1

    def names(self) -> list[str]:
        if not self.shape:
            return [self.name]
        return [f"{self.name}." + ".".join(str(i + 1) for i in idx) for idx in np.ndindex(*self.shape)]


def ka_lower_bound(CL, Q, V1, V2):
    """Slow disposition rate lambda1 of the central/peripheral system.

    ``ka`` above this bound removes the flip-flop mode in which absorption
    and elimination exchange roles.
    """
    return eigenvalues(CL / V1, Q / V1, Q / V2)[0]


def allometric_scale(weight, exponent: float):
    """``(weight / 70) ** exponent``."""
    w = np.asarray(value(weight), dtype=float)
    if np.any(w <= 0) or not np.all(np.isfinite(w)):
        raise ValueError(f"body weight must be positive, got {weight}")
    return (weight / 70.0) ** exponent


def lognormal_prior(x, median, cv):
    return ad.asum(ad.lognormal_lpdf(x, math.log(median), cv))


def half_normal_prior(x, scale=1.0):
    return ad.asum(ad.normal_lpdf(x, 0.0, scale) + math.log(2.0))


# -- data ---------------------------------------------------------------------------

@dataclass
class SubjectData:
    subject_id: int
    schedule: EventSchedule
    plan: Plan | None
    cols: np.ndarray          # event columns of this subject's used observations
    obs: slice                # positions in ModelData.obs arrays
    weight: float | None = None


@dataclass
class ModelData:
    """A schedule prepared for one model.

    ``obs_*`` arrays describe the observations entering the likelihood, in
    (subject, time) order.  ``obs_id`` numbers every observation record of
    the full dataset from 1, so excluded rows leave gaps.
    """

    schedule: EventSchedule
    subjects: list[SubjectData]
    obs_id: np.ndarray
    obs_subject: np.ndarray
    obs_time: np.ndarray
    obs_cmt: np.ndarray
    obs_dv: np.ndarray
    obs_pd: np.ndarray        # True for pharmacodynamic observations
    extra: dict = field(default_factory=dict)

    @property
    def n_obs(self) -> int:
        return len(self.obs_id)

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)


# -- model --------------------------------------------------------------------------

class ModelDef:
    """Base class; subclasses define blocks, priors and predictions."""

    name: str = "model"
    n_cmt: int = 3
    pd_cmt: int | None = None
    needs_plan: bool = True
    covariates: tuple[str, ...] = ()
    noise_blocks: tuple[str, ...] = ("sigma", "sigmaNeut")
    default_priors: dict = {}

    def __init__(self, priors: Mapping | None = None):
        self.priors = dict(self.default_priors)
        for k, v in (priors or {}).items():
            if k not in self.priors:
                raise KeyError(f"model {self.name} has no prior named {k!r}")
            self.priors[k] = tuple(float(x) for x in np.atleast_1d(v))

    # subclass hooks
    def blocks(self, data: ModelData) -> list[ParamBlock]:
        raise NotImplementedError

    def log_prior(self, data: ModelData, theta: dict):
        raise NotImplementedError

    def predict(self, data: ModelData, theta: dict):
        """Predicted observation means (concentration or count), one per used observation."""
        raise NotImplementedError

    def obs_sigma(self, data: ModelData, theta: dict):
        sig = theta["sigma"]
        if self.pd_cmt is None:
            return sig * np.ones(data.n_obs)
        return ad.where(data.obs_pd, theta["sigmaNeut"] * np.ones(data.n_obs), sig * np.ones(data.n_obs))

    def sample_prior_block(self, name: str, shape, theta: dict, data: ModelData, rng):
        """Prior draw for one block given earlier blocks; ``None`` means no closed form."""
        spec = self.priors.get(name)
        if spec is None:
            return None
        if len(spec) == 1:
            return np.abs(rng.normal(0.0, spec[0], size=shape))
        return np.exp(rng.normal(math.log(spec[0]), spec[1], size=shape))

    # data preparation
    def prepare(self, schedule: EventSchedule, require_dv: bool = True) -> ModelData:
        """Expand ADDL, split subjects and select the likelihood observations.

        Pharmacokinetic observations listed before a subject's first dose
        have a predicted concentration of exactly zero and are left out, as
        are observations without a DV when ``require_dv`` is set.
        """
        sched = expand_addl(schedule)
        all_obs = {id(r): k + 1 for k, r in enumerate(r for r in sched.records if r.evid == 0)}
        subjects, ids, subj, times, cmts, dvs, pd = [], [], [], [], [], [], []
        for j, (sid, sub) in enumerate(sched.subjects().items()):
            if sub.max_cmt() > self.n_cmt:
                raise ValueError(f"subject {sid}: CMT={sub.max_cmt()} exceeds the {self.n_cmt} "
                                 f"compartments of model {self.name}")
            first_dose = next((i for i, r in enumerate(sub.records) if r.evid == 1), len(sub.records))
            cols = []
            start = len(ids)
            for i, r in enumerate(sub.records):
                if r.evid != 0:
                    continue
                is_pd = self.pd_cmt is not None and r.cmt == self.pd_cmt
                if not is_pd and i < first_dose:
                    continue
                if require_dv and (r.dv is None or not math.isfinite(r.dv)):
                    continue
                if require_dv and r.dv <= 0:
                    raise ValueError(f"subject {sid}, time {r.time}: lognormal observations need DV > 0")
                cols.append(i)
                ids.append(all_obs[id(r)])
                subj.append(j)
                times.append(r.time)
                cmts.append(r.cmt)
                dvs.append(np.nan if r.dv is None else r.dv)
                pd.append(is_pd)
            weight = None
            for cov in self.covariates:
                try:
                    weight = sub.covariate(cov)
                except KeyError:
                    raise ValueError(f"subject {sid}: model {self.name} needs covariate {cov}") from None
            plan = build_plan(sub, self.n_cmt) if self.needs_plan else None
            subjects.append(SubjectData(sid, sub, plan, np.asarray(cols, dtype=int),
                                        slice(start, len(ids)), weight))
        return ModelData(sched, subjects, np.asarray(ids, dtype=int), np.asarray(subj, dtype=int),
                         np.asarray(times, dtype=float), np.asarray(cmts, dtype=int),
                         np.asarray(dvs, dtype=float), np.asarray(pd, dtype=bool))

    # parameter handling
    def param_names(self, data: ModelData) -> list[str]:
        return [n for b in self.blocks(data) for n in b.names()]

    def dim(self, data: ModelData) -> int:
        return sum(b.size for b in self.blocks(data))

    def transform(self, data: ModelData, zeta):
        """Constrained blocks and the log-Jacobian of ``zeta -> theta``."""
        theta: dict = {}
        logjac = 0.0
        off = 0
        for b in self.blocks(data):
            z = zeta[off] if not b.shape else zeta[off:off + b.size].reshape(b.shape)
            off += b.size
            if b.constraint.unbounded:
                theta[b.name] = z
                continue
            raw = ad.exp(z)
            theta[b.name] = b.constraint.bound(theta, raw) + raw
            logjac = logjac + ad.asum(z)
        return theta, logjac

    def constrain(self, data: ModelData, zeta) -> np.ndarray:
        theta, _ = self.transform(data, np.asarray(zeta, dtype=float))
        return self.flatten(data, theta)

    def unconstrain(self, data: ModelData, theta) -> np.ndarray:
        """Inverse transform; ``theta`` is a flat vector or a dict of blocks."""
        if not isinstance(theta, Mapping):
            theta = self.unflatten(data, theta)
        out, done = [], {}
        for b in self.blocks(data):
            x = np.asarray(theta[b.name], dtype=float).reshape(b.shape)
            if b.constraint.unbounded:
                done[b.name] = x
                out.append(x.ravel())
                continue
            lo = np.asarray(value(b.constraint.bound(done, x)), dtype=float)
            done[b.name] = x
            gap = x - lo
            if np.any(gap <= 0) or not np.all(np.isfinite(gap)):
                raise ConstraintViolation(
                    f"{b.name}={np.array2string(x, precision=6)} must exceed its lower bound "
                    f"{np.array2string(np.broadcast_to(lo, x.shape), precision=6)}")
            out.append(np.log(gap).ravel())
        return np.concatenate(out) if out else np.zeros(0)

    def flatten(self, data: ModelData, theta: Mapping) -> np.ndarray:
        return np.concatenate([np.ravel(np.asarray(value(theta[b.name]), dtype=float))
                               for b in self.blocks(data)])

    def unflatten(self, data: ModelData, vec) -> dict:
        vec = np.asarray(vec, dtype=float)
        out, off = {}, 0
        for b in self.blocks(data):
            x = vec[off:off + b.size]
            out[b.name] = float(x[0]) if not b.shape else x.reshape(b.shape)
            off += b.size
        if off != len(vec):
            raise ValueError(f"expected {off} parameter values, got {len(vec)}")
        return out

    # densities
    def pointwise_log_lik(self, data: ModelData, theta: dict):
        hat = self.predict(data, theta)
        if np.any(np.asarray(value(hat)) <= 0):
            return -np.inf * np.ones(data.n_obs)
        return ad.lognormal_lpdf(data.obs_dv, ad.log(hat), self.obs_sigma(data, theta))

    def log_joint(self, data: ModelData, zeta):
        """Unnormalized log posterior on the unconstrained scale.

        Solver failures return ``-inf`` so a sampler can reject the proposal.
        """
        try:
            theta, logjac = self.transform(data, zeta)
            lp = logjac + self.log_prior(data, theta)
            if not math.isfinite(float(value(lp))):
                return lp
            if data.n_obs:
                lp = lp + ad.asum(self.pointwise_log_lik(data, theta))
            return lp
        except (IntegrationError, ValueError, FloatingPointError, OverflowError, ZeroDivisionError):
            return -math.inf

    def log_joint_grad(self, data: ModelData, zeta, chunk_size: int | None = None):
        """``(log_joint, gradient)``, or ``(-inf, 0)`` when either is not finite."""
        zeta = np.asarray(zeta, dtype=float)
        try:
            return ad.gradient(lambda z: self.log_joint(data, z), zeta, chunk_size=chunk_size)
        except (ad.NonFiniteValue, ad.NonFiniteGradient):
            return -math.inf, np.zeros_like(zeta)

    # generated quantities
    def generated_quantities(self, data: ModelData, draw, rng: np.random.Generator) -> dict:
        """Posterior predictive replicates and pointwise log-likelihood for one draw.

        ``draw`` is a flat constrained vector or a dict of blocks.  Returns
        ``cObsPred`` (all used observations, PD ones included for the PK/PD
        model), ``log_lik`` and ``hat`` (the noiseless prediction).
        """
        theta = draw if isinstance(draw, Mapping) else self.unflatten(data, draw)
        hat = np.asarray(self.predict(data, theta), dtype=float)
        sig = np.asarray(value(self.obs_sigma(data, theta)), dtype=float)
        z = rng.standard_normal(data.n_obs)
        with np.errstate(divide="ignore", invalid="ignore"):
            rep = hat * np.exp(sig * z)
            ll = np.asarray(ad.lognormal_lpdf(data.obs_dv, np.log(hat), sig), dtype=float)
        return {"hat": hat, "cObsPred": rep, "log_lik": ll}

    def simulate(self, data: ModelData, theta, rng: np.random.Generator) -> np.ndarray:
        """Noisy observations at ``theta``.

        Constraint violations raise :class:`ConstraintViolation`, except that
        residual scales may be zero (noise-free simulation).
        """
        theta = dict(theta) if isinstance(theta, Mapping) else self.unflatten(data, theta)
        check = {k: (1.0 if k in self.noise_blocks and np.all(np.asarray(v) == 0) else v)
                 for k, v in theta.items()}
        self.unconstrain(data, check)
        return self.generated_quantities(data, theta, rng)["cObsPred"]

    # initialization
    def prior_draw(self, data: ModelData, rng: np.random.Generator, tries: int = 100) -> dict | None:
        for _ in range(tries):
            theta: dict = {}
            ok = True
            for b in self.blocks(data):
                x = self.sample_prior_block(b.name, b.shape or (), theta, data, rng)
                if x is None:
                    return None
                x = float(x) if not b.shape else np.asarray(x, dtype=float)
                if not b.constraint.unbounded:
                    lo = np.asarray(value(b.constraint.bound(theta, x)), dtype=float)
                    theta[b.name] = x
                    if np.any(np.asarray(x) <= lo):
                        ok = False
                        break
                theta[b.name] = x
            if ok:
                return theta
        return None

    def initial_point(self, data: ModelData, rng: np.random.Generator, strategy: str = "prior",
                      tries: int = 100) -> np.ndarray:
        """Unconstrained starting point with a finite log density and gradient.

        ``prior`` draws from the priors and falls back to uniform(-2, 2) on the
        unconstrained scale; ``uniform`` uses the latter directly.
        """
        n = self.dim(data)
        for _ in range(tries):
            z = None
            if strategy == "prior":
                theta = self.prior_draw(data, rng)
                if theta is not None:
                    try:
                        z = self.unconstrain(data, theta)
                    except ConstraintViolation:
                        z = None
            if z is None:
                z = rng.uniform(-2.0, 2.0, size=n)
            lp, g = self.log_joint_grad(data, z)
            if math.isfinite(lp) and np.all(np.isfinite(g)):
                return z
        raise RuntimeError(f"model {self.name}: no finite initial point after {tries} attempts")
