"""Hierarchical two-compartment model with allometric weight scaling."""
from __future__ import annotations

import math

import numpy as np

from .. import autodiff as ad
from ..autodiff import value
from ..linpk import PKParams, run_linear_plan
from .base import (ConstraintSpec, ModelData, ModelDef, ParamBlock, allometric_scale,
                   half_normal_prior, ka_lower_bound, lognormal_prior)

__all__ = ["TwoCptPopModel", "lambda1"]

POP_NAMES = ("CL_pop", "Q_pop", "VC_pop", "VP_pop", "ka_pop")


def lambda1(k10, k12, k21):
    """Vectorised slow rate; the discriminant is written as a sum of squares."""
    disc = ad.square(k10 + k12 - k21) + 4.0 * k12 * k21
    return 0.5 * (k10 + k12 + k21 + ad.sqrt(disc))


def _scales(data: ModelData):
    w = np.array([sd.weight for sd in data.subjects], dtype=float)
    return allometric_scale(w, 0.75), allometric_scale(w, 1.0)


def _individual(theta, s075, s1):
    """Per-subject CL, Q, VC, VP, ka from normalized parameters ``theta[J, 5]``."""
    return (theta[:, 0] * s075, theta[:, 1] * s075, theta[:, 2] * s1, theta[:, 3] * s1, theta[:, 4])


def _ka_pop_bound(th, raw=None):
    return ka_lower_bound(th["CL_pop"], th["Q_pop"], th["VC_pop"], th["VP_pop"])


class TwoCptPopModel(ModelDef):
    """Population two-compartment model.

    Subject ``j`` has normalized parameters ``theta_j ~ LogNormal(log
    theta_pop, omega)`` (diagonal), scaled by ``(WT/70)^0.75`` for CL and Q
    and ``WT/70`` for VC and VP.  ``ka_pop`` and every subject's ``ka`` lie
    above the corresponding slow disposition rate.
    """

    name = "twocpt_pop"
    n_cmt = 3
    covariates = ("WT",)
    default_priors = {
        "CL_pop": (10.0, 0.25), "Q_pop": (15.0, 0.5), "VC_pop": (35.0, 0.25),
        "VP_pop": (105.0, 0.5), "ka_pop": (2.5, 1.0),
        "omega": (math.exp(0.25), 0.1), "sigma": (1.0,),
    }

    def blocks(self, data):
        s075, s1 = _scales(data)
        J = data.n_subjects
        zeros = np.zeros(J)

        def theta_bound(th, raw):
            CL, Q, VC, VP, _ = _individual(raw, s075, s1)
            lam = lambda1(CL / VC, Q / VC, Q / VP)
            return ad.stack([zeros, zeros, zeros, zeros, lam], axis=-1)

        pos = ConstraintSpec(0.0)
        return ([ParamBlock(n, (), pos) for n in POP_NAMES[:4]]
                + [ParamBlock("ka_pop", (), ConstraintSpec(_ka_pop_bound)),
                   ParamBlock("omega", (5,), pos), ParamBlock("sigma", (), pos),
                   ParamBlock("theta", (J, 5), ConstraintSpec(theta_bound))])

    def theta_pop(self, th):
        return ad.stack([th[n] for n in POP_NAMES])

    def log_prior(self, data, th):
        lp = 0.0
        for n in POP_NAMES:
            lp = lp + lognormal_prior(th[n], *self.priors[n])
        med, sd = self.priors["omega"]
        lp = lp + ad.asum(ad.lognormal_lpdf(th["omega"], math.log(med), sd))
        lp = lp + half_normal_prior(th["sigma"], *self.priors["sigma"])
        pop = self.theta_pop(th)
        return lp + ad.asum(ad.lognormal_lpdf(th["theta"], ad.log(pop), th["omega"]))

    def predict(self, data, th, theta=None):
        theta = th["theta"] if theta is None else theta
        s075, s1 = _scales(data)
        CL, Q, VC, VP, ka = _individual(theta, s075, s1)
        parts = []
        for j, sd in enumerate(data.subjects):
            if len(sd.cols) == 0:
                continue
            p = PKParams(CL[j], Q[j], VC[j], VP[j], ka[j])
            p.check()
            parts.append(run_linear_plan(sd.plan, p)[1, sd.cols] / VC[j])
        if not parts:
            return np.zeros(0)
        return parts[0] if len(parts) == 1 else ad.concatenate(parts)

    def sample_prior_block(self, name, shape, theta, data, rng):
        if name == "theta":
            pop = np.array([theta[n] for n in POP_NAMES])
            return np.exp(rng.normal(np.log(pop), theta["omega"], size=shape))
        return super().sample_prior_block(name, shape, theta, data, rng)

    def generated_quantities(self, data, draw, rng):
        """Adds ``cObsNewPred``: observations of new individuals with each subject's weight."""
        th = draw if isinstance(draw, dict) else self.unflatten(data, draw)
        out = super().generated_quantities(data, th, rng)
        pop = np.asarray(value(self.theta_pop(th)), dtype=float)
        omega = np.asarray(th["omega"], dtype=float)
        new = np.exp(rng.normal(np.log(pop), omega, size=(data.n_subjects, 5)))
        try:
            hat = np.asarray(self.predict(data, th, theta=new), dtype=float)
        except ValueError:
            hat = np.full(data.n_obs, np.nan)
        z = rng.standard_normal(data.n_obs)
        out["hatNew"] = hat
        out["cObsNewPred"] = hat * np.exp(float(th["sigma"]) * z)
        return out
