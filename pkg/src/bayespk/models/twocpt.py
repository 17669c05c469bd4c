"""Single-subject two- and one-compartment models with lognormal residuals."""
from __future__ import annotations

import numpy as np

from .. import autodiff as ad
from ..linpk import OneCptParams, PKParams, run_linear_plan
from .base import (ConstraintSpec, ModelData, ModelDef, ParamBlock, half_normal_prior,
                   lognormal_prior)

__all__ = ["TwoCptModel", "OneCptModel"]

_POS = ConstraintSpec(0.0)


def _central_conc(data: ModelData, p, VC):
    """Concentrations at the used observations, subject by subject."""
    parts = []
    for sd in data.subjects:
        if len(sd.cols) == 0:
            continue
        mass = run_linear_plan(sd.plan, p)
        parts.append(mass[1, sd.cols] / VC)
    if not parts:
        return np.zeros(0)
    return parts[0] if len(parts) == 1 else ad.concatenate(parts)


class TwoCptModel(ModelDef):
    """Two-compartment model with first-order absorption.

    Priors are lognormal with (median, sd of log) and a half-normal(0, 1)
    residual scale; ``ka`` is only required to be positive.
    """

    name = "twocpt"
    n_cmt = 3
    default_priors = {
        "CL": (10.0, 0.25), "Q": (15.0, 0.5), "VC": (35.0, 0.25), "VP": (105.0, 0.5),
        "ka": (2.5, 1.0), "sigma": (1.0,),
    }

    def blocks(self, data):
        return [ParamBlock(n, (), _POS) for n in ("CL", "Q", "VC", "VP", "ka", "sigma")]

    def log_prior(self, data, th):
        lp = 0.0
        for n in ("CL", "Q", "VC", "VP", "ka"):
            lp = lp + lognormal_prior(th[n], *self.priors[n])
        return lp + half_normal_prior(th["sigma"], *self.priors["sigma"])

    def predict(self, data, th):
        p = PKParams(th["CL"], th["Q"], th["VC"], th["VP"], th["ka"])
        p.check()
        return _central_conc(data, p, th["VC"])


def _onecpt_ka_bound(th, raw=None):
    return th["CL"] / th["VC"]


class OneCptModel(ModelDef):
    """One-compartment model with first-order absorption.

    ``ka`` is bounded below by the elimination rate CL/VC, the
    one-compartment analogue of the flip-flop constraint.
    """

    name = "onecpt"
    n_cmt = 2
    default_priors = {"CL": (10.0, 0.5), "VC": (35.0, 1.0), "ka": (2.5, 1.0), "sigma": (1.0,)}

    def blocks(self, data):
        return [ParamBlock("CL", (), _POS), ParamBlock("VC", (), _POS),
                ParamBlock("ka", (), ConstraintSpec(_onecpt_ka_bound)), ParamBlock("sigma", (), _POS)]

    def log_prior(self, data, th):
        lp = 0.0
        for n in ("CL", "VC", "ka"):
            lp = lp + lognormal_prior(th[n], *self.priors[n])
        return lp + half_normal_prior(th["sigma"], *self.priors["sigma"])

    def predict(self, data, th):
        p = OneCptParams(th["CL"], th["VC"], th["ka"])
        p.check()
        return _central_conc(data, p, th["VC"])

