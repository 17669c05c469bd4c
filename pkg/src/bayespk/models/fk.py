"""Two-compartment PK driving the Friberg-Karlsson neutropenia model.

PD states are stored as differences from the baseline ``circ0`` so the
untreated system sits at zero.  Drug effect is ``min(alpha * conc, 1)``,
and the circulating count is floored at machine epsilon inside the
feedback term.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..ivp import OdeControls, solve_coupled_twocpt, solve_numeric
from .base import (ConstraintSpec, ModelData, ModelDef, ParamBlock, half_normal_prior,
                   ka_lower_bound, lognormal_prior)

__all__ = ["FKParams", "FKModel", "fk_pd_rhs", "fk_full_rhs", "PD_CMT", "N_CMT"]

EPS = float(np.finfo(float).eps)
N_CMT = 8
PD_CMT = 8      # circulating neutrophils, 1-based


@dataclass(frozen=True)
class FKParams:
    MTT: float
    Circ0: float
    gamma: float
    alpha: float

    @property
    def ktr(self):
        return 4.0 / self.MTT

    @property
    def kprol(self):
        return self.ktr


def fk_pd_rhs(t, y, y_pk, theta):
    """PD derivatives; ``theta`` = (CL, Q, V1, V2, ka, mtt, circ0, gamma, alpha)."""
    V1, mtt, circ0, gamma, alpha = theta[2], theta[5], theta[6], theta[7], theta[8]
    ktr = 4.0 / mtt
    conc = y_pk[1] / V1
    edrug = ad.fmin(alpha * conc, 1.0)
    shifted = y + circ0
    prol, t1, t2, t3 = shifted[0], shifted[1], shifted[2], shifted[3]
    circ = ad.fmax(EPS, shifted[4])
    # power written as exp(gamma*log) so float and dual runs round identically
    feedback = ad.exp(gamma * ad.log(circ0 / circ))
    return ad.stack([
        ktr * prol * ((1.0 - edrug) * feedback - 1.0),
        ktr * (prol - t1),
        ktr * (t1 - t2),
        ktr * (t2 - t3),
        ktr * (t3 - circ),
    ])


def fk_full_rhs(t, y, theta):
    """All eight states: gut, central, peripheral, then the five PD states."""
    CL, Q, V1, V2, ka = theta[0], theta[1], theta[2], theta[3], theta[4]
    k10, k12, k21 = CL / V1, Q / V1, Q / V2
    gut, cent, peri = y[0], y[1], y[2]
    pk = ad.stack([
        -ka * gut,
        ka * gut - (k10 + k12) * cent + k21 * peri,
        k12 * cent - k21 * peri,
    ])
    return ad.concatenate([pk, fk_pd_rhs(t, y[3:], y[:3], theta)])


def _ka_bound(th, raw=None):
    return ka_lower_bound(th["CL"], th["Q"], th["V1"], th["V2"])


class FKModel(ModelDef):
    """PK/PD model for drug concentrations (CMT 2) and neutrophil counts (CMT 8).

    Parameters
    ----------
    priors : mapping, optional
        ``name -> (median, sd_log)`` for lognormal priors or ``(scale,)`` for
        the half-normal residual scales.
    solver : {"coupled", "numeric"}
        Closed-form PK inside the PD integration, or all eight states numerically.
    ctrl : OdeControls, optional
    """

    name = "fk"
    n_cmt = N_CMT
    pd_cmt = PD_CMT
    needs_plan = False
    default_priors = {
        "CL": (10.0, 0.25), "Q": (15.0, 0.5), "V1": (35.0, 0.25), "V2": (105.0, 0.5),
        "ka": (2.5, 1.0), "mtt": (125.0, 0.2), "circ0": (5.0, 0.2), "alpha": (3e-4, 1.0),
        "gamma": (0.17, 0.2), "sigma": (1.0,), "sigmaNeut": (1.0,),
    }
    _order = ("CL", "Q", "V1", "V2", "ka", "mtt", "circ0", "alpha", "gamma", "sigma", "sigmaNeut")

    def __init__(self, priors=None, solver: str = "coupled", ctrl: OdeControls | None = None):
        super().__init__(priors)
        if solver not in ("coupled", "numeric"):
            raise ValueError(f"solver must be 'coupled' or 'numeric', got {solver!r}")
        self.solver = solver
        self.ctrl = ctrl or OdeControls()

    def blocks(self, data):
        pos = ConstraintSpec(0.0)
        return [ParamBlock(n, (), ConstraintSpec(_ka_bound) if n == "ka" else pos) for n in self._order]

    def log_prior(self, data, th):
        lp = 0.0
        for n in self._order[:9]:
            lp = lp + lognormal_prior(th[n], *self.priors[n])
        return (lp + half_normal_prior(th["sigma"], *self.priors["sigma"])
                + half_normal_prior(th["sigmaNeut"], *self.priors["sigmaNeut"]))

    @staticmethod
    def ode_params(th):
        return (th["CL"], th["Q"], th["V1"], th["V2"], th["ka"], th["mtt"], th["circ0"],
                th["gamma"], th["alpha"])

    def solve(self, schedule, th):
        """All eight amounts (PD rows as differences from baseline) at each event."""
        par = self.ode_params(th)
        if self.solver == "coupled":
            return solve_coupled_twocpt(schedule, fk_pd_rhs, 5, par, ctrl=self.ctrl)
        return solve_numeric(schedule, fk_full_rhs, N_CMT, par, ctrl=self.ctrl)

    def predict(self, data, th):
        parts = []
        for sd in data.subjects:
            if len(sd.cols) == 0:
                continue
            x = self.solve(sd.schedule, th)
            pd = data.obs_pd[sd.obs]
            rows = np.where(pd, PD_CMT - 1, 1)
            raw = x[rows, sd.cols]
            parts.append(ad.where(pd, raw + th["circ0"], raw / th["V1"]))
        if not parts:
            return np.zeros(0)
        return parts[0] if len(parts) == 1 else ad.concatenate(parts)
