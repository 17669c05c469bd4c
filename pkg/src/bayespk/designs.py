"""Study designs used by the demos and tests."""
from __future__ import annotations

import numpy as np

from .events import EventSchedule, parse_events

SAMPLING_OFFSETS = (0.083, 0.167, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0)


def multiple_dose_rows(dose: float = 1200.0, ii: float = 12.0, n_doses: int = 14,
                       subject_id: int = 1, dose_cmt: int = 1, obs_cmt: int = 2,
                       covariates: dict | None = None) -> list[dict]:
    """Bolus q``ii`` regimen with rich sampling after the first, second and last dose.

    Each dose is its own row.  Observations are taken right before every
    dose (listed ahead of the dose so they read the trough), at
    :data:`SAMPLING_OFFSETS` after doses 1, 2 and ``n_doses``, and 12, 18 and
    24 h after the last dose.
    """
    covariates = covariates or {}
    rows = []
    last = (n_doses - 1) * ii

    def obs(t):
        rows.append(dict(ID=subject_id, TIME=round(t, 3), AMT=0, RATE=0, II=0, EVID=0,
                         CMT=obs_cmt, ADDL=0, SS=0, DV=".", **covariates))

    for k in range(n_doses):
        td = k * ii
        obs(td)
        rows.append(dict(ID=subject_id, TIME=td, AMT=dose, RATE=0, II=0, EVID=1,
                         CMT=dose_cmt, ADDL=0, SS=0, DV=".", **covariates))
        if k in (0, 1, n_doses - 1):
            for off in SAMPLING_OFFSETS:
                obs(td + off)
    for off in (12.0, 18.0, 24.0):
        obs(last + off)
    return rows


def twocpt_design(**kw) -> EventSchedule:
    """The 1200 mg q12h x 14 single-subject design."""
    return parse_events(multiple_dose_rows(**kw))


def population_rows(n_subjects: int, weights, **kw) -> list[dict]:
    rows = []
    for j in range(n_subjects):
        rows += multiple_dose_rows(subject_id=j + 1, covariates={"WT": float(weights[j])}, **kw)
    return rows


def fk_rows(dose: float = 80.0, ii: float = 12.0, n_doses: int = 14,
            pk_times=None, pd_times=None) -> list[dict]:
    """Single-subject PK/PD design: drug in CMT 2 samples, neutrophils in CMT 8."""
    if pk_times is None:
        pk_times = [0.083, 0.167, 0.25, 0.5, 0.75, 1, 1.5, 2, 3, 4, 6, 8, 12,
                    12.083, 12.5, 13, 14, 16, 20, 24, 156.083, 156.5, 157, 158, 160, 164, 168]
    if pd_times is None:
        pd_times = [0, 24, 48, 72, 96, 120, 144, 168, 192, 216, 240, 288, 336, 384, 432, 480, 528, 600, 672]
    rows = []
    for k in range(n_doses):
        rows.append(dict(ID=1, TIME=k * ii, AMT=dose, RATE=0, II=0, EVID=1, CMT=1,
                         ADDL=0, SS=0, DV="."))
    for t in pk_times:
        rows.append(dict(ID=1, TIME=float(t), AMT=0, RATE=0, II=0, EVID=0, CMT=2, ADDL=0, SS=0, DV="."))
    for t in pd_times:
        rows.append(dict(ID=1, TIME=float(t), AMT=0, RATE=0, II=0, EVID=0, CMT=8, ADDL=0, SS=0, DV="."))
    # list observations first at tied times so they read pre-dose state
    rows.sort(key=lambda r: (r["TIME"], r["EVID"]))
    return rows


def random_weights(n: int, rng: np.random.Generator) -> np.ndarray:
    return np.round(rng.normal(70.0, 15.0, size=n).clip(40.0, 120.0), 1)
