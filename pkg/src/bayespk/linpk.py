"""Closed-form one- and two-compartment first-order-absorption models.

The central/peripheral block of the two-compartment system is a 2x2 linear
ODE.  Its matrix functions are evaluated in Newton form,

    f(A) v = f(mu2) v + f[mu1, mu2] (A - mu2 I) v,

with divided differences of exponentials written so that coinciding rates
(ka equal to an eigenvalue, Q = CL = 0, ...) fall onto their confluent
limits instead of dividing by zero.  Every function is generic over floats,
ndarrays and :class:`~bayespk.autodiff.Dual`, and vectorised over leading
batch axes of the state and the time step.
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import value
from .events import EventRecord, EventSchedule

__all__ = [
    "PKParams", "OneCptParams", "DoseControls", "ScheduleError",
    "twocpt_advance", "onecpt_advance", "steady_state_amounts", "solve_linear",
    "build_plan", "eigenvalues",
]


class ScheduleError(ValueError):
    """The dosing pattern is valid data but cannot be solved (e.g. overlapping infusions)."""


@dataclass(frozen=True)
class PKParams:
    """Two-compartment parameters; fields may be floats or duals."""

    CL: object
    Q: object
    VC: object
    VP: object
    ka: object

    @property
    def k10(self):
        return self.CL / self.VC

    @property
    def k12(self):
        return self.Q / self.VC

    @property
    def k21(self):
        return self.Q / self.VP

    @property
    def eigenvalues(self):
        return eigenvalues(self.k10, self.k12, self.k21)

    def check(self):
        for name in ("CL", "Q", "VC", "VP", "ka"):
            v = float(value(getattr(self, name)))
            if not math.isfinite(v):
                raise ValueError(f"{name}={v} is not finite")
        if value(self.CL) < 0 or value(self.Q) < 0:
            raise ValueError("CL and Q must be non-negative")
        if value(self.VC) <= 0 or value(self.VP) <= 0 or value(self.ka) <= 0:
            raise ValueError("VC, VP and ka must be positive")


@dataclass(frozen=True)
class OneCptParams:
    CL: object
    VC: object
    ka: object

    @property
    def k10(self):
        return self.CL / self.VC

    def check(self):
        for name in ("CL", "VC", "ka"):
            v = float(value(getattr(self, name)))
            if not math.isfinite(v):
                raise ValueError(f"{name}={v} is not finite")
        if value(self.CL) < 0 or value(self.VC) <= 0 or value(self.ka) <= 0:
            raise ValueError("need CL >= 0, VC > 0, ka > 0")


@dataclass(frozen=True)
class DoseControls:
    """Per-compartment bioavailability and lag time (treated as data)."""

    F: tuple = ()
    tlag: tuple = ()

    @classmethod
    def default(cls, n_cmt: int) -> "DoseControls":
        return cls(F=(1.0,) * n_cmt, tlag=(0.0,) * n_cmt)

    def resolved(self, n_cmt: int) -> "DoseControls":
        F = tuple(self.F) if len(self.F) else (1.0,) * n_cmt
        tlag = tuple(self.tlag) if len(self.tlag) else (0.0,) * n_cmt
        if len(F) != n_cmt or len(tlag) != n_cmt:
            raise ValueError(f"F and tlag need {n_cmt} entries, got {len(F)} and {len(tlag)}")
        if any(not 0.0 <= f <= 1.0 for f in F):
            raise ValueError("bioavailability must lie in [0, 1]")
        if any(not (t >= 0.0 and math.isfinite(t)) for t in tlag):
            raise ValueError("lag times must be finite and non-negative")
        return DoseControls(F=tuple(float(f) for f in F), tlag=tuple(float(t) for t in tlag))


def eigenvalues(k10, k12, k21):
    """Rates lambda1 >= lambda2 >= 0 of the central/peripheral subsystem."""
    s = k10 + k12 + k21
    disc = s * s - 4.0 * k10 * k21
    disc = ad.fmax(disc, 0.0)
    if value(disc) > 0:
        lam1 = 0.5 * (s + ad.sqrt(disc))
    else:
        lam1 = 0.5 * s
    if value(lam1) > 0:
        lam2 = k10 * k21 / lam1  # product form avoids cancellation
    else:
        lam2 = 0.0 * s
    return lam1, lam2


# -- divided differences of t -> exp(x t) ---------------------------------------

def _dd1(a, b, tau):
    """``(exp(a tau) - exp(b tau)) / (a - b)``; equals ``tau exp(a tau)`` when a == b."""
    hi = ad.fmax(a, b)
    gap = abs(a - b)
    return ad.exp(hi * tau) * tau * ad.exprel(-gap * tau)


def _dd2(a, b, c, tau):
    """Second divided difference of ``x -> exp(x tau)`` over three nodes."""
    lo, mid, hi = sorted((a, b, c), key=lambda z: float(value(z)))
    span = float(value(hi)) - float(value(lo))
    centre = (lo + mid + hi) / 3.0
    # second-order expansion about the mean node; the next term is O((span tau)^3)
    spread = (ad.square(lo - centre) + ad.square(mid - centre) + ad.square(hi - centre)) * (tau * tau) / 24.0
    approx = 0.5 * tau * tau * ad.exp(centre * tau) * (1.0 + spread)
    if span == 0.0:
        return approx
    direct = (_dd1(hi, mid, tau) - _dd1(mid, lo, tau)) / (hi - lo)
    small = span * np.asarray(value(tau)) < 1e-3
    if np.any(small):
        return ad.where(small, approx, direct)
    return direct


def _check_advance(u, dt):
    dv = np.asarray(value(dt), dtype=float)
    if np.any(dv < 0) or not np.all(np.isfinite(dv)):
        raise ValueError("time step must be finite and non-negative")
    if not np.all(np.isfinite(value(u))):
        raise ValueError("non-finite compartment amounts")


def twocpt_advance(u, dt, p: PKParams, r=None):
    """Amounts after ``dt`` hours of the gut/central/peripheral system.

    Parameters
    ----------
    u : array_like or Dual, shape (..., 3)
        Amounts (mg) at the start of the interval.
    dt : float or array_like
        Interval length(s), broadcast against ``u[..., 0]``.
    p : PKParams
    r : array_like, shape (..., 3), optional
        Constant zero-order input rates (mg/h) over the interval.
    """
    if not ad.is_dual(u):
        u = np.asarray(u, dtype=float)
    _check_advance(u, dt)
    tau = dt
    k10, k12, k21 = p.k10, p.k12, p.k21
    lam1, lam2 = eigenvalues(k10, k12, k21)
    ka = p.ka
    m1, m2 = -lam1, -lam2
    g0, c0, q0 = u[..., 0], u[..., 1], u[..., 2]

    e2 = ad.exp(m2 * tau)
    e12 = _dd1(m1, m2, tau)
    eka = ad.exp(-ka * tau)
    h2 = _dd1(m2, -ka, tau)
    h12 = _dd2(m1, m2, -ka, tau)
    wex = ka * g0  # coefficient of exp(-ka s) in the input to the central compartment

    g = eka * g0
    if r is None:
        s_c = e2 * c0 + h2 * wex
        s_p = e2 * q0
        t_c = e12 * c0 + h12 * wex
        t_p = e12 * q0
    else:
        if not ad.is_dual(r):
            r = np.asarray(r, dtype=float)
        rg, rc, rp = r[..., 0], r[..., 1], r[..., 2]
        g2 = _dd1(m2, 0.0, tau)
        g12 = _dd2(m1, m2, 0.0, tau)
        wex = wex - rg
        wc = rg + rc
        g = g + _dd1(-ka, 0.0, tau) * rg
        s_c = e2 * c0 + g2 * wc + h2 * wex
        s_p = e2 * q0 + g2 * rp
        t_c = e12 * c0 + g12 * wc + h12 * wex
        t_p = e12 * q0 + g12 * rp
    # N = A + lambda2 I
    c = s_c + (lam2 - k10 - k12) * t_c + k21 * t_p
    q = s_p + k12 * t_c + (lam2 - k21) * t_p
    return ad.stack([g, c, q], axis=-1)


def onecpt_advance(u, dt, p: OneCptParams, r=None):
    """Amounts after ``dt`` hours of the gut/central system; see :func:`twocpt_advance`."""
    if not ad.is_dual(u):
        u = np.asarray(u, dtype=float)
    _check_advance(u, dt)
    tau = dt
    k, ka = p.k10, p.ka
    g0, c0 = u[..., 0], u[..., 1]
    g = ad.exp(-ka * tau) * g0
    wex = ka * g0
    c = ad.exp(-k * tau) * c0
    if r is not None:
        if not ad.is_dual(r):
            r = np.asarray(r, dtype=float)
        rg, rc = r[..., 0], r[..., 1]
        g = g + _dd1(-ka, 0.0, tau) * rg
        c = c + _dd1(-k, 0.0, tau) * (rg + rc)
        wex = wex - rg
    c = c + _dd1(-k, -ka, tau) * wex
    return ad.stack([g, c], axis=-1)


def _model_for(p):
    if isinstance(p, PKParams):
        return 3, twocpt_advance
    if isinstance(p, OneCptParams):
        return 2, onecpt_advance
    raise TypeError(f"unsupported parameter type {type(p).__name__}")


# -- event plan -------------------------------------------------------------------

@dataclass(frozen=True)
class SteadyStateDose:
    cmt: int          # zero-based
    amount: float     # bioavailable amount
    rate: float
    duration: float
    ii: float
    lag: float


@dataclass
class Plan:
    """Flat instruction list for one subject: advance / bolus / ss / record."""

    n_cmt: int
    steps: list = field(default_factory=list)
    n_events: int = 0

    @property
    def advances(self):
        return [s for s in self.steps if s[0] == "advance"]


def _check_ss(rec: EventRecord, amount: float, duration: float, lag: float) -> None:
    if rec.ii <= 0:
        raise ScheduleError("steady-state dose needs II > 0")
    if rec.rate > 0 and duration > rec.ii:
        raise ScheduleError(f"steady-state infusion lasts {duration:g} h, longer than II={rec.ii:g}")
    if lag + (duration if rec.rate > 0 else 0.0) > rec.ii or (rec.rate == 0 and lag >= rec.ii):
        raise ScheduleError("steady-state lag time must end the dose within one interval")


def build_plan(schedule: EventSchedule, n_cmt: int, dc: DoseControls | None = None) -> Plan:
    """Turn a single-subject, ADDL-expanded schedule into solver instructions.

    Steps are tuples:

    * ``("advance", t0, t1, rates)`` integrate with constant input ``rates``
    * ``("bolus", cmt, amount)`` add to a compartment
    * ``("ss", SteadyStateDose)`` reset to the periodic pre-dose state
    * ``("record", j)`` store the state as column ``j``
    """
    dc = (dc or DoseControls()).resolved(n_cmt)
    recs = list(schedule.records)
    if len({r.subject_id for r in recs}) > 1:
        raise ScheduleError("build_plan expects a single-subject schedule")
    plan = Plan(n_cmt=n_cmt, n_events=len(recs))
    if not recs:
        return plan
    for r in recs:
        if r.addl:
            raise ScheduleError("expand ADDL doses before solving")
        if r.cmt > n_cmt:
            raise ScheduleError(f"CMT={r.cmt} exceeds the model's {n_cmt} compartments")

    t = recs[0].time
    infusions: list[list] = []          # [end, cmt, rate]
    pending: list[tuple] = []           # heap of (time, seq, kind, cmt, amount, rate, duration)
    seq = 0

    def rates():
        rv = [0.0] * n_cmt
        for _, c, rt in infusions:
            rv[c] += rt
        return tuple(rv)

    def start_infusion(c, rate, duration, at):
        if infusions:
            raise ScheduleError(f"overlapping infusions at t={at:g} are not supported")
        infusions.append([at + duration, c, rate])

    def advance_to(target):
        nonlocal t
        while True:
            cands = [e for e, _, _ in infusions] + [p[0] for p in pending[:1]]
            nxt = min(cands) if cands else None
            if nxt is None or nxt > target:
                break
            if nxt > t:
                plan.steps.append(("advance", t, nxt, rates()))
                t = nxt
            # ends before starts so back-to-back infusions do not overlap
            infusions[:] = [inf for inf in infusions if inf[0] > nxt]
            while pending and pending[0][0] <= nxt:
                _, _, kind, c, amount, rate, duration = heapq.heappop(pending)
                if kind == "bolus":
                    plan.steps.append(("bolus", c, amount))
                else:
                    start_infusion(c, rate, duration, nxt)
        if target > t:
            plan.steps.append(("advance", t, target, rates()))
            t = target

    for j, rec in enumerate(recs):
        advance_to(rec.time)
        if rec.evid == 1:
            c = rec.cmt - 1
            lag = dc.tlag[c]
            amount = dc.F[c] * rec.amt
            duration = amount / rec.rate if rec.rate > 0 else 0.0
            if rec.ss == 1:
                _check_ss(rec, amount, duration, lag)
                infusions.clear()
                pending.clear()
                plan.steps.append(("ss", SteadyStateDose(c, amount, rec.rate, duration, rec.ii, lag)))
            if amount > 0:
                if lag > 0:
                    kind = "infusion" if rec.rate > 0 else "bolus"
                    heapq.heappush(pending, (rec.time + lag, seq, kind, c, amount, rec.rate, duration))
                    seq += 1
                elif rec.rate > 0:
                    start_infusion(c, rec.rate, duration, rec.time)
                else:
                    plan.steps.append(("bolus", c, amount))
        plan.steps.append(("record", j))
    return plan


# -- closed-form evaluation -------------------------------------------------------

def _transition(advance, n, tau, p):
    """State-transition matrix Phi(tau) with Phi[m, i] = d x_m(tau) / d x_i(0)."""
    rows = advance(np.eye(n), tau, p)     # rows[i] = Phi e_i
    return rows.T


def _periodic_state(advance, n, p, ssd: SteadyStateDose):
    """Pre-dose amounts at the dosing time under indefinitely repeated dosing."""
    zero = np.zeros(n)
    if ssd.rate > 0:
        r = np.zeros(n)
        r[ssd.cmt] = ssd.rate
        after_infusion = advance(zero, ssd.duration, p, r)
        q = advance(after_infusion, ssd.ii - ssd.lag - ssd.duration, p)
    else:
        bolus = np.zeros(n)
        bolus[ssd.cmt] = ssd.amount
        q = advance(bolus, ssd.ii - ssd.lag, p)
    phi = _transition(advance, n, ssd.ii, p)
    return ad.solve(np.eye(n) - phi, q)


def steady_state_amounts(row: EventRecord, p, dc: DoseControls | None = None):
    """Periodic amounts right after a steady-state dose is given.

    For a bolus without lag this is the post-dose peak state; for an infusion
    or a lagged dose it is the state at the dosing time, with the current
    dose still to enter.
    """
    n, advance = _model_for(p)
    p.check()
    if row.ss != 1:
        raise ValueError("row is not a steady-state dose")
    if row.ii <= 0:
        raise ScheduleError("steady-state dose needs II > 0")
    dc = (dc or DoseControls()).resolved(n)
    c = row.cmt - 1
    if not 0 <= c < n:
        raise ScheduleError(f"CMT={row.cmt} out of range for {n} compartments")
    amount = dc.F[c] * row.amt
    duration = amount / row.rate if row.rate > 0 else 0.0
    _check_ss(row, amount, duration, dc.tlag[c])
    ssd = SteadyStateDose(c, amount, row.rate, duration, row.ii, dc.tlag[c])
    x = _periodic_state(advance, n, p, ssd)
    if row.rate == 0 and ssd.lag == 0:
        e = np.zeros(n)
        e[c] = amount
        x = x + e
    return x


def solve_linear(schedule: EventSchedule, p, dc: DoseControls | None = None, model: str | None = None):
    """Compartment amounts at every event of a single-subject schedule.

    Returns an ``(n_cmt, n_events)`` array (or dual) whose column ``j`` holds
    the amounts at event ``j`` after any dose given at that event.
    """
    n, advance = _model_for(p)
    if model is not None and model != {3: "twocpt", 2: "onecpt"}[n]:
        raise ValueError(f"model {model!r} does not match {type(p).__name__}")
    p.check()
    plan = build_plan(schedule, n, dc)
    return run_linear_plan(plan, p, advance)


def run_linear_plan(plan: Plan, p, advance=None):
    n = plan.n_cmt
    if advance is None:
        advance = _model_for(p)[1]
    if plan.n_events == 0:
        return np.zeros((n, 0))
    adv = plan.advances
    phis, forced = [], None
    if adv:
        dts = np.array([s[2] - s[1] for s in adv])
        rts = np.array([s[3] for s in adv])
        has_input = bool(np.any(rts))
        # batch row i < n gives Phi e_i, row n gives the forced response from zero
        u = np.zeros((len(adv), n + 1, n))
        u[:, :n, :] = np.eye(n)
        if has_input:
            r = np.zeros((len(adv), n + 1, n))
            r[:, n, :] = rts
            out = advance(u, dts[:, None], p, r)
        else:
            out = advance(u[:, :n, :], dts[:, None], p)
        phis, forced = _split_transition(out, n, has_input)
    x = np.zeros(n)
    cols = [None] * plan.n_events
    ai = 0
    for step in plan.steps:
        kind = step[0]
        if kind == "advance":
            x = _apply(phis[ai], x)
            if forced is not None:
                x = x + forced[ai]
            ai += 1
        elif kind == "bolus":
            e = np.zeros(n)
            e[step[1]] = step[2]
            x = x + e
        elif kind == "ss":
            x = _periodic_state(advance, n, p, step[1])
        else:
            cols[step[1]] = x
    return ad.stack(cols, axis=1)


def _split_transition(out, n, has_input):
    """Split batched advance output into per-interval transposed Phi and forcing."""
    if ad.is_dual(out):
        val = out.val
        # keep Phi as rows (Phi^T) and contract on the first axis in _apply
        phis = [(val[i, :n, :], out.der[i, :n, :, :]) for i in range(val.shape[0])]
        forced = [ad.Dual(val[i, n, :], out.der[i, n, :, :]) for i in range(val.shape[0])] if has_input else None
        return phis, forced
    phis = [(out[i, :n, :], None) for i in range(out.shape[0])]
    forced = [out[i, n, :] for i in range(out.shape[0])] if has_input else None
    return phis, forced


def _apply(phi_rows, x):
    """``Phi @ x`` where ``phi_rows[i] = Phi e_i`` (i.e. Phi transposed)."""
    rv, rd = phi_rows
    if rd is None:
        if ad.is_dual(x):
            return ad.Dual(x.val @ rv, np.einsum("ik,im->mk", x.der, rv))
        return x @ rv
    if ad.is_dual(x):
        val = x.val @ rv
        der = np.einsum("i,imk->mk", x.val, rd) + np.einsum("ik,im->mk", x.der, rv)
        return ad.Dual(val, der)
    return ad.Dual(x @ rv, np.einsum("i,imk->mk", x, rd))
