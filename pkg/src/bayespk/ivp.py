"""Adaptive Dormand-Prince 5(4) integration inside clinical event schedules.

Step sizes and accept/reject decisions are computed from value parts only,
so integrating with dual numbers takes exactly the same steps as the plain
float run and yields the derivative of that discrete solution.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import value
from .events import EventSchedule
from .linpk import DoseControls, PKParams, ScheduleError, SteadyStateDose, build_plan, twocpt_advance

__all__ = [
    "OdeControls", "IntegrationError", "MaxStepsExceeded", "StepSizeUnderflow",
    "NonFiniteRhs", "SteadyStateNotConverged", "rk45_integrate",
    "solve_numeric", "solve_coupled_twocpt",
]


@dataclass(frozen=True)
class OdeControls:
    rtol: float = 1e-6
    atol: float = 1e-6
    max_num_step: int = 100_000

    def __post_init__(self):
        if not (self.rtol > 0 and self.atol > 0 and self.max_num_step > 0):
            raise ValueError("rtol, atol and max_num_step must be strictly positive")


class IntegrationError(RuntimeError):
    def __init__(self, message: str, t: float, y):
        super().__init__(f"{message} at t={t:.6g}, y={np.array2string(np.asarray(value(y)), precision=4)}")
        self.t = t
        self.y = np.asarray(value(y), dtype=float)


class MaxStepsExceeded(IntegrationError):
    pass


class StepSizeUnderflow(IntegrationError):
    pass


class NonFiniteRhs(IntegrationError):
    pass


class SteadyStateNotConverged(IntegrationError):
    pass


# Dormand & Prince (1980) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = np.append(_A[6], 0.0) - _B4

_SAFETY, _FAC_MIN, _FAC_MAX = 0.9, 0.2, 5.0


def _rms(x) -> float:
    return float(np.sqrt(np.mean(np.square(x))))


class _Stages:
    """Stage derivatives stored as value and partial arrays."""

    def __init__(self, n: int, k: int | None):
        self.v = np.zeros((7, n))
        self.d = None if k is None else np.zeros((7, n, k))

    def put(self, i, kv):
        if ad.is_dual(kv):
            self.v[i] = kv.val
            self.d[i] = kv.der
        else:
            self.v[i] = kv
            if self.d is not None:
                self.d[i] = 0.0

    def combine(self, y, h, coef, upto):
        yv = value(y)
        val = yv + h * (coef @ self.v[:upto])
        if self.d is None:
            return val
        der = y.der + h * np.tensordot(coef, self.d[:upto], axes=1)
        return ad.Dual(val, der)


def _promote(y, k):
    if k is None or ad.is_dual(y):
        return y
    y = np.asarray(y, dtype=float)
    return ad.Dual(y, np.zeros(y.shape + (k,)))


def _dopri(f, t0: float, y0, t1: float, ctrl: OdeControls, drive=None, trace=None):
    """Integrate ``y' = f(t, y[, d])`` from ``t0`` to ``t1``.

    ``drive``, when given, maps an array of times to a batch of exogenous
    inputs; the ``i``-th row is passed as the third argument of ``f``.
    """
    if not ad.is_dual(y0):
        y0 = np.asarray(y0, dtype=float)
    if t1 == t0:
        return y0
    if t1 < t0:
        raise ValueError("integration must run forward in time")

    def call(t, y, d=None):
        return f(t, y) if drive is None else f(t, y, d)

    d0 = None if drive is None else drive(np.array([t0]))[0]
    k1 = call(t0, y0, d0)
    if not np.all(np.isfinite(value(k1))):
        raise NonFiniteRhs("non-finite right-hand side", t0, y0)
    kdir = k1.nderiv if ad.is_dual(k1) else (y0.nderiv if ad.is_dual(y0) else None)
    y = _promote(y0, kdir)
    k1 = _promote(k1, kdir)
    n = np.size(value(y))
    st = _Stages(n, kdir)
    span = t1 - t0

    # starting step (Hairer, Norsett & Wanner, II.4)
    yv, fv = np.asarray(value(y), dtype=float), np.asarray(value(k1), dtype=float)
    sc = ctrl.atol + ctrl.rtol * np.abs(yv)
    dn0, dn1 = _rms(yv / sc), _rms(fv / sc)
    h0 = 1e-6 if (dn0 < 1e-5 or dn1 < 1e-5) else 0.01 * dn0 / dn1
    h0 = min(h0, span)
    dprobe = None if drive is None else drive(np.array([t0 + h0]))[0]
    f1 = np.asarray(value(call(t0 + h0, yv + h0 * fv, dprobe)), dtype=float)
    dn2 = _rms((f1 - fv) / sc) / h0 if np.all(np.isfinite(f1)) else np.inf
    if max(dn1, dn2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(dn1, dn2)) ** 0.2
    h = min(100 * h0, h1, span)

    t = t0
    steps = 0
    rejected_here = False
    while t < t1:
        if steps >= ctrl.max_num_step:
            raise MaxStepsExceeded(f"more than {ctrl.max_num_step} steps", t, y)
        last = t + h >= t1 or (t1 - (t + h)) < 1e-12 * max(1.0, abs(t1))
        if last:
            h = t1 - t
        if h <= 16 * np.finfo(float).eps * max(1.0, abs(t)):
            raise StepSizeUnderflow("step size underflow", t, y)
        steps += 1
        dd = None if drive is None else drive(t + _C * h)
        st.put(0, k1)
        finite = True
        ynew = None
        for i in range(1, 7):
            yi = st.combine(y, h, _A[i], i)
            ki = call(t + _C[i] * h, yi, None if dd is None else dd[i])
            if not np.all(np.isfinite(value(ki))):
                finite = False
                break
            st.put(i, ki)
            if i == 6:
                ynew = yi
        if finite:
            err = h * (_E @ st.v)
            yv = np.asarray(value(y))
            ynv = np.asarray(value(ynew))
            errn = _rms(err / (ctrl.atol + ctrl.rtol * np.maximum(np.abs(yv), np.abs(ynv))))
        else:
            errn = np.inf
        if errn <= 1.0:
            t = t1 if last else t + h
            y = ynew
            k1 = _stage_out(st, 6)
            if trace is not None:
                trace.append((t, h))
            fac = _FAC_MAX if errn == 0.0 else min(_FAC_MAX, max(_FAC_MIN, _SAFETY * errn ** -0.2))
            if rejected_here:
                fac = min(1.0, fac)
            rejected_here = False
            h *= fac
        else:
            fac = _FAC_MIN if not math.isfinite(errn) else max(_FAC_MIN, _SAFETY * errn ** -0.2)
            h *= fac
            rejected_here = True
    return y


def _stage_out(st: _Stages, i: int):
    """Reconstruct stage derivative ``i`` (first-same-as-last reuse)."""
    if st.d is None:
        return st.v[i].copy()
    return ad.Dual(st.v[i].copy(), st.d[i].copy())


def rk45_integrate(rhs: Callable, t0: float, y0, t1: float, params, ctrl: OdeControls | None = None,
                   trace: list | None = None):
    """Solution at ``t1`` of ``y' = rhs(t, y, params)``, ``y(t0) = y0``.

    Raises
    ------
    MaxStepsExceeded, StepSizeUnderflow, NonFiniteRhs
    """
    ctrl = ctrl or OdeControls()
    t0, t1 = float(t0), float(t1)
    if not np.all(np.isfinite(value(y0))):
        raise NonFiniteRhs("non-finite initial state", t0, y0)
    return _dopri(lambda t, y: rhs(t, y, params), t0, y0, t1, ctrl, trace=trace)


# -- event-driven solvers -----------------------------------------------------------

def _unit(n, c, amount):
    e = np.zeros(n)
    e[c] = amount
    return e


def _converged(prev, new, atol) -> bool:
    pv, nv = np.asarray(value(prev), dtype=float), np.asarray(value(new), dtype=float)
    return bool(np.max(np.abs(nv - pv) / np.maximum(np.abs(nv), atol)) < 1e-8)


def _cycle_iterate(one_cycle, y, ctrl, t):
    for _ in range(1000):
        ynew = one_cycle(y)
        if _converged(y, ynew, ctrl.atol):
            return ynew
        y = ynew
    raise SteadyStateNotConverged("steady state not reached after 1000 dosing cycles", t, y)


def _cycle_segments(ssd: SteadyStateDose):
    """(t0, t1, infusing) pieces of one dosing interval, plus the dose time."""
    segs = []
    if ssd.rate > 0:
        segs = [(0.0, ssd.lag, False), (ssd.lag, ssd.lag + ssd.duration, True),
                (ssd.lag + ssd.duration, ssd.ii, False)]
    else:
        segs = [(0.0, ssd.lag, False), (ssd.lag, ssd.ii, False)]
    return [s for s in segs if s[1] > s[0]]


def solve_numeric(schedule: EventSchedule, rhs: Callable, n_cmt: int, params,
                  dc: DoseControls | None = None, ctrl: OdeControls | None = None):
    """Amounts at every event for a general ODE, ``(n_cmt, n_events)``.

    Doses follow the same rules as :func:`bayespk.linpk.solve_linear`;
    infusion rates enter as constant additions to ``rhs``.  Steady-state
    doses iterate whole dosing cycles until the state changes by less than
    1e-8 relative.
    """
    ctrl = ctrl or OdeControls()
    plan = build_plan(schedule, n_cmt, dc)
    if plan.n_events == 0:
        return np.zeros((n_cmt, 0))

    def advance(x, t0, t1, rates):
        if t1 <= t0:
            return x
        if any(rates):
            r = np.asarray(rates, dtype=float)
            return _dopri(lambda t, y: rhs(t, y, params) + r, t0, x, t1, ctrl)
        return _dopri(lambda t, y: rhs(t, y, params), t0, x, t1, ctrl)

    def periodic(ssd: SteadyStateDose, t_event):
        def one_cycle(y):
            for a, b, infusing in _cycle_segments(ssd):
                if a == ssd.lag and ssd.rate == 0:
                    y = y + _unit(n_cmt, ssd.cmt, ssd.amount)
                rates = _unit(n_cmt, ssd.cmt, ssd.rate) if infusing else np.zeros(n_cmt)
                y = advance(y, t_event + a, t_event + b, rates)
            return y
        return _cycle_iterate(one_cycle, np.zeros(n_cmt), ctrl, t_event)

    x = np.zeros(n_cmt)
    cols = [None] * plan.n_events
    t_now = schedule.records[0].time
    for step in plan.steps:
        kind = step[0]
        if kind == "advance":
            _, t0, t1, rates = step
            x = advance(x, t0, t1, rates)
            t_now = t1
        elif kind == "bolus":
            x = x + _unit(n_cmt, step[1], step[2])
        elif kind == "ss":
            x = periodic(step[1], t_now)
        else:
            cols[step[1]] = x
    return ad.stack(cols, axis=1)


def solve_coupled_twocpt(schedule: EventSchedule, pd_rhs: Callable, n_pd: int, params,
                         dc: DoseControls | None = None, ctrl: OdeControls | None = None):
    """Two-compartment PK in closed form driving a numerically solved PD system.

    ``pd_rhs(t, y_pd, y_pk, params)`` returns the PD derivatives; ``params[:5]``
    are CL, Q, V1, V2, ka.  The PK amounts at the Runge-Kutta stage times are
    evaluated analytically in one batch per step.  Returns a
    ``(3 + n_pd, n_events)`` matrix with the PK rows first.
    """
    ctrl = ctrl or OdeControls()
    n = 3 + n_pd
    p = PKParams(params[0], params[1], params[2], params[3], params[4])
    p.check()
    plan = build_plan(schedule, n, dc)
    if plan.n_events == 0:
        return np.zeros((n, 0))

    def advance(xpk, xpd, t0, t1, rates):
        if t1 <= t0:
            return xpk, xpd
        rpk = np.asarray(rates[:3], dtype=float)
        rpd = np.asarray(rates[3:], dtype=float)
        rpk_arg = rpk if rpk.any() else None

        def drive(ts):
            return twocpt_advance(xpk, np.asarray(ts) - t0, p, rpk_arg)

        if rpd.any():
            f = lambda t, y, ypk: pd_rhs(t, y, ypk, params) + rpd
        else:
            f = lambda t, y, ypk: pd_rhs(t, y, ypk, params)
        xpd = _dopri(f, t0, xpd, t1, ctrl, drive=drive)
        xpk = twocpt_advance(xpk, t1 - t0, p, rpk_arg)
        return xpk, xpd

    def add(xpk, xpd, c, amount):
        if c < 3:
            return xpk + _unit(3, c, amount), xpd
        return xpk, xpd + _unit(n_pd, c - 3, amount)

    def periodic(ssd: SteadyStateDose, t_event):
        def one_cycle(y):
            xpk, xpd = y
            for a, b, infusing in _cycle_segments(ssd):
                if a == ssd.lag and ssd.rate == 0:
                    xpk, xpd = add(xpk, xpd, ssd.cmt, ssd.amount)
                rates = _unit(n, ssd.cmt, ssd.rate) if infusing else np.zeros(n)
                xpk, xpd = advance(xpk, xpd, t_event + a, t_event + b, rates)
            return xpk, xpd

        y = (np.zeros(3), np.zeros(n_pd))
        for _ in range(1000):
            ynew = one_cycle(y)
            if _converged(ad.concatenate(y), ad.concatenate(ynew), ctrl.atol):
                return ynew
            y = ynew
        raise SteadyStateNotConverged("steady state not reached after 1000 dosing cycles",
                                      t_event, ad.concatenate(y))

    xpk, xpd = np.zeros(3), np.zeros(n_pd)
    cols = [None] * plan.n_events
    t_now = schedule.records[0].time
    for step in plan.steps:
        kind = step[0]
        if kind == "advance":
            _, t0, t1, rates = step
            xpk, xpd = advance(xpk, xpd, t0, t1, rates)
            t_now = t1
        elif kind == "bolus":
            xpk, xpd = add(xpk, xpd, step[1], step[2])
        elif kind == "ss":
            xpk, xpd = periodic(step[1], t_now)
        else:
            cols[step[1]] = ad.concatenate([xpk, xpd])
    return ad.stack(cols, axis=1)
