import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_ivp

from bayespk.designs import twocpt_design
from bayespk.events import EventRecord, expand_addl, parse_events
from bayespk.linpk import (DoseControls, OneCptParams, PKParams, ScheduleError, eigenvalues,
                           onecpt_advance, solve_linear, steady_state_amounts, twocpt_advance)

from conftest import expm_advance, onecpt_matrix, twocpt_matrix

pos = st.floats(0.05, 50.0)
rates = st.floats(0.05, 5.0)


def rel(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-12 * np.max(np.abs(b)) + 1e-300))


def test_dt_zero_identity(ref_params):
    u = np.array([3.0, 2.0, 1.0])
    assert np.array_equal(twocpt_advance(u, 0.0, PKParams(**ref_params)), u)
    assert np.array_equal(onecpt_advance(u[:2], 0.0, OneCptParams(10, 35, 2.5)), u[:2])


def test_pure_transfer_conserves():
    out = twocpt_advance([100.0, 0.0, 0.0], math.log(2), PKParams(0.0, 0.0, 35.0, 105.0, 1.0))
    np.testing.assert_allclose(out, [50.0, 50.0, 0.0], rtol=1e-13, atol=1e-12)


def test_ref_params_match_ode_oracle(ref_params):
    K = twocpt_matrix(**ref_params)
    ref = solve_ivp(lambda t, y: K @ y, (0, 1), [1200.0, 0, 0], method="DOP853",
                    rtol=1e-13, atol=1e-12).y[:, -1]
    got = twocpt_advance([1200.0, 0.0, 0.0], 1.0, PKParams(**ref_params))
    assert rel(got, ref) < 1e-8


def test_eigenvalue_identities(ref_params):
    p = PKParams(**ref_params)
    l1, l2 = p.eigenvalues
    assert l1 >= l2 > 0
    assert abs(l1 * l2 - p.k10 * p.k21) <= 1e-12 * p.k10 * p.k21
    assert abs(l1 + l2 - (p.k10 + p.k12 + p.k21)) <= 1e-12 * (l1 + l2)


def test_onecpt_degenerate_ka_equals_k10():
    p = OneCptParams(CL=35.0, VC=35.0, ka=1.0)
    got = onecpt_advance([100.0, 5.0], 2.0, p)
    ref = solve_ivp(lambda t, y: onecpt_matrix(35.0, 35.0, 1.0) @ y, (0, 2), [100.0, 5.0],
                    method="DOP853", rtol=1e-13, atol=1e-12).y[:, -1]
    assert rel(got, ref) < 1e-8
    # closed form of the confluent case: c = (c0 + ka g0 t) e^{-t}
    assert abs(got[1] - (5.0 + 200.0) * math.exp(-2.0)) < 1e-11


def test_onecpt_infusion_steady_level():
    out = onecpt_advance([0.0, 0.0], 500.0, OneCptParams(10.0, 35.0, 1.0), r=[0.0, 7.0])
    assert out[1] == pytest.approx(7.0 * 35.0 / 10.0, rel=1e-12)


@settings(max_examples=25)
@given(CL=pos, Q=pos, VC=pos, VP=pos, ka=rates, dt=st.floats(0.0, 48.0),
       u=st.lists(st.floats(0.0, 1000.0), min_size=3, max_size=3),
       r=st.lists(st.floats(0.0, 100.0), min_size=3, max_size=3))
def test_twocpt_advance_matches_matrix_exponential(CL, Q, VC, VP, ka, dt, u, r):
    p = PKParams(CL, Q, VC, VP, ka)
    got = twocpt_advance(u, dt, p, r)
    ref = expm_advance(twocpt_matrix(CL, Q, VC, VP, ka), u, dt, r)
    scale = max(1.0, np.max(np.abs(ref)))
    assert np.max(np.abs(got - ref)) <= 1e-9 * scale


@given(CL=pos, VC=pos, ka=rates, dt=st.floats(0.0, 48.0),
       u=st.lists(st.floats(0.0, 1000.0), min_size=2, max_size=2),
       r=st.lists(st.floats(0.0, 100.0), min_size=2, max_size=2))
def test_onecpt_advance_matches_matrix_exponential(CL, VC, ka, dt, u, r):
    got = onecpt_advance(u, dt, OneCptParams(CL, VC, ka), r)
    ref = expm_advance(onecpt_matrix(CL, VC, ka), u, dt, r)
    assert np.max(np.abs(got - ref)) <= 1e-9 * max(1.0, np.max(np.abs(ref)))


@given(ka=st.floats(0.2, 3.0), eps=st.sampled_from([0.0, 1e-14, 1e-10, 1e-7, 1e-4]))
def test_near_confluent_rates_are_smooth(ka, eps):
    # choose CL so that k10 = ka (1 + eps): onecpt limit branch
    VC = 20.0
    p = OneCptParams(ka * (1 + eps) * VC, VC, ka)
    got = onecpt_advance([50.0, 0.0], 3.0, p)
    ref = expm_advance(onecpt_matrix(p.CL, VC, ka), [50.0, 0.0], 3.0)
    assert np.max(np.abs(got - ref)) <= 1e-9 * 50.0


def _one_sub(rows):
    return parse_events([{**dict(ID=1, RATE=0, II=0, ADDL=0, SS=0, DV="."), **r} for r in rows])


def test_q12h_schedule_shape(ref_params):
    s = twocpt_design()
    m = solve_linear(s, PKParams(**ref_params))
    assert m.shape == (3, len(s))
    conc = m[1] / ref_params["VC"]
    assert np.all(conc >= 0) and conc.max() > 10


def test_no_doses_all_zero(ref_params):
    s = _one_sub([dict(TIME=t, AMT=0, EVID=0, CMT=2) for t in (0.5, 1, 2)])
    assert np.array_equal(solve_linear(s, PKParams(**ref_params)), np.zeros((3, 3)))


def test_bioavailability_equals_halved_amount(ref_params):
    p = PKParams(**ref_params)
    obs = [dict(TIME=t, AMT=0, EVID=0, CMT=2) for t in (1, 5, 13)]
    full = _one_sub([dict(TIME=0, AMT=600, EVID=1, CMT=1)] + obs)
    half = _one_sub([dict(TIME=0, AMT=1200, EVID=1, CMT=1)] + obs)
    a = solve_linear(full, p)
    b = solve_linear(half, p, DoseControls(F=(0.5, 1.0, 1.0)))
    np.testing.assert_allclose(a, b, rtol=1e-14, atol=1e-12)


def test_lag_time_shifts_profile(ref_params):
    p = PKParams(**ref_params)
    lagged = solve_linear(_one_sub([dict(TIME=0, AMT=100, EVID=1, CMT=1), dict(TIME=3.5, AMT=0, EVID=0, CMT=2)]),
                          p, DoseControls(tlag=(1.5, 0, 0)))
    plain = solve_linear(_one_sub([dict(TIME=0, AMT=100, EVID=1, CMT=1), dict(TIME=2.0, AMT=0, EVID=0, CMT=2)]), p)
    np.testing.assert_allclose(lagged[:, 1], plain[:, 1], rtol=1e-12)


def _event_oracle(schedule, K):
    """Independent event loop: expm between events, infusions as constant inputs."""
    recs = list(expand_addl(schedule).records)
    n = K.shape[0]
    infusions = []  # (start, end, cmt, rate)
    for r in recs:
        if r.evid == 1 and r.rate > 0:
            infusions.append((r.time, r.time + r.amt / r.rate, r.cmt - 1, r.rate))
    breaks = sorted({r.time for r in recs} | {e for _, e, _, _ in infusions})
    x = np.zeros(n)
    t = recs[0].time
    out = []
    pending = list(recs)
    while pending:
        nxt = pending[0].time
        cuts = [b for b in breaks if t < b <= nxt]
        for b in cuts:
            rate = np.zeros(n)
            for s, e, c, rt in infusions:
                if s <= t and b <= e:
                    rate[c] += rt
            x = expm_advance(K, x, b - t, rate)
            t = b
        r = pending.pop(0)
        if r.evid == 1 and r.rate == 0:
            x = x.copy()
            x[r.cmt - 1] += r.amt
        out.append(x.copy())
    return np.array(out).T


@st.composite
def regimens(draw, n_cmt=3):
    rows = []
    t = 0.0
    for _ in range(draw(st.integers(1, 4))):
        amt = draw(st.floats(10.0, 1000.0))
        if draw(st.booleans()):
            rows.append(dict(TIME=t, AMT=amt, EVID=1, CMT=draw(st.integers(1, 2))))
        else:
            dur = draw(st.floats(0.25, 4.0))
            rows.append(dict(TIME=t, AMT=amt, RATE=amt / dur, EVID=1, CMT=draw(st.integers(1, 2))))
            t += dur
        for _ in range(draw(st.integers(1, 3))):
            t += draw(st.floats(0.1, 6.0))
            rows.append(dict(TIME=round(t, 4), AMT=0, EVID=0, CMT=2))
        t = round(t + draw(st.floats(0.0, 4.0)), 4)
    return parse_events([dict(ID=1, II=0, ADDL=0, SS=0, DV=".", **{"RATE": 0, **r}) for r in rows])


@settings(max_examples=15)
@given(s=regimens(), CL=pos, Q=pos, VC=pos, VP=pos, ka=rates)
def test_solve_linear_matches_event_oracle(s, CL, Q, VC, VP, ka):
    got = solve_linear(s, PKParams(CL, Q, VC, VP, ka))
    ref = _event_oracle(s, twocpt_matrix(CL, Q, VC, VP, ka))
    assert np.max(np.abs(got - ref)) <= 1e-9 * max(1.0, np.max(np.abs(ref)))


@given(s=regimens(), Q=pos, VC=pos, VP=pos, ka=rates)
def test_mass_conserved_without_elimination(s, Q, VC, VP, ka):
    m = solve_linear(s, PKParams(0.0, Q, VC, VP, ka))
    dosed = sum(r.amt for r in s.records if r.evid == 1)
    total = m.sum(axis=0)
    # after every infusion has finished, the total equals the dosed amount
    recs = list(s.records)
    ends = [r.time + (r.amt / r.rate if r.rate > 0 else 0) for r in recs if r.evid == 1]
    last_dose = max(j for j, r in enumerate(recs) if r.evid == 1)
    for j, r in enumerate(recs):
        if j >= last_dose and r.time >= max(ends):
            assert abs(total[j] - dosed) <= 1e-10 * dosed
    assert np.all(m >= -1e-9 * dosed)


@given(CL=pos, Q=pos, VC=pos, VP=pos, ka=rates, a=st.floats(1.0, 500.0), b=st.floats(1.0, 500.0),
       t2=st.floats(0.5, 20.0))
def test_superposition(CL, Q, VC, VP, ka, a, b, t2):
    p = PKParams(CL, Q, VC, VP, ka)
    obs = [dict(TIME=t, AMT=0, EVID=0, CMT=2) for t in (0.25, 1.0, 25.0, 40.0)]
    d1 = dict(TIME=0, AMT=a, EVID=1, CMT=1)
    d2 = dict(TIME=t2, AMT=b, EVID=1, CMT=1)
    both = solve_linear(_one_sub([d1, d2] + obs), p)
    only1 = solve_linear(_one_sub([d1, dict(d2, AMT=0, EVID=0, CMT=2)] + obs), p)
    only2 = solve_linear(_one_sub([dict(d1, AMT=0, EVID=0, CMT=2), d2] + obs), p)
    scale = np.max(np.abs(both))
    assert np.max(np.abs(both - only1 - only2)) <= 1e-10 * scale


def _ss_row(**kw):
    base = dict(subject_id=1, time=0.0, amt=1200.0, rate=0.0, ii=12.0, evid=1, cmt=2, ss=1)
    base.update(kw)
    return EventRecord(**base)


def test_ss_onecpt_bolus_closed_form():
    # k10 = 0.1, bolus into central
    x = steady_state_amounts(_ss_row(), OneCptParams(CL=3.5, VC=35.0, ka=1.0))
    assert x[1] == pytest.approx(1200.0 / (1.0 - math.exp(-1.2)), rel=1e-12)


def test_ss_onecpt_bolus_long_run():
    p = OneCptParams(CL=3.5, VC=35.0, ka=1.0)
    x = np.zeros(2)
    for _ in range(200):
        x = onecpt_advance(x + [0.0, 1200.0], 12.0, p)
    assert steady_state_amounts(_ss_row(), p)[1] == pytest.approx(x[1] + 1200.0, rel=1e-10)


def test_ss_fast_elimination_no_carryover():
    x = steady_state_amounts(_ss_row(), OneCptParams(CL=35e3, VC=35.0, ka=1.0))
    assert x[1] == pytest.approx(1200.0, rel=1e-12)


@pytest.mark.parametrize("kw", [dict(cmt=1), dict(cmt=1, rate=600.0), dict(cmt=2, rate=200.0)])
def test_ss_twocpt_matches_cycle_iteration(ref_params, kw):
    p = PKParams(**ref_params)
    row = _ss_row(**kw)
    K = twocpt_matrix(**ref_params)
    x = np.zeros(3)
    r = np.zeros(3)
    c = row.cmt - 1
    for _ in range(300):
        if row.rate == 0:
            x = x.copy()
            x[c] += row.amt
            x = expm_advance(K, x, 12.0)
        else:
            dur = row.amt / row.rate
            r[c] = row.rate
            x = expm_advance(K, x, dur, r)
            x = expm_advance(K, x, 12.0 - dur)
    expect = x.copy()
    if row.rate == 0:
        expect[c] += row.amt
    assert rel(steady_state_amounts(row, p), expect) < 1e-8


def test_ss_overlapping_infusion_rejected(ref_params):
    with pytest.raises(ScheduleError):
        steady_state_amounts(_ss_row(rate=50.0), PKParams(**ref_params))


def test_ss_event_resets_state(ref_params):
    p = PKParams(**ref_params)
    s = _one_sub([dict(TIME=0, AMT=500, EVID=1, CMT=1), dict(TIME=5, AMT=1200, EVID=1, CMT=1, II=12, SS=1),
                  dict(TIME=17, AMT=0, EVID=0, CMT=2)])
    m = solve_linear(s, p)
    np.testing.assert_allclose(m[:, 1], steady_state_amounts(_ss_row(cmt=1), p), rtol=1e-12)


def test_eigenvalues_decoupled():
    l1, l2 = eigenvalues(0.3, 0.0, 0.0)
    assert (l1, l2) == (0.3, 0.0)


def _dd2_oracle(a, b, c, tau):
    """Hermite-Genocchi integral of tau^2 exp(tau x) over the simplex, 50 digits."""
    import mpmath
    with mpmath.workdps(50):
        a, b, c, t = (mpmath.mpf(float(v)) for v in (a, b, c, tau))
        g = lambda u, v: t * t * mpmath.exp(t * (a + u * (b - a) + v * (c - a)))
        return float(mpmath.quad(lambda u: mpmath.quad(lambda v: g(u, v), [0, 1 - u]), [0, 1]))


@pytest.mark.parametrize("log_span", [-7.0, -5.0, -3.5, -3.01, -2.99, -2.0])
def test_second_divided_difference_near_confluence(log_span):
    from bayespk.linpk import _dd2
    tau, m = 7.5, -0.8
    span = 10 ** log_span / tau
    a, b, c = m, m + 0.3 * span, m + span
    assert float(_dd2(a, b, c, tau)) == pytest.approx(_dd2_oracle(a, b, c, tau), rel=1e-10)
