import pytest
from hypothesis import given, strategies as st

from bayespk.designs import multiple_dose_rows
from bayespk.events import (EventValidationError, expand_addl, parse_events, read_events_csv,
                            write_events_csv)


def row(**kw):
    base = dict(ID=1, TIME=0, AMT=0, RATE=0, II=0, EVID=0, CMT=2, ADDL=0, SS=0, DV=".")
    base.update(kw)
    return base


def test_bolus_with_addl_accepted():
    s = parse_events([row(AMT=1200, EVID=1, CMT=1, II=12, ADDL=13)])
    r = s.records[0]
    assert (r.amt, r.ii, r.addl, r.is_dose) == (1200, 12, 13, True)
    assert s.n_obs == 0


def test_single_observation_indexed():
    s = parse_events([row(TIME=0.083, DV="1.5")])
    assert s.obs_index == [0]
    assert s.records[0].dv == 1.5


@pytest.mark.parametrize("kw, code", [
    (dict(ADDL=3), "dose_fields_on_observation"),
    (dict(TIME=-1), "negative_time"),
    (dict(EVID=1, AMT=-5, CMT=1), "negative_amt"),
    (dict(EVID=1, AMT=5, RATE=-1, CMT=1), "negative_rate"),
    (dict(EVID=2), "unsupported_evid"),
    (dict(EVID=1, AMT=5, CMT=1, ADDL=2, II=0), "addl_without_ii"),
    (dict(CMT=9), "cmt_out_of_range"),
])
def test_validation_errors_are_distinct_and_row_identified(kw, code):
    rows = [row(TIME=0.5, DV="1"), row(**kw)]
    with pytest.raises(EventValidationError) as ei:
        parse_events(rows, n_cmt=3)
    assert ei.value.row == 1
    assert ei.value.code == code


def test_ss2_rejected():
    with pytest.raises(EventValidationError):
        parse_events([row(EVID=1, AMT=5, CMT=1, II=12, SS=2)])


def test_expand_q12h_regimen():
    s = expand_addl(parse_events([row(AMT=1200, EVID=1, CMT=1, II=12, ADDL=13)]))
    assert [r.time for r in s.records] == [12.0 * k for k in range(14)]
    assert all(r.addl == 0 and r.origin_row == 0 for r in s.records)


def test_expand_identity_without_addl():
    s = parse_events(multiple_dose_rows())
    assert expand_addl(s) == s


def test_expanded_dose_precedes_later_listed_observation():
    # sort keys: dose copy (1, 12, 0) < observation (1, 12, 1)
    s = expand_addl(parse_events([row(AMT=100, EVID=1, CMT=1, II=12, ADDL=1), row(TIME=12, DV="1")]))
    assert [(r.time, r.evid) for r in s.records] == [(0, 1), (12, 1), (12, 0)]


def test_observation_listed_before_same_time_dose_stays_first():
    s = parse_events([row(TIME=12, DV="1"), row(TIME=12, AMT=5, EVID=1, CMT=1)])
    assert [r.evid for r in s.records] == [0, 1]


def test_mdv_ignored_and_covariates_kept(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("ID,TIME,AMT,EVID,CMT,MDV,DV,WT\n1,0,100,1,1,1,.,72.5\n1,1,0,0,2,0,3.2,72.5\n")
    s = read_events_csv(p)
    assert s.covariate("WT") == 72.5
    assert s.obs_index == [1]


def test_csv_round_trip(tmp_path):
    s = parse_events(multiple_dose_rows())
    write_events_csv(s, tmp_path / "x.csv")
    assert read_events_csv(tmp_path / "x.csv") == s


@st.composite
def schedules(draw):
    rows = []
    for _ in range(draw(st.integers(1, 8))):
        sid = draw(st.integers(1, 3))
        t = draw(st.sampled_from([0.0, 1.0, 2.5, 12.0, 24.0]))
        if draw(st.booleans()):
            addl = draw(st.integers(0, 4))
            rows.append(row(ID=sid, TIME=t, AMT=100, EVID=1, CMT=1, ADDL=addl, II=12 if addl else 0))
        else:
            rows.append(row(ID=sid, TIME=t, DV="1"))
    return parse_events(rows)


@given(schedules())
def test_expand_idempotent(s):
    once = expand_addl(s)
    assert expand_addl(once) == once


@given(schedules())
def test_expand_count_law(s):
    assert len(expand_addl(s)) == len(s) + sum(r.addl for r in s.records if r.evid == 1)


@given(schedules())
def test_sorted_and_stable(s):
    keys = [(r.subject_id, r.time, r.origin_row) for r in expand_addl(s).records]
    assert keys == sorted(keys)
    assert len(s.obs_index) == s.n_obs
    assert all(s.records[i].evid == 0 for i in s.obs_index)
