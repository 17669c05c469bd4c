"""Clinical event schedules: parsing, validation and ADDL expansion.

Records follow the NMTRAN column conventions (ID, TIME, AMT, RATE, II, EVID,
CMT, ADDL, SS, DV).  Only observations (EVID=0) and doses (EVID=1) are
supported, and SS may only be 0 or 1.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping

__all__ = [
    "EventRecord", "EventSchedule", "EventValidationError", "parse_events",
    "read_events_csv", "write_events_csv", "expand_addl", "COLUMNS",
]

COLUMNS = ("ID", "TIME", "AMT", "RATE", "II", "EVID", "CMT", "ADDL", "SS", "DV")
_OPTIONAL_ZERO = ("AMT", "RATE", "II", "ADDL", "SS")
_IGNORED = {"MDV"}


class EventValidationError(ValueError):
    """A single input row violates the event-schedule rules.

    Attributes
    ----------
    row : int
        Zero-based index of the offending input row.
    code : str
        Short machine-readable reason, e.g. ``"negative_time"``.
    """

    def __init__(self, row: int, code: str, message: str):
        super().__init__(f"row {row}: {code}: {message}")
        self.row = row
        self.code = code


@dataclass(frozen=True)
class EventRecord:
    subject_id: int
    time: float
    amt: float = 0.0
    rate: float = 0.0
    ii: float = 0.0
    evid: int = 0
    cmt: int = 1
    addl: int = 0
    ss: int = 0
    dv: float | None = None
    origin_row: int = 0
    covariates: Mapping[str, float] = field(default_factory=dict, compare=False)

    @property
    def is_dose(self) -> bool:
        return self.evid == 1

    @property
    def is_obs(self) -> bool:
        return self.evid == 0


def _sort_key(r: EventRecord):
    return (r.subject_id, r.time, r.origin_row)


@dataclass(frozen=True)
class EventSchedule:
    """Time-ordered records, sorted by (subject, time, input row)."""

    records: tuple[EventRecord, ...]

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(sorted(self.records, key=_sort_key)))

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    @property
    def obs_index(self) -> list[int]:
        """Positions of the observation records."""
        return [i for i, r in enumerate(self.records) if r.evid == 0]

    @property
    def n_obs(self) -> int:
        return sum(1 for r in self.records if r.evid == 0)

    @property
    def times(self) -> list[float]:
        return [r.time for r in self.records]

    @property
    def subject_ids(self) -> list[int]:
        seen: dict[int, None] = {}
        for r in self.records:
            seen.setdefault(r.subject_id, None)
        return list(seen)

    def subjects(self) -> dict[int, "EventSchedule"]:
        """Split into single-subject schedules, keyed by subject id."""
        out: dict[int, list[EventRecord]] = {}
        for r in self.records:
            out.setdefault(r.subject_id, []).append(r)
        return {sid: EventSchedule(tuple(rs)) for sid, rs in out.items()}

    def covariate(self, name: str) -> float:
        """First value of a covariate column (e.g. WT) in this schedule."""
        for r in self.records:
            if name in r.covariates:
                return r.covariates[name]
        raise KeyError(f"covariate {name!r} not present")

    def max_cmt(self) -> int:
        return max((r.cmt for r in self.records), default=0)


def _num(raw, row: int, col: str, default=None) -> float | None:
    if raw is None or (isinstance(raw, str) and raw.strip() in ("", ".")):
        if default is None:
            return None
        return default
    try:
        v = float(raw)
    except (TypeError, ValueError):
        raise EventValidationError(row, "not_a_number", f"column {col}={raw!r} is not numeric") from None
    if math.isnan(v):
        return default
    return v


def _int(raw, row: int, col: str, default=None) -> int | None:
    v = _num(raw, row, col, default)
    if v is None:
        return None
    if v != int(v):
        raise EventValidationError(row, "not_an_integer", f"column {col}={raw!r} must be an integer")
    return int(v)


def _validate(r: EventRecord, row: int, n_cmt: int | None) -> None:
    if r.time < 0:
        raise EventValidationError(row, "negative_time", f"TIME={r.time}")
    if r.amt < 0:
        raise EventValidationError(row, "negative_amt", f"AMT={r.amt}")
    if r.rate < 0:
        raise EventValidationError(row, "negative_rate", f"RATE={r.rate}")
    if r.ii < 0:
        raise EventValidationError(row, "negative_ii", f"II={r.ii}")
    if r.addl < 0:
        raise EventValidationError(row, "negative_addl", f"ADDL={r.addl}")
    if r.evid not in (0, 1):
        raise EventValidationError(row, "unsupported_evid", f"EVID={r.evid}; only 0 and 1 are supported")
    if r.ss not in (0, 1):
        raise EventValidationError(row, "unsupported_ss", f"SS={r.ss}; only 0 and 1 are supported")
    if r.cmt < 1 or (n_cmt is not None and r.cmt > n_cmt):
        bound = "" if n_cmt is None else f" (model has {n_cmt})"
        raise EventValidationError(row, "cmt_out_of_range", f"CMT={r.cmt}{bound}")
    if r.evid == 0:
        if r.amt != 0 or r.addl != 0 or r.ss != 0:
            raise EventValidationError(row, "dose_fields_on_observation",
                                       "observation rows need AMT=0, ADDL=0, SS=0")
    else:
        if r.amt <= 0 and r.rate <= 0:
            raise EventValidationError(row, "empty_dose", "dose rows need AMT>0 or RATE>0")
        if r.rate > 0 and r.amt <= 0:
            raise EventValidationError(row, "empty_dose", "infusions need AMT>0")
    if r.addl > 0 and r.ii <= 0:
        raise EventValidationError(row, "addl_without_ii", f"ADDL={r.addl} needs II>0")
    if r.ss == 1 and r.ii <= 0:
        raise EventValidationError(row, "ss_without_ii", "SS=1 needs II>0")


def parse_events(rows: Iterable[Mapping], n_cmt: int | None = None) -> EventSchedule:
    """Validate tabular rows into an :class:`EventSchedule`.

    Column names are case-insensitive.  RATE, II, ADDL and SS default to 0
    when absent and DV accepts ``"."`` or blank as missing.  Columns outside
    the standard set (for instance WT) are kept as numeric covariates; an MDV
    column is ignored since observations are identified by EVID.

    Raises
    ------
    EventValidationError
        Naming the first offending row and the rule it breaks.
    """
    records = []
    for i, raw in enumerate(rows):
        row = {str(k).strip().upper(): v for k, v in raw.items() if k is not None}
        for col in ("ID", "TIME", "EVID", "CMT"):
            if col not in row:
                raise EventValidationError(i, "missing_column", f"column {col} is required")
        covs = {}
        for k, v in row.items():
            if k in COLUMNS or k in _IGNORED:
                continue
            cv = _num(v, i, k)
            if cv is not None:
                covs[k] = cv
        evid = _int(row["EVID"], i, "EVID")
        dv = _num(row.get("DV"), i, "DV")
        rec = EventRecord(
            subject_id=_int(row["ID"], i, "ID"),
            time=_num(row["TIME"], i, "TIME"),
            amt=_num(row.get("AMT"), i, "AMT", 0.0),
            rate=_num(row.get("RATE"), i, "RATE", 0.0),
            ii=_num(row.get("II"), i, "II", 0.0),
            evid=evid,
            cmt=_int(row["CMT"], i, "CMT"),
            addl=_int(row.get("ADDL"), i, "ADDL", 0),
            ss=_int(row.get("SS"), i, "SS", 0),
            dv=dv if evid == 0 else None,
            origin_row=i,
            covariates=covs,
        )
        if rec.time is None or rec.subject_id is None or rec.evid is None or rec.cmt is None:
            raise EventValidationError(i, "missing_value", "ID, TIME, EVID and CMT may not be blank")
        _validate(rec, i, n_cmt)
        records.append(rec)
    return EventSchedule(tuple(records))


def read_events_csv(path, n_cmt: int | None = None) -> EventSchedule:
    with open(path, newline="") as fh:
        return parse_events(csv.DictReader(fh), n_cmt=n_cmt)


def _fmt(v) -> str:
    if v is None:
        return "."
    if isinstance(v, float) and v.is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(v) if isinstance(v, float) else str(v)


def write_events_csv(schedule: EventSchedule, path) -> None:
    """Write a schedule back to NMTRAN-style CSV (covariates appended)."""
    cov_names: list[str] = []
    for r in schedule:
        for k in r.covariates:
            if k not in cov_names:
                cov_names.append(k)
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(COLUMNS) + cov_names)
        for r in schedule:
            w.writerow([r.subject_id, _fmt(float(r.time)), _fmt(float(r.amt)), _fmt(float(r.rate)),
                        _fmt(float(r.ii)), r.evid, r.cmt, r.addl, r.ss, _fmt(r.dv)]
                       + [_fmt(r.covariates.get(k)) for k in cov_names])


def expand_addl(schedule: EventSchedule) -> EventSchedule:
    """Replace every dose carrying ADDL=k by k+1 explicit doses.

    The copies sit at ``time + i*ii`` and keep the original ``origin_row``,
    so a copy landing on the same time as a later-listed observation is
    applied before that observation.  Only the first dose of an SS=1 record
    keeps the steady-state flag.
    """
    out = []
    for r in schedule:
        if r.evid != 1 or r.addl == 0:
            out.append(r)
            continue
        for i in range(r.addl + 1):
            out.append(replace(r, time=r.time + i * r.ii, addl=0, ss=r.ss if i == 0 else 0))
    return EventSchedule(tuple(out))
