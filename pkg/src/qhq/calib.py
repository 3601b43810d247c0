"""Calibration drift, refresh cadence, and metric history export.

Device metrics decay between calibrations as mean-reverting random walks
(exact Ornstein-Uhlenbeck discretization), so a model left alone slides
away from its nominal numbers and a refresh pulls the installed values
back to the drifted truth.

Cadence: every weekday gets a daily refresh (t1, readout fidelity, mix
chamber temperature); Mondays additionally get a weekly benchmarking run
(t2 plus one- and two-qubit gate fidelities). The two Monday runs are
separate events, so two weeks starting on a Monday move the model version
by exactly 10 + 2. Each refresh stamps the relevant timestamp: ``t2``
and the gate fidelities carry their own benchmark timestamp because they
go a week between measurements.

History rows export as CSV (timestamp,metric,target,value) and parse
back losslessly.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, replace
from datetime import datetime, timedelta, timezone

import numpy as np

from .errors import QhqError
from .hardware import (
    NOMINAL,
    CalibrationSet,
    HardwareModel,
    with_calibration,
)

__all__ = [
    "CalibError",
    "CalibrationSet",
    "CalRow",
    "CalendarPolicy",
    "DriftParams",
    "DRIFT_DEFAULTS",
    "drift_calibration",
    "run_calibration",
    "simulate_calendar",
    "export_csv",
    "parse_csv",
]


class CalibError(QhqError):
    pass


@dataclass(frozen=True)
class DriftParams:
    """Mean-reverting drift: after time dt, a metric x relaxes toward its
    mean a as x' = a + (x - a) d + s sqrt(1 - d^2) z with d = exp(-dt/tau)
    and z standard normal; s is the stationary standard deviation."""

    tau: float  # reversion time constant, seconds
    sigma: float  # stationary std deviation, metric units
    lo: float  # clamp floor
    hi: float  # clamp ceiling


_DAY = 86400.0

DRIFT_DEFAULTS: dict[str, DriftParams] = {
    "t1": DriftParams(tau=3 * _DAY, sigma=5e-6, lo=5e-6, hi=200e-6),
    "t2": DriftParams(tau=3 * _DAY, sigma=6e-6, lo=1e-6, hi=300e-6),
    "readout_fidelity": DriftParams(tau=7 * _DAY, sigma=0.01, lo=0.5, hi=0.9999),
    "single_qubit_fidelity": DriftParams(
        tau=7 * _DAY, sigma=5e-4, lo=0.9, hi=0.99999
    ),
    "two_qubit_fidelity": DriftParams(tau=7 * _DAY, sigma=5e-3, lo=0.8, hi=0.9999),
    "mix_chamber_temperature": DriftParams(
        tau=1 * _DAY, sigma=5e-4, lo=0.005, hi=0.050
    ),
}


def _ou_step(
    x: float,
    mean: float,
    dt: float,
    params: DriftParams,
    rng: np.random.Generator,
) -> float:
    if dt <= 0:
        return min(max(x, params.lo), params.hi)
    d = math.exp(-dt / params.tau)
    z = float(rng.standard_normal())
    out = mean + (x - mean) * d + params.sigma * math.sqrt(1.0 - d * d) * z
    return min(max(out, params.lo), params.hi)


def _drift_tuple(values, mean, dt, params, rng):
    return tuple(_ou_step(v, mean, dt, params, rng) for v in values)


def drift_calibration(
    cal: CalibrationSet,
    now: datetime,
    rng: np.random.Generator,
    drift: dict[str, DriftParams] | None = None,
) -> CalibrationSet:
    """The physical truth at ``now``: every metric drifted from the moment
    it was last measured. Daily metrics age from cal.timestamp, weekly
    benchmarked metrics from cal.t2_timestamp."""
    p = drift or DRIFT_DEFAULTS
    dt_daily = (now - cal.timestamp).total_seconds()
    dt_weekly = (now - cal.t2_timestamp).total_seconds()
    if dt_daily < 0 or dt_weekly < 0:
        raise CalibError(f"cannot drift backwards: {now.isoformat()} precedes "
                         f"the calibration timestamps")
    t1 = _drift_tuple(cal.t1, NOMINAL["t1"], dt_daily, p["t1"], rng)
    readout = _drift_tuple(
        cal.readout_fidelity,
        NOMINAL["readout_fidelity"],
        dt_daily,
        p["readout_fidelity"],
        rng,
    )
    temp = _ou_step(
        cal.mix_chamber_temperature,
        NOMINAL["mix_chamber_temperature"],
        dt_daily,
        p["mix_chamber_temperature"],
        rng,
    )
    t2 = _drift_tuple(cal.t2, NOMINAL["t2"], dt_weekly, p["t2"], rng)
    fid1 = _drift_tuple(
        cal.single_qubit_fidelity,
        NOMINAL["single_qubit_fidelity"],
        dt_weekly,
        p["single_qubit_fidelity"],
        rng,
    )
    fid2 = tuple(
        (a, b, _ou_step(v, NOMINAL["two_qubit_fidelity"], dt_weekly,
                        p["two_qubit_fidelity"], rng))
        for a, b, v in cal.two_qubit_fidelity
    )
    # Coherence constraint: echo time never exceeds twice the relaxation time.
    t2 = tuple(min(x2, 2.0 * x1) for x1, x2 in zip(t1, t2))
    return CalibrationSet(
        timestamp=now,
        t2_timestamp=now,
        t1=t1,
        t2=t2,
        readout_fidelity=readout,
        single_qubit_fidelity=fid1,
        two_qubit_fidelity=fid2,
        mix_chamber_temperature=temp,
    )


@dataclass(frozen=True)
class CalRow:
    timestamp: datetime
    metric: str
    target: str  # "q3", "q2-q5", or "device"
    value: float


SCOPES = ("daily", "weekly")


def run_calibration(
    model: HardwareModel,
    scope: str,
    now: datetime,
    rng: np.random.Generator,
    drift: dict[str, DriftParams] | None = None,
) -> tuple[HardwareModel, list[CalRow]]:
    """One calibration run: measure the drifted truth and install the
    metrics this scope covers. Returns the refreshed model (version + 1)
    and the measurement rows."""
    if scope not in SCOPES:
        raise CalibError(f"scope must be one of {SCOPES}, got {scope!r}")
    cal = model.calibration
    truth = drift_calibration(cal, now, rng, drift)
    rows: list[CalRow] = []
    if scope == "daily":
        new_cal = replace(
            cal,
            timestamp=now,
            t1=truth.t1,
            readout_fidelity=truth.readout_fidelity,
            mix_chamber_temperature=truth.mix_chamber_temperature,
            # keep t2 consistent with the fresh t1 measurements
            t2=tuple(min(x2, 2.0 * x1) for x1, x2 in zip(truth.t1, cal.t2)),
        )
        for q, v in enumerate(new_cal.t1):
            rows.append(CalRow(now, "t1", f"q{q}", v))
        for q, v in enumerate(new_cal.readout_fidelity):
            rows.append(CalRow(now, "readout_fidelity", f"q{q}", v))
        rows.append(
            CalRow(now, "mix_chamber_temperature", "device",
                   new_cal.mix_chamber_temperature)
        )
    else:
        new_cal = truth
        for q, v in enumerate(new_cal.t2):
            rows.append(CalRow(now, "t2", f"q{q}", v))
        for q, v in enumerate(new_cal.single_qubit_fidelity):
            rows.append(CalRow(now, "single_qubit_fidelity", f"q{q}", v))
        for a, b, v in new_cal.two_qubit_fidelity:
            rows.append(CalRow(now, "two_qubit_fidelity", f"q{a}-q{b}", v))
    return with_calibration(model, new_cal, bump_version=True), rows


@dataclass(frozen=True)
class CalendarPolicy:
    """When refreshes happen. Weekdays Mon-Fri get the daily scope at
    daily_hour UTC; weekly_weekday (Monday) additionally gets the weekly
    scope immediately after. The device is unavailable for
    calibration_duration seconds per run."""

    daily_hour: int = 6
    weekly_weekday: int = 0
    calibration_duration: float = 7200.0


@dataclass(frozen=True)
class CalendarRun:
    at: datetime
    scope: str
    model_version: int


@dataclass(frozen=True)
class CalendarResult:
    model: HardwareModel
    runs: tuple[CalendarRun, ...]
    rows: tuple[CalRow, ...]


def simulate_calendar(
    model: HardwareModel,
    start: datetime,
    days: int,
    seed: int = 0,
    policy: CalendarPolicy | None = None,
    drift: dict[str, DriftParams] | None = None,
    broker=None,
) -> CalendarResult:
    """Advance day by day from ``start``, running the scheduled refreshes.

    When a broker is supplied, each run closes its calibration window
    around the model swap, so queued jobs wait exactly as they would for
    the real thing (no wall-clock sleep; the window is bracketed by
    begin/end events).
    """
    policy = policy or CalendarPolicy()
    rng = np.random.default_rng(seed)
    rows: list[CalRow] = []
    runs: list[CalendarRun] = []
    day0 = start.date()
    for d in range(days):
        day = day0 + timedelta(days=d)
        if day.weekday() > 4:  # weekend
            continue
        at = datetime(
            day.year, day.month, day.day, policy.daily_hour, tzinfo=timezone.utc
        )
        scopes = ["daily"]
        if day.weekday() == policy.weekly_weekday:
            scopes.append("weekly")
        for scope in scopes:
            if broker is not None:
                broker.begin_calibration()
            try:
                model, new_rows = run_calibration(model, scope, at, rng, drift)
                if broker is not None:
                    broker.set_model(model)
            finally:
                if broker is not None:
                    broker.end_calibration()
            rows.extend(new_rows)
            runs.append(CalendarRun(at=at, scope=scope, model_version=model.version))
    return CalendarResult(model=model, runs=tuple(runs), rows=tuple(rows))


# ---------------------------------------------------------------------------
# CSV history

CSV_HEADER = ["timestamp", "metric", "target", "value"]


def export_csv(rows: list[CalRow] | tuple[CalRow, ...]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow([r.timestamp.isoformat(), r.metric, r.target, repr(r.value)])
    return buf.getvalue()


def parse_csv(text: str) -> list[CalRow]:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise CalibError("empty calibration history")
    if header != CSV_HEADER:
        raise CalibError(
            f"bad history header {header!r}, expected {CSV_HEADER!r}"
        )
    rows: list[CalRow] = []
    for i, rec in enumerate(reader, start=2):
        if not rec:
            continue
        if len(rec) != 4:
            raise CalibError(f"line {i}: expected 4 fields, got {len(rec)}")
        try:
            rows.append(
                CalRow(
                    timestamp=datetime.fromisoformat(rec[0]),
                    metric=rec[1],
                    target=rec[2],
                    value=float(rec[3]),
                )
            )
        except ValueError as exc:
            raise CalibError(f"line {i}: {exc}") from exc
    return rows


def filter_rows(
    rows: list[CalRow],
    start: datetime | None = None,
    end: datetime | None = None,
) -> list[CalRow]:
    out = []
    for r in rows:
        if start is not None and r.timestamp < start:
            continue
        if end is not None and r.timestamp > end:
            continue
        out.append(r)
    return out
