"""Admission records, CSV ingestion/export, inclusion filters and splitting."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError
from .schema import ALL_SIGNALS, DRUG_NAMES, SCHEMA_VERSION

log = logging.getLogger(__name__)

END_REASONS = ("extubated", "sbt_failed", "censored_at_discharge")
ROUTES = ("continuous_rate", "bolus")
MIN_VENT_MINUTES = 24 * 60


@dataclass(frozen=True)
class VitalsSample:
    signal_id: str
    time: float
    value: float


@dataclass(frozen=True)
class VentilationInterval:
    start_min: float
    end_min: float
    end_reason: str = "extubated"

    @property
    def duration(self) -> float:
        return self.end_min - self.start_min


@dataclass(frozen=True)
class SedationEvent:
    """A continuous infusion (``dose`` is a rate in drug units per hour, active on
    ``[start_min, end_min)``) or a bolus (``dose`` in drug units at ``start_min``)."""

    drug_id: str
    dose: float
    route: str
    start_min: float
    end_min: float | None = None


@dataclass(frozen=True)
class PatientEpisode:
    admission_id: str
    age: float
    weight: float
    gender_flag: int
    emergency_flag: int
    white_flag: int
    samples: tuple = ()
    vent_intervals: tuple = ()
    sedation_events: tuple = ()
    discharged_alive: bool = True
    discharge_min: float = 0.0

    @property
    def ventilated_minutes(self) -> float:
        return sum(iv.duration for iv in self.vent_intervals)

    def observations(self, signal_id):
        """Time-sorted ``(times, values)`` arrays for one signal."""
        pts = [(s.time, s.value) for s in self.samples if s.signal_id == signal_id]
        if not pts:
            return np.empty(0), np.empty(0)
        arr = np.array(sorted(pts))
        return arr[:, 0], arr[:, 1]


def validate_episode(ep: PatientEpisode) -> PatientEpisode:
    """Raise :class:`ValidationError` if ``ep`` breaks any record invariant."""
    aid = ep.admission_id
    if not (ep.weight > 0 and math.isfinite(ep.weight)):
        raise ValidationError(f"admission {aid}: weight must be positive")
    if not (ep.age >= 0 and math.isfinite(ep.age)):
        raise ValidationError(f"admission {aid}: age must be non-negative")
    for name in ("gender_flag", "emergency_flag", "white_flag"):
        if getattr(ep, name) not in (0, 1):
            raise ValidationError(f"admission {aid}: {name} must be 0 or 1")
    if not (ep.discharge_min > 0 and math.isfinite(ep.discharge_min)):
        raise ValidationError(f"admission {aid}: discharge_min must be positive")
    if not ep.vent_intervals:
        raise ValidationError(f"admission {aid}: no ventilation interval")
    prev_end = -math.inf
    for iv in ep.vent_intervals:
        if iv.end_reason not in END_REASONS:
            raise ValidationError(f"admission {aid}: unknown end_reason {iv.end_reason!r}")
        if not (0 <= iv.start_min < iv.end_min):
            raise ValidationError(f"admission {aid}: interval {iv} not ordered")
        if iv.start_min < prev_end:
            raise ValidationError(f"admission {aid}: ventilation intervals overlap or are unordered")
        if iv.end_min > ep.discharge_min:
            raise ValidationError(f"admission {aid}: interval ends after discharge")
        prev_end = iv.end_min
    for s in ep.samples:
        if s.signal_id not in ALL_SIGNALS:
            raise ValidationError(f"admission {aid}: unknown signal {s.signal_id!r}")
        if not (0 <= s.time <= ep.discharge_min):
            raise ValidationError(f"admission {aid}: sample time {s.time} outside admission")
        if not math.isfinite(s.value):
            raise ValidationError(f"admission {aid}: non-finite value for {s.signal_id}")
    for ev in ep.sedation_events:
        if ev.drug_id not in DRUG_NAMES:
            raise ValidationError(f"admission {aid}: unknown drug {ev.drug_id!r}")
        if ev.route not in ROUTES:
            raise ValidationError(f"admission {aid}: unknown route {ev.route!r}")
        if not (ev.dose >= 0 and math.isfinite(ev.dose)):
            raise ValidationError(f"admission {aid}: negative dose")
        if not (0 <= ev.start_min <= ep.discharge_min):
            raise ValidationError(f"admission {aid}: sedation start outside admission")
        if ev.route == "continuous_rate":
            if ev.end_min is None or not (ev.start_min < ev.end_min <= ep.discharge_min):
                raise ValidationError(f"admission {aid}: continuous infusion needs start < end <= discharge")
    return ep


def filter_admissions(episodes, min_vent_minutes=MIN_VENT_MINUTES):
    """Keep admissions ventilated for more than 24 h in total that ended in a live discharge."""
    kept = [ep for ep in episodes if ep.ventilated_minutes > min_vent_minutes and ep.discharged_alive]
    log.info("filter_admissions: kept %d of %d", len(kept), len(episodes))
    return kept


def split_train_test(episodes, test_fraction=0.25, seed=0):
    """Partition admissions into (train, test); the input order is kept within each part."""
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie in (0, 1)")
    n = len(episodes)
    if n < 2:
        raise ValueError("need at least two admissions to split")
    n_test = min(max(int(round(n * test_fraction)), 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    test_idx = set(perm[:n_test].tolist())
    train = [ep for i, ep in enumerate(episodes) if i not in test_idx]
    test = [ep for i, ep in enumerate(episodes) if i in test_idx]
    return train, test


# --------------------------------------------------------------------------- CSV

EPISODE_COLUMNS = ("admission_id", "age", "weight", "gender", "emergency", "white",
                   "discharged_alive", "discharge_min")
SAMPLE_COLUMNS = ("admission_id", "signal_id", "time_min", "value")
EVENT_COLUMNS = ("admission_id", "kind", "drug_id", "dose", "route", "start_min",
                 "end_min", "end_reason")


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _write_csv(path, columns, rows, header_lines=()):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def export_episodes(episodes, directory, header_lines=()):
    """Write ``episodes.csv``, ``samples.csv`` and ``events.csv`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    header = (f"schema_version={SCHEMA_VERSION}",) + tuple(header_lines)
    _write_csv(directory / "episodes.csv", EPISODE_COLUMNS, (
        (ep.admission_id, float(ep.age), float(ep.weight), ep.gender_flag, ep.emergency_flag,
         ep.white_flag, int(ep.discharged_alive), float(ep.discharge_min))
        for ep in episodes), header)
    _write_csv(directory / "samples.csv", SAMPLE_COLUMNS, (
        (ep.admission_id, s.signal_id, float(s.time), float(s.value))
        for ep in episodes for s in ep.samples), header)

    def events():
        for ep in episodes:
            for iv in ep.vent_intervals:
                yield (ep.admission_id, "vent", None, None, None, float(iv.start_min),
                       float(iv.end_min), iv.end_reason)
            for ev in ep.sedation_events:
                end = None if ev.end_min is None else float(ev.end_min)
                yield (ep.admission_id, "sedation", ev.drug_id, float(ev.dose), ev.route,
                       float(ev.start_min), end, None)

    _write_csv(directory / "events.csv", EVENT_COLUMNS, events(), header)


class _Reader:
    """Iterate CSV rows as dicts, tracking physical line numbers for error messages."""

    def __init__(self, path, columns, schema_version):
        self.path = Path(path)
        self.columns = columns
        self.schema_version = schema_version

    def __iter__(self):
        with open(self.path, newline="", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        body = []
        for lineno, line in enumerate(lines, start=1):
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                if key == "schema_version" and self.schema_version is not None:
                    if int(value) != int(self.schema_version):
                        raise ParseError(self.path, lineno, "schema_version",
                                         f"file has version {value}, expected {self.schema_version}")
                continue
            if line.strip():
                body.append((lineno, line))
        if not body:
            return
        header_line, header = body[0][0], next(csv.reader([body[0][1]]))
        missing = [c for c in self.columns if c not in header]
        if missing:
            raise ParseError(self.path, header_line, missing[0], "missing column")
        for lineno, line in body[1:]:
            values = next(csv.reader([line]))
            if len(values) != len(header):
                raise ParseError(self.path, lineno, "*", f"expected {len(header)} fields, got {len(values)}")
            yield lineno, dict(zip(header, values))

    def number(self, lineno, row, name, optional=False):
        raw = row[name].strip()
        if raw == "":
            if optional:
                return None
            raise ParseError(self.path, lineno, name, "missing value")
        try:
            x = float(raw)
        except ValueError:
            raise ParseError(self.path, lineno, name, f"not a number: {raw!r}") from None
        if not math.isfinite(x):
            raise ParseError(self.path, lineno, name, "non-finite value")
        return x

    def flag(self, lineno, row, name):
        x = self.number(lineno, row, name)
        if x not in (0.0, 1.0):
            raise ParseError(self.path, lineno, name, "expected 0 or 1")
        return int(x)

    def choice(self, lineno, row, name, allowed):
        raw = row[name].strip()
        if raw not in allowed:
            raise ParseError(self.path, lineno, name, f"{raw!r} not in {sorted(allowed)}")
        return raw


def ingest_episodes(path, schema_version=SCHEMA_VERSION):
    """Read a cohort from the three-file CSV layout in directory ``path``.

    Raises :class:`ParseError` for malformed rows and :class:`ValidationError`
    when a parsed row or admission breaks an invariant (the row is named).
    """
    path = Path(path)
    rd = _Reader(path / "episodes.csv", EPISODE_COLUMNS, schema_version)
    heads = {}
    for ln, row in rd:
        aid = row["admission_id"].strip()
        if not aid:
            raise ParseError(rd.path, ln, "admission_id", "missing value")
        if aid in heads:
            raise ValidationError(f"{rd.path}:{ln}: duplicate admission_id {aid!r}")
        heads[aid] = dict(
            admission_id=aid,
            age=rd.number(ln, row, "age"),
            weight=rd.number(ln, row, "weight"),
            gender_flag=rd.flag(ln, row, "gender"),
            emergency_flag=rd.flag(ln, row, "emergency"),
            white_flag=rd.flag(ln, row, "white"),
            discharged_alive=bool(rd.flag(ln, row, "discharged_alive")),
            discharge_min=rd.number(ln, row, "discharge_min"),
            samples=[], vent_intervals=[], sedation_events=[],
        )
    if not heads:
        return []

    def owner(reader, ln, row):
        aid = row["admission_id"].strip()
        if aid not in heads:
            raise ValidationError(f"{reader.path}:{ln}: unknown admission_id {aid!r}")
        return heads[aid]

    rd = _Reader(path / "samples.csv", SAMPLE_COLUMNS, schema_version)
    for ln, row in rd:
        h = owner(rd, ln, row)
        sig = rd.choice(ln, row, "signal_id", ALL_SIGNALS)
        t = rd.number(ln, row, "time_min")
        if t < 0:
            raise ValidationError(f"{rd.path}:{ln}: negative sample time {t}")
        h["samples"].append(VitalsSample(sig, t, rd.number(ln, row, "value")))

    rd = _Reader(path / "events.csv", EVENT_COLUMNS, schema_version)
    for ln, row in rd:
        h = owner(rd, ln, row)
        kind = rd.choice(ln, row, "kind", ("vent", "sedation"))
        start = rd.number(ln, row, "start_min")
        end = rd.number(ln, row, "end_min", optional=True)
        if start < 0:
            raise ValidationError(f"{rd.path}:{ln}: negative start_min {start}")
        if kind == "vent":
            if end is None:
                raise ParseError(rd.path, ln, "end_min", "ventilation rows need end_min")
            if not start < end:
                raise ValidationError(f"{rd.path}:{ln}: ventilation start_min >= end_min")
            reason = rd.choice(ln, row, "end_reason", END_REASONS)
            h["vent_intervals"].append(VentilationInterval(start, end, reason))
        else:
            drug = rd.choice(ln, row, "drug_id", DRUG_NAMES)
            route = rd.choice(ln, row, "route", ROUTES)
            dose = rd.number(ln, row, "dose")
            if dose < 0:
                raise ValidationError(f"{rd.path}:{ln}: negative dose {dose}")
            if route == "continuous_rate" and (end is None or not start < end):
                raise ValidationError(f"{rd.path}:{ln}: continuous infusion needs start_min < end_min")
            h["sedation_events"].append(SedationEvent(drug, dose, route, start, end))

    episodes = []
    for h in heads.values():
        h["samples"] = tuple(h["samples"])
        h["vent_intervals"] = tuple(sorted(h["vent_intervals"], key=lambda iv: iv.start_min))
        h["sedation_events"] = tuple(h["sedation_events"])
        episodes.append(validate_episode(PatientEpisode(**h)))
    return episodes
