"""Longitudinal event data on a uniform interval grid.

Conventions
-----------
Intervals are indexed ``0 .. K-1``; interval ``k`` covers the time span
``(start + k*length, start + (k+1)*length]``.  A patient observation window
``(a_i, b_i]`` is stored as the boundary pair ``obs_start=a_i, obs_end=b_i``
and covers the intervals ``a_i, ..., b_i - 1``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, GapViolationError, ParseError, ValidationError

RECORD_KINDS = ("exposure", "outcome", "window_start", "window_end")
EVENT_COLUMNS = ("patient_id", "kind", "drug", "start")
GAP_POLICIES = ("first_only", "error", "keep")


@dataclass(frozen=True)
class IntervalGrid:
    """Uniform partition of the study period into ``n_intervals`` intervals.

    ``origin`` anchors ISO dates: a date ``origin + n days`` is mapped to time
    ``global_start + n`` (days), then floored onto the grid.
    """

    n_intervals: int
    interval_length: float = 1.0
    global_start: float = 0.0
    origin: date | None = None

    def __post_init__(self):
        if int(self.n_intervals) != self.n_intervals or self.n_intervals < 1:
            raise ConfigError(f"n_intervals must be a positive integer, got {self.n_intervals}")
        if not self.interval_length > 0:
            raise ConfigError(f"interval_length must be positive, got {self.interval_length}")

    @property
    def global_end(self) -> float:
        return self.global_start + self.n_intervals * self.interval_length

    def interval_of(self, t: float) -> int:
        """Index of the interval ``(t_k, t_{k+1}]`` containing time ``t``.

        The global start itself is assigned to interval 0.
        """
        k = math.ceil((t - self.global_start) / self.interval_length) - 1
        return max(k, 0)

    def interval_of_day(self, day: int) -> int:
        """Index of the interval holding the whole day ``day`` (0-based)."""
        return int(math.floor(day / self.interval_length))

    def days_since_origin(self, d: date) -> int:
        if self.origin is None:
            raise ConfigError("ISO dates require a grid origin date")
        return (d - self.origin).days


@dataclass(frozen=True, eq=False)
class PatientTimeline:
    """One patient's window, per-interval outcome counts and exposure starts.

    Outcome counts are stored sparsely (``event_intervals`` sorted, unique,
    with matching positive ``event_counts``); ``exposure_starts[j]`` is the
    strictly increasing array of exposure-start intervals to drug ``j``.
    """

    patient_id: str
    obs_start: int
    obs_end: int
    event_intervals: np.ndarray
    event_counts: np.ndarray
    exposure_starts: tuple

    @property
    def n_events(self) -> int:
        return int(self.event_counts.sum())

    @property
    def n_window(self) -> int:
        return self.obs_end - self.obs_start

    def counts_in_window(self) -> np.ndarray:
        """Dense counts ``y_ik`` for ``k = obs_start .. obs_end - 1``."""
        y = np.zeros(self.n_window, dtype=np.int64)
        y[self.event_intervals - self.obs_start] = self.event_counts
        return y

    def replace(self, **changes) -> "PatientTimeline":
        fields_ = {
            "patient_id": self.patient_id,
            "obs_start": self.obs_start,
            "obs_end": self.obs_end,
            "event_intervals": self.event_intervals,
            "event_counts": self.event_counts,
            "exposure_starts": self.exposure_starts,
        }
        fields_.update(changes)
        return PatientTimeline(**fields_)

    def __eq__(self, other):
        if not isinstance(other, PatientTimeline):
            return NotImplemented
        return (
            self.patient_id == other.patient_id
            and self.obs_start == other.obs_start
            and self.obs_end == other.obs_end
            and np.array_equal(self.event_intervals, other.event_intervals)
            and np.array_equal(self.event_counts, other.event_counts)
            and len(self.exposure_starts) == len(other.exposure_starts)
            and all(np.array_equal(a, b) for a, b in zip(self.exposure_starts, other.exposure_starts))
        )

    __hash__ = None


@dataclass(frozen=True)
class CohortTimeline:
    grid: IntervalGrid
    patients: tuple = ()
    drug_labels: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "patients", tuple(self.patients))
        object.__setattr__(self, "drug_labels", tuple(self.drug_labels))
        ids = [p.patient_id for p in self.patients]
        if len(set(ids)) != len(ids):
            raise ValidationError("patient ids must be unique")
        for p in self.patients:
            if len(p.exposure_starts) != self.n_drugs:
                raise ValidationError(
                    f"patient {p.patient_id!r} has {len(p.exposure_starts)} exposure lists, "
                    f"expected {self.n_drugs}"
                )

    @property
    def n_patients(self) -> int:
        return len(self.patients)

    @property
    def n_drugs(self) -> int:
        return len(self.drug_labels)

    def n_events(self) -> np.ndarray:
        return np.array([p.n_events for p in self.patients], dtype=np.int64)

    def subset(self, indices: Iterable[int]) -> "CohortTimeline":
        return CohortTimeline(self.grid, tuple(self.patients[i] for i in indices), self.drug_labels)

    def with_patients(self, patients: Sequence[PatientTimeline]) -> "CohortTimeline":
        return CohortTimeline(self.grid, tuple(patients), self.drug_labels)


@dataclass
class EventRecord:
    patient_id: str
    kind: str
    drug: str = ""
    start: int | str | date | None = None
    line: int | None = None


@dataclass
class _PatientBuilder:
    window_start: int | None = None
    window_end: int | None = None
    outcomes: list = field(default_factory=list)
    exposures: dict = field(default_factory=dict)
    first_line: int | None = None


def _coerce_record(rec, line) -> EventRecord:
    if isinstance(rec, EventRecord):
        return rec
    if isinstance(rec, dict):
        return EventRecord(
            str(rec.get("patient_id", "")), rec.get("kind", ""), rec.get("drug") or "",
            rec.get("start"), rec.get("line", line),
        )
    try:
        patient_id, kind, drug, start = rec
    except (TypeError, ValueError):
        raise ParseError(f"cannot interpret record {rec!r}", line) from None
    return EventRecord(str(patient_id), kind, drug or "", start, line)


def _record_time(rec: EventRecord, grid: IntervalGrid, boundary_end: bool) -> int:
    """Map a record's ``start`` field to an interval index (or window boundary)."""
    value = rec.start
    if isinstance(value, str):
        text = value.strip()
        try:
            value = int(text)
        except ValueError:
            try:
                value = date.fromisoformat(text)
            except ValueError:
                raise ParseError(f"start {text!r} is neither an integer nor an ISO date", rec.line) from None
    if isinstance(value, (bool, np.bool_)) or value is None:
        raise ParseError(f"missing or invalid start {rec.start!r}", rec.line)
    if isinstance(value, date):
        k = grid.interval_of_day(grid.days_since_origin(value))
        return k + 1 if boundary_end else k
    if isinstance(value, (int, np.integer)):
        return int(value)
    raise ParseError(f"start must be an integer interval index or ISO date, got {value!r}", rec.line)


def ingest_events(records: Iterable, grid: IntervalGrid | dict, drug_labels: Sequence[str] | None = None) -> CohortTimeline:
    """Build a :class:`CohortTimeline` from raw event records.

    Records are ``EventRecord`` instances, dicts or ``(patient_id, kind, drug,
    start)`` tuples.  Drug labels get dense indices in first-seen order unless
    ``drug_labels`` fixes the order up front.  Patients appear in first-seen
    order.
    """
    if isinstance(grid, dict):
        grid = IntervalGrid(**grid)
    labels = list(drug_labels) if drug_labels is not None else []
    label_index = {lab: j for j, lab in enumerate(labels)}
    builders: dict[str, _PatientBuilder] = {}

    for n, raw in enumerate(records, start=1):
        rec = _coerce_record(raw, n)
        line = rec.line if rec.line is not None else n
        rec.line = line
        if rec.kind not in RECORD_KINDS:
            raise ParseError(f"unknown record kind {rec.kind!r}", line)
        if not rec.patient_id:
            raise ParseError("empty patient_id", line)
        b = builders.setdefault(rec.patient_id, _PatientBuilder(first_line=line))
        if rec.kind == "window_start":
            if b.window_start is not None:
                raise ValidationError(f"patient {rec.patient_id!r}: duplicate window_start (line {line})")
            b.window_start = _record_time(rec, grid, boundary_end=False)
        elif rec.kind == "window_end":
            if b.window_end is not None:
                raise ValidationError(f"patient {rec.patient_id!r}: duplicate window_end (line {line})")
            b.window_end = _record_time(rec, grid, boundary_end=True)
        elif rec.kind == "outcome":
            b.outcomes.append((_record_time(rec, grid, boundary_end=False), line))
        else:
            if not rec.drug:
                raise ParseError("exposure record without drug label", line)
            if rec.drug not in label_index:
                if drug_labels is not None:
                    raise ValidationError(f"unknown drug label {rec.drug!r} (line {line})")
                label_index[rec.drug] = len(labels)
                labels.append(rec.drug)
            b.exposures.setdefault(label_index[rec.drug], []).append((_record_time(rec, grid, boundary_end=False), line))

    K = grid.n_intervals
    patients = []
    for pid, b in builders.items():
        if b.window_start is None or b.window_end is None:
            raise ValidationError(f"patient {pid!r} has no complete observation window")
        a_i, b_i = b.window_start, b.window_end
        if not (0 <= a_i < b_i <= K):
            raise ValidationError(f"patient {pid!r}: window ({a_i}, {b_i}] not inside grid of {K} intervals")
        for k, line in b.outcomes:
            if not (a_i <= k < b_i):
                raise ValidationError(
                    f"patient {pid!r}: outcome at interval {k} outside observation window (line {line})"
                )
        for j, starts in b.exposures.items():
            for k, line in starts:
                if not (0 <= k < K):
                    raise ValidationError(f"patient {pid!r}: exposure at interval {k} outside grid (line {line})")
        ev = np.array([k for k, _ in b.outcomes], dtype=np.int64)
        intervals, counts = np.unique(ev, return_counts=True)
        exposures = tuple(
            np.unique(np.array([k for k, _ in b.exposures.get(j, [])], dtype=np.int64))
            for j in range(len(labels))
        )
        patients.append(PatientTimeline(pid, a_i, b_i, intervals.astype(np.int64), counts.astype(np.int64), exposures))
    return CohortTimeline(grid, tuple(patients), tuple(labels))


def read_event_file(path, grid: IntervalGrid | None = None, delimiter: str = ",",
                    drug_labels: Sequence[str] | None = None) -> CohortTimeline:
    """Parse a delimited event file with header ``patient_id,kind,drug,start``.

    When ``grid`` is None the grid is the smallest one holding every window end
    and every event interval (interval-index files only).
    """
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = next(reader)
        except StopIteration:
            header = None
        if header is not None and [h.strip() for h in header] != list(EVENT_COLUMNS):
            raise ParseError(f"expected header {','.join(EVENT_COLUMNS)}, got {header!r}", 1)
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(EVENT_COLUMNS):
                raise ParseError(f"expected {len(EVENT_COLUMNS)} fields, got {len(row)}", line)
            pid, kind, drug, start = (c.strip() for c in row)
            records.append(EventRecord(pid, kind, drug, start, line))
    if grid is None:
        ends = [1]
        for rec in records:
            try:
                k = int(rec.start)
            except (TypeError, ValueError):
                raise ConfigError("cannot infer the grid from dated records; configure n_intervals") from None
            ends.append(k if rec.kind in ("window_start", "window_end") else k + 1)
        grid = IntervalGrid(max(ends))
    return ingest_events(records, grid, drug_labels=drug_labels)


def cohort_to_records(cohort: CohortTimeline) -> list:
    """Inverse of :func:`ingest_events` using integer interval indices."""
    rows = []
    for p in cohort.patients:
        rows.append(EventRecord(p.patient_id, "window_start", "", p.obs_start))
        rows.append(EventRecord(p.patient_id, "window_end", "", p.obs_end))
        for k, c in zip(p.event_intervals, p.event_counts):
            rows.extend(EventRecord(p.patient_id, "outcome", "", int(k)) for _ in range(int(c)))
        for j, starts in enumerate(p.exposure_starts):
            rows.extend(EventRecord(p.patient_id, "exposure", cohort.drug_labels[j], int(c)) for c in starts)
    return rows


def write_event_file(cohort: CohortTimeline, path, delimiter: str = ",") -> None:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        writer.writerow(EVENT_COLUMNS)
        for r in cohort_to_records(cohort):
            writer.writerow((r.patient_id, r.kind, r.drug, r.start))


def validate_cases(cohort: CohortTimeline) -> tuple[CohortTimeline, dict]:
    """Drop non-cases (patients without outcomes).

    Returns the filtered cohort and a report mapping each drop reason to its
    count; the report is empty when nothing was dropped.
    """
    kept = [p for p in cohort.patients if p.n_events >= 1]
    report = {}
    dropped = cohort.n_patients - len(kept)
    if dropped:
        report["dropped_non_cases"] = dropped
    return cohort.with_patients(kept), report


def enforce_exposure_gaps(cohort: CohortTimeline, window_length: int, policy: str = "first_only") -> CohortTimeline:
    """Resolve exposure starts closer than ``window_length`` intervals apart.

    ``first_only`` keeps a start only if it is more than ``window_length``
    intervals after the previous retained start; ``error`` raises on the first
    violation; ``keep`` leaves overlapping exposures in place.
    """
    if window_length < 1:
        raise ConfigError(f"window length must be >= 1, got {window_length}")
    if policy not in GAP_POLICIES:
        raise ConfigError(f"unknown exposure gap policy {policy!r}")
    if policy == "keep":
        return cohort
    patients = []
    for p in cohort.patients:
        new_starts = []
        for j, starts in enumerate(p.exposure_starts):
            if policy == "error":
                gaps = np.diff(starts)
                if gaps.size and gaps.min() <= window_length:
                    raise GapViolationError(
                        f"patient {p.patient_id!r}, drug {cohort.drug_labels[j]!r}: exposure starts "
                        f"{gaps.min()} intervals apart (risk window {window_length})"
                    )
                new_starts.append(starts)
                continue
            kept = []
            for c in starts:
                if not kept or c - kept[-1] > window_length:
                    kept.append(int(c))
            new_starts.append(np.array(kept, dtype=np.int64))
        patients.append(p.replace(exposure_starts=tuple(new_starts)))
    return cohort.with_patients(patients)
