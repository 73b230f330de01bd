"""Balanced panel ingestion and indexing.

The only ingestion format is a long CSV with one ``unit,period,outcome,value``
record per row. Everything downstream works on :class:`BalancedPanel`, a dense
``unit x period`` grid per outcome with the treated unit stored first.
"""

from __future__ import annotations

import csv
import io
import math
import os
import warnings
from dataclasses import dataclass, field
from typing import IO, Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    DataError,
    DuplicateKey,
    EmptyValueWarning,
    InsufficientDonors,
    InsufficientPrePeriods,
    MalformedRow,
    NoPostPeriods,
    NonNumericValue,
    TreatedUnitMissing,
    UnbalancedPanel,
    UnknownOutcome,
)

__all__ = [
    "PanelObservation",
    "TreatmentAssignment",
    "BalancedPanel",
    "DEFAULT_SCHEMA",
    "load_long_csv",
    "build_panel",
    "panel_from_arrays",
    "pre_period",
    "post_period",
    "write_long_csv",
    "panel_observations",
]

DEFAULT_SCHEMA = {"unit": "unit", "period": "period", "outcome": "outcome", "value": "value"}


@dataclass(frozen=True)
class PanelObservation:
    unit: str
    period: int
    outcome: str
    value: float


@dataclass(frozen=True)
class TreatmentAssignment:
    treated_unit: str
    t0: int


@dataclass(frozen=True, eq=False)
class BalancedPanel:
    """Dense panel with a single treated unit.

    ``values[outcome]`` is a read-only ``(n_units, n_periods)`` array whose
    row order follows ``units``; row 0 is always the treated unit. ``t0`` is
    the last pre-treatment period.
    """

    units: tuple[str, ...]
    periods: tuple[int, ...]
    outcomes: tuple[str, ...]
    values: Mapping[str, np.ndarray]
    treated_unit: str
    t0: int
    _pre: int = field(init=False, repr=False)

    def __post_init__(self):
        if not self.units or self.units[0] != self.treated_unit:
            raise TreatedUnitMissing(f"treated unit {self.treated_unit!r} must be the first unit")
        if len(set(self.units)) != len(self.units):
            raise DuplicateKey("unit ids must be unique")
        periods = self.periods
        if list(periods) != list(range(periods[0], periods[0] + len(periods))):
            raise UnbalancedPanel([])
        if self.t0 < periods[0] + 1:
            raise InsufficientPrePeriods(
                f"t0={self.t0} leaves fewer than 2 pre-treatment periods (first period {periods[0]})"
            )
        if self.t0 >= periods[-1]:
            raise NoPostPeriods(f"t0={self.t0} leaves no post-treatment period (last period {periods[-1]})")
        frozen = {}
        for name in self.outcomes:
            arr = np.array(self.values[name], dtype=float)
            if arr.shape != (len(self.units), len(periods)):
                raise UnbalancedPanel([])
            arr.setflags(write=False)
            frozen[name] = arr
        object.__setattr__(self, "values", frozen)
        object.__setattr__(self, "_pre", self.t0 - periods[0] + 1)

    # -- indexing ---------------------------------------------------------

    @property
    def donors(self) -> tuple[str, ...]:
        return self.units[1:]

    @property
    def n_pre(self) -> int:
        return self._pre

    @property
    def n_post(self) -> int:
        return len(self.periods) - self._pre

    @property
    def pre_periods(self) -> tuple[int, ...]:
        return self.periods[: self._pre]

    @property
    def post_periods(self) -> tuple[int, ...]:
        return self.periods[self._pre :]

    def matrix(self, outcome: str) -> np.ndarray:
        try:
            return self.values[outcome]
        except KeyError:
            raise UnknownOutcome(f"outcome {outcome!r} not in panel (have {list(self.outcomes)})") from None

    def treated_series(self, outcome: str) -> np.ndarray:
        return self.matrix(outcome)[0]

    def donor_matrix(self, outcome: str) -> np.ndarray:
        return self.matrix(outcome)[1:]

    def period_index(self, period: int) -> int:
        idx = period - self.periods[0]
        if not 0 <= idx < len(self.periods):
            raise KeyError(period)
        return idx

    # -- derived panels ---------------------------------------------------

    def _derive(self, units, periods, values, treated, t0, min_donors=2):
        if len(units) - 1 < min_donors:
            raise InsufficientDonors(f"need at least {min_donors} donor(s), got {len(units) - 1}")
        return BalancedPanel(tuple(units), tuple(periods), tuple(values), values, treated, t0)

    def reassign(self, unit: str, exclude: Iterable[str] = (), min_donors: int = 1) -> "BalancedPanel":
        """Return a panel with ``unit`` treated and ``exclude`` dropped from the donors."""
        if unit not in self.units:
            raise TreatedUnitMissing(f"unit {unit!r} not in panel")
        drop = set(exclude) - {unit}
        keep = [unit] + [u for u in self.units if u != unit and u not in drop]
        rows = [self.units.index(u) for u in keep]
        values = {k: v[rows] for k, v in self.values.items()}
        return self._derive(keep, self.periods, values, unit, self.t0, min_donors)

    def select_donors(self, donors: Sequence[str]) -> "BalancedPanel":
        missing = [d for d in donors if d not in self.units]
        if missing:
            raise InsufficientDonors(f"donor(s) not in data: {missing}")
        if self.treated_unit in donors:
            raise InsufficientDonors("treated unit cannot be a donor")
        keep = [self.treated_unit, *donors]
        rows = [self.units.index(u) for u in keep]
        values = {k: v[rows] for k, v in self.values.items()}
        return self._derive(keep, self.periods, values, self.treated_unit, self.t0)

    def truncate(self, last_period: int, t0: int | None = None) -> "BalancedPanel":
        """Drop periods after ``last_period`` and optionally move ``t0``."""
        n = last_period - self.periods[0] + 1
        values = {k: v[:, :n] for k, v in self.values.items()}
        return self._derive(
            self.units, self.periods[:n], values, self.treated_unit, self.t0 if t0 is None else t0, 1
        )

    def with_t0(self, t0: int) -> "BalancedPanel":
        return self._derive(self.units, self.periods, self.values, self.treated_unit, t0, 1)

    def with_outcomes(self, extra: Mapping[str, np.ndarray], keep: Sequence[str] | None = None) -> "BalancedPanel":
        values = {k: self.values[k] for k in (self.outcomes if keep is None else keep)}
        values.update(extra)
        return self._derive(self.units, self.periods, values, self.treated_unit, self.t0, 1)


def pre_period(panel: BalancedPanel) -> list[int]:
    return list(panel.pre_periods)


def post_period(panel: BalancedPanel) -> list[int]:
    return list(panel.post_periods)


# -- CSV ingestion -------------------------------------------------------


def _open_text(source) -> tuple[IO[str], bool]:
    if isinstance(source, (str, os.PathLike)):
        try:
            return open(source, newline="", encoding="utf-8"), True
        except OSError as exc:
            raise DataError(f"cannot read data file {source}: {exc.strerror}") from None
    if isinstance(source, (bytes, bytearray)):
        return io.StringIO(bytes(source).decode("utf-8"), newline=""), False
    if isinstance(source, io.TextIOBase):
        return source, False
    # binary stream
    return io.TextIOWrapper(source, encoding="utf-8", newline=""), False


def load_long_csv(source, schema: Mapping[str, str] | None = None) -> list[PanelObservation]:
    """Parse a long-format CSV into observations.

    ``source`` may be a path, raw bytes, or a text/binary stream. ``schema``
    maps the logical columns ``unit, period, outcome, value`` to header
    names. Rows whose value cell is empty are skipped and reported through an
    :class:`~synthpanel.errors.EmptyValueWarning` that lists their line numbers.
    """
    schema = {**DEFAULT_SCHEMA, **(schema or {})}
    stream, close = _open_text(source)
    try:
        reader = csv.reader(stream)
        try:
            header = next(reader)
        except StopIteration:
            raise MalformedRow("empty file: no header row") from None
        header = [h.strip().lstrip("﻿") for h in header]
        try:
            cols = {key: header.index(name) for key, name in schema.items()}
        except ValueError as exc:
            raise MalformedRow(f"header {header} lacks a required column: {exc}") from None

        out: list[PanelObservation] = []
        seen: dict[tuple[str, int, str], int] = {}
        empty: list[int] = []
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise MalformedRow(f"line {line}: expected {len(header)} columns, got {len(row)}")
            unit = row[cols["unit"]].strip()
            outcome = row[cols["outcome"]].strip()
            try:
                period = int(row[cols["period"]].strip())
            except ValueError:
                raise MalformedRow(f"line {line}: period {row[cols['period']]!r} is not an integer") from None
            raw = row[cols["value"]].strip()
            if raw == "":
                empty.append(line)
                continue
            try:
                value = float(raw)
            except ValueError:
                raise NonNumericValue(f"line {line}: value {raw!r} is not numeric") from None
            if not math.isfinite(value):
                raise NonNumericValue(f"line {line}: value {raw!r} is not finite")
            key = (unit, period, outcome)
            if key in seen:
                raise DuplicateKey(f"line {line}: ({unit}, {period}, {outcome}) already defined on line {seen[key]}")
            seen[key] = line
            out.append(PanelObservation(unit, period, outcome, value))
    finally:
        if close:
            stream.close()
    if empty:
        shown = ", ".join(map(str, empty[:20]))
        warnings.warn(f"skipped {len(empty)} row(s) with empty value on line(s) {shown}", EmptyValueWarning, stacklevel=2)
    return out


def build_panel(
    obs: Iterable[PanelObservation],
    assignment: TreatmentAssignment,
    donors: Sequence[str] | None = None,
    outcomes: Sequence[str] | None = None,
) -> BalancedPanel:
    """Assemble a dense panel; units are ordered treated-first, then donors in input order."""
    obs = list(obs)
    unit_order: dict[str, None] = {}
    outcome_order: dict[str, None] = {}
    for o in obs:
        unit_order.setdefault(o.unit)
        outcome_order.setdefault(o.outcome)
    if assignment.treated_unit not in unit_order:
        raise TreatedUnitMissing(f"treated unit {assignment.treated_unit!r} has no observations")
    if donors is None:
        donors = [u for u in unit_order if u != assignment.treated_unit]
    else:
        absent = [d for d in donors if d not in unit_order]
        if absent:
            raise InsufficientDonors(f"donor(s) without observations: {absent}")
        if assignment.treated_unit in donors:
            raise InsufficientDonors("treated unit listed as a donor")
    if len(donors) < 2:
        raise InsufficientDonors(f"need at least 2 donors, got {len(donors)}")
    if outcomes is None:
        outcomes = list(outcome_order)
    else:
        absent = [o for o in outcomes if o not in outcome_order]
        if absent:
            raise UnknownOutcome(f"outcome(s) not in data: {absent}")
    units = [assignment.treated_unit, *donors]
    if not obs:
        raise UnbalancedPanel([])
    first = min(o.period for o in obs)
    last = max(o.period for o in obs)
    periods = list(range(first, last + 1))
    if assignment.t0 < first + 1:
        raise InsufficientPrePeriods(f"t0={assignment.t0} leaves fewer than 2 pre-treatment periods")
    if assignment.t0 >= last:
        raise NoPostPeriods(f"t0={assignment.t0} is the last period {last}")

    uidx = {u: i for i, u in enumerate(units)}
    grids = {name: np.full((len(units), len(periods)), np.nan) for name in outcomes}
    for o in obs:
        if o.outcome in grids and o.unit in uidx:
            grids[o.outcome][uidx[o.unit], o.period - first] = o.value
    missing = [
        (units[i], periods[t], name)
        for name in outcomes
        for i, t in zip(*np.nonzero(np.isnan(grids[name])))
    ]
    if missing:
        raise UnbalancedPanel(missing)
    return BalancedPanel(tuple(units), tuple(periods), tuple(outcomes), grids, assignment.treated_unit, assignment.t0)


def panel_from_arrays(
    values: Mapping[str, np.ndarray],
    units: Sequence[str],
    periods: Sequence[int],
    treated_unit: str,
    t0: int,
) -> BalancedPanel:
    """Build a panel from dense arrays whose rows follow ``units``."""
    units = list(units)
    order = [units.index(treated_unit)] + [i for i, u in enumerate(units) if u != treated_unit]
    ordered = [units[i] for i in order]
    vals = {k: np.asarray(v, dtype=float)[order] for k, v in values.items()}
    for k, v in vals.items():
        if not np.all(np.isfinite(v)):
            raise NonNumericValue(f"outcome {k!r} contains non-finite values")
    if len(ordered) < 3:
        raise InsufficientDonors(f"need at least 2 donors, got {len(ordered) - 1}")
    return BalancedPanel(tuple(ordered), tuple(int(p) for p in periods), tuple(vals), vals, treated_unit, int(t0))


def panel_observations(panel: BalancedPanel) -> list[PanelObservation]:
    return [
        PanelObservation(u, p, name, float(panel.values[name][i, t]))
        for name in panel.outcomes
        for i, u in enumerate(panel.units)
        for t, p in enumerate(panel.periods)
    ]


def write_long_csv(data, target) -> None:
    """Serialize a panel or observation list as long CSV (floats use shortest round-trip repr)."""
    obs = panel_observations(data) if isinstance(data, BalancedPanel) else list(data)
    close = False
    if isinstance(target, (str, os.PathLike)):
        target = open(target, "w", newline="", encoding="utf-8")
        close = True
    try:
        w = csv.writer(target, lineterminator="\n")
        w.writerow(["unit", "period", "outcome", "value"])
        for o in obs:
            w.writerow([o.unit, o.period, o.outcome, repr(float(o.value))])
    finally:
        if close:
            target.close()
