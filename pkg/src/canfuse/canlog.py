"""Decoded CAN signal logs: parsing, signal selection, forward-fill
densification onto a fixed tick, and power/voltage/current consistency checks.

Log format is CSV with header ``timestamp_ms,signal,value``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, astuple
from typing import Iterable, Mapping, Sequence, TextIO

import numpy as np

from .errors import (EmptyInput, EmptySeries, MalformedLine, MissingHeader,
                     NoInitialValue, NonFiniteValue, NonMonotonicSeries)

LOG_HEADER = "timestamp_ms,signal,value"

# the five retained bus signals, in feature-vector order, plus the label
FEATURE_SIGNALS = ("Voltage", "Current", "Power", "SteeringSpeed", "Speed")
LABEL_SIGNAL = "SteeringAngle"
DEFAULT_SIGNALS = FEATURE_SIGNALS + (LABEL_SIGNAL,)

ROW_FIELDS = ("timestamp_ms", "voltage", "current", "power", "steering_speed", "speed", "steering_angle")


@dataclass(frozen=True)
class SignalUpdate:
    timestamp_ms: float
    signal: str
    value: float


@dataclass(frozen=True)
class CanFeatureRow:
    timestamp_ms: float
    voltage: float
    current: float
    power: float
    steering_speed: float
    speed: float
    steering_angle: float

    def features(self) -> tuple[float, float, float, float, float]:
        return (self.voltage, self.current, self.power, self.steering_speed, self.speed)


def _lines(source) -> Iterable[str]:
    if isinstance(source, str):
        return source.splitlines()
    return source


def parse_can_log(source: TextIO | Iterable[str] | str) -> list[SignalUpdate]:
    """Parse a decoded-signal CSV log. Line numbers in errors are 1-based and
    count the header as line 1."""
    it = iter(_lines(source))
    try:
        header = next(it).rstrip("\r\n")
    except StopIteration:
        raise MissingHeader("empty log") from None
    if header.lstrip("﻿") != LOG_HEADER:
        raise MissingHeader(f"expected header {LOG_HEADER!r}, got {header!r}")
    out = []
    for line_no, raw in enumerate(it, start=2):
        line = raw.rstrip("\r\n")
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 3 or not parts[1]:
            raise MalformedLine(line_no)
        try:
            ts = float(parts[0])
            value = float(parts[2])
        except ValueError:
            raise MalformedLine(line_no) from None
        if not (math.isfinite(value) and math.isfinite(ts)):
            raise NonFiniteValue(line_no)
        if ts < 0:
            raise MalformedLine(line_no, f"negative timestamp on line {line_no}")
        out.append(SignalUpdate(ts, parts[1], value))
    return out


def format_can_log(updates: Iterable[SignalUpdate]) -> str:
    # repr() round-trips floats exactly
    lines = [LOG_HEADER]
    lines += [f"{u.timestamp_ms!r},{u.signal},{u.value!r}" for u in updates]
    return "\n".join(lines) + "\n"


def select_signals(updates: Sequence[SignalUpdate], wanted: Iterable[str]) -> dict[str, list[SignalUpdate]]:
    wanted = list(dict.fromkeys(wanted))
    if not wanted:
        raise EmptyInput("no signals requested")
    series: dict[str, list[SignalUpdate]] = {name: [] for name in wanted}
    for u in updates:
        s = series.get(u.signal)
        if s is not None:
            s.append(u)
    for name, s in series.items():
        for a, b in zip(s, s[1:]):
            if b.timestamp_ms < a.timestamp_ms:
                raise NonMonotonicSeries(name)
    return series


def sample_and_hold(series_map: Mapping[str, Sequence[SignalUpdate]], tick_ms: float = 1.0,
                    t_start: float = 0.0, t_end: float | None = None,
                    signals: Sequence[str] = DEFAULT_SIGNALS) -> list[CanFeatureRow]:
    """Forward-fill each signal onto ticks t_start + k*tick_ms in [t_start, t_end)."""
    if tick_ms <= 0:
        raise ValueError("tick_ms must be positive")
    for name in signals:
        s = series_map.get(name, [])
        if not s:
            raise EmptySeries(name)
        if s[0].timestamp_ms > t_start:
            raise NoInitialValue(name)
    if t_end is None:
        t_end = max(s[-1].timestamp_ms for s in (series_map[n] for n in signals)) + tick_ms
    if not t_start < t_end:
        raise ValueError("t_start must be before t_end")
    # the difference t_end - t_start can round either way, so settle the
    # count against the half-open interval directly
    n_ticks = math.ceil((t_end - t_start) / tick_ms)
    while n_ticks > 1 and t_start + tick_ms * (n_ticks - 1) >= t_end:
        n_ticks -= 1
    while t_start + tick_ms * n_ticks < t_end:
        n_ticks += 1
    ticks = t_start + tick_ms * np.arange(n_ticks)
    cols = [ticks]
    for name in signals:
        s = series_map[name]
        ts = np.array([u.timestamp_ms for u in s])
        vals = np.array([u.value for u in s])
        # last update at or before each tick
        idx = np.searchsorted(ts, ticks, side="right") - 1
        cols.append(vals[idx])
    table = np.column_stack(cols)
    return [CanFeatureRow(*map(float, r)) for r in table]


def rows_to_array(rows: Sequence[CanFeatureRow]) -> np.ndarray:
    return np.array([astuple(r) for r in rows], dtype=np.float64).reshape(-1, len(ROW_FIELDS))


def array_to_rows(table: np.ndarray) -> list[CanFeatureRow]:
    return [CanFeatureRow(*map(float, r)) for r in np.asarray(table)]


@dataclass
class ValidationReport:
    passed: bool
    residuals: list[float]
    offending: list[int]
    max_residual: float
    tol_kw: float


def power_residuals(rows: Sequence[CanFeatureRow]) -> np.ndarray:
    a = rows_to_array(rows)
    return np.abs(a[:, 3] - a[:, 1] * a[:, 2] / 1000.0)


def validate_rows(rows: Sequence[CanFeatureRow], tol_kw: float = 0.01) -> ValidationReport:
    """Check |power - voltage*current/1000| <= tol_kw on every row."""
    if not rows:
        raise EmptyInput("no rows to validate")
    if tol_kw <= 0:
        raise ValueError("tol_kw must be positive")
    res = power_residuals(rows)
    bad = [int(i) for i in np.flatnonzero(res > tol_kw)]
    return ValidationReport(not bad, res.tolist(), bad, float(res.max()), tol_kw)


def write_rows_csv(fh: TextIO, rows: Iterable[CanFeatureRow]) -> None:
    fh.write(",".join(ROW_FIELDS) + "\n")
    for r in rows:
        fh.write(",".join(repr(float(v)) for v in astuple(r)) + "\n")


def read_rows_csv(source) -> list[CanFeatureRow]:
    it = iter(_lines(source))
    try:
        header = next(it).strip()
    except StopIteration:
        raise MissingHeader("empty rows file") from None
    if header != ",".join(ROW_FIELDS):
        raise MissingHeader(f"expected header {','.join(ROW_FIELDS)!r}")
    rows = []
    for line_no, line in enumerate(it, start=2):
        line = line.strip()
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != len(ROW_FIELDS):
            raise MalformedLine(line_no)
        try:
            vals = [float(p) for p in parts]
        except ValueError:
            raise MalformedLine(line_no) from None
        if not all(math.isfinite(v) for v in vals):
            raise NonFiniteValue(line_no)
        rows.append(CanFeatureRow(*vals))
    return rows


def decode(source, signals: Sequence[str] = DEFAULT_SIGNALS, tick_ms: float = 1.0,
           t_start: float | None = None, t_end: float | None = None) -> list[CanFeatureRow]:
    """parse -> select -> sample_and_hold, starting at the first tick where
    every signal has a value unless ``t_start`` is given."""
    updates = parse_can_log(source)
    series = select_signals(updates, signals)
    for name in signals:
        if not series[name]:
            raise EmptySeries(name)
    if t_start is None:
        t_start = max(series[n][0].timestamp_ms for n in signals)
    return sample_and_hold(series, tick_ms, t_start, t_end, signals)

