"""
Interval scoring: PICP, AIW, Winkler score and hourly conditional coverage.

Coverage is boundary inclusive. All functions work on plain arrays; the
:class:`IntervalSeries` container adds timestamps for the hourly breakdown.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd


@dataclass
class IntervalSeries:
    alpha: float
    timestamps: pd.DatetimeIndex
    lower: np.ndarray
    upper: np.ndarray
    realized: np.ndarray

    def __post_init__(self):
        self.timestamps = pd.DatetimeIndex(self.timestamps)
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        self.realized = np.asarray(self.realized, dtype=float)
        n = len(self.timestamps)
        if not (self.lower.shape == self.upper.shape == self.realized.shape == (n,)):
            raise ValueError("timestamps, lower, upper and realized must have equal length")
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound exceeds upper bound")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")

    def __len__(self):
        return len(self.timestamps)

    def subset(self, mask) -> "IntervalSeries":
        mask = np.asarray(mask, dtype=bool)
        return IntervalSeries(self.alpha, self.timestamps[mask], self.lower[mask], self.upper[mask], self.realized[mask])


@dataclass
class MetricReport:
    alpha: float
    picp: float
    aiw: float
    winkler: float
    hourly: list = field(default_factory=list)
    hourly_counts: list = field(default_factory=list)
    count: int = 0

    @property
    def level(self) -> float:
        return round(1.0 - self.alpha, 10)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hourly"] = [None if np.isnan(v) else v for v in self.hourly]
        return d


def covered(lower, upper, realized) -> np.ndarray:
    lower, upper, realized = (np.asarray(a, dtype=float) for a in (lower, upper, realized))
    return (lower <= realized) & (realized <= upper)


def winkler_scores(lower, upper, realized, alpha: float) -> np.ndarray:
    lower, upper, realized = (np.asarray(a, dtype=float) for a in (lower, upper, realized))
    width = upper - lower
    penalty = np.where(realized > upper, realized - upper, 0.0) + np.where(realized < lower, lower - realized, 0.0)
    return width + (2.0 / alpha) * penalty


def _check(series: IntervalSeries):
    if len(series) == 0:
        raise ValueError("metrics need a non-empty interval series")


def picp(series: IntervalSeries) -> float:
    _check(series)
    return float(np.mean(covered(series.lower, series.upper, series.realized)))


def aiw(series: IntervalSeries) -> float:
    _check(series)
    return float(np.mean(series.upper - series.lower))


def winkler(series: IntervalSeries) -> float:
    _check(series)
    return float(np.mean(winkler_scores(series.lower, series.upper, series.realized, series.alpha)))


def hourly_coverage(series: IntervalSeries, utc_offset: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Coverage per hour-of-day bucket (local time).

    Returns ``(coverage, counts)``, each of length 24. Empty buckets are NaN
    in ``coverage``.
    """
    _check(series)
    ts = series.timestamps
    if ts.tz is not None:
        ts = ts.tz_convert(None)
    hours = (ts + pd.Timedelta(hours=utc_offset)).hour.to_numpy()
    hit = covered(series.lower, series.upper, series.realized).astype(float)
    counts = np.bincount(hours, minlength=24)
    sums = np.bincount(hours, weights=hit, minlength=24)
    cov = np.full(24, np.nan)
    nz = counts > 0
    cov[nz] = sums[nz] / counts[nz]
    return cov, counts


def normalize_by_capacity(series: IntervalSeries, capacity: float) -> IntervalSeries:
    if not capacity > 0:
        raise ValueError(f"capacity must be positive, got {capacity}")
    return IntervalSeries(
        series.alpha,
        series.timestamps,
        series.lower / capacity,
        series.upper / capacity,
        series.realized / capacity,
    )


def daylight_mask(series: IntervalSeries) -> np.ndarray:
    """Rows with any generation either realized or forecast."""
    return (series.realized > 0) | (series.upper > 0)


def evaluate(series: IntervalSeries, utc_offset: float = 0.0) -> MetricReport:
    cov, counts = hourly_coverage(series, utc_offset)
    return MetricReport(
        alpha=series.alpha,
        picp=picp(series),
        aiw=aiw(series),
        winkler=winkler(series),
        hourly=cov.tolist(),
        hourly_counts=counts.tolist(),
        count=len(series),
    )


def reports_to_frame(reports: dict) -> pd.DataFrame:
    """Long form ``region,method,level,metric,value`` from ``{(region, method, alpha): report}``."""
    rows = []
    for (region, method, alpha), rep in sorted(reports.items(), key=lambda kv: (kv[0][0], kv[0][1], kv[0][2])):
        for name in ("picp", "aiw", "winkler"):
            rows.append(
                {"region": region, "metric": name, "level": rep.level, "method": method, "value": getattr(rep, name)}
            )
    return pd.DataFrame(rows, columns=["region", "metric", "level", "method", "value"])


def reports_to_json(reports: dict) -> str:
    items = []
    for (region, method, alpha), rep in sorted(reports.items(), key=lambda kv: (kv[0][0], kv[0][1], kv[0][2])):
        d = rep.to_dict()
        d.update(region=region, method=method, level=rep.level)
        items.append(d)
    return json.dumps(items, indent=2, sort_keys=True)
