"""
Context features for context-aware calibration.

A context vector for hour ``t`` holds ``k`` lagged fleet values (taken a
full day back so they are known when a day-ahead forecast is issued),
sin/cos embeddings of hour of day, day of year and month, and the position
of ``t`` within the solar day. All calendar features use local time given by
a fixed UTC offset.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

DEFAULT_LAGS = 3
LAG_OFFSET_HOURS = 24
STD_FLOOR = 1e-8
SUNRISE_WINDOW_DAYS = 7


@dataclass(frozen=True)
class ContextVector:
    lags: np.ndarray
    hour_embed: tuple[float, float]
    day_embed: tuple[float, float]
    month_embed: tuple[float, float]
    solar_pos: float

    def as_array(self) -> np.ndarray:
        return np.concatenate(
            (self.lags, self.hour_embed, self.day_embed, self.month_embed, [self.solar_pos])
        ).astype(float)

    def __len__(self):
        return len(self.lags) + 7


def context_dim(k: int = DEFAULT_LAGS) -> int:
    return k + 7


def _local(ts, utc_offset: float):
    return pd.DatetimeIndex(ts).tz_convert(None) + pd.Timedelta(hours=utc_offset)


def calendar_embeddings(timestamps, utc_offset: float = 0.0) -> np.ndarray:
    """(T, 6) array: hour, day-of-year and month sin/cos pairs."""
    local = _local(timestamps, utc_offset)
    hour = local.hour.to_numpy() + local.minute.to_numpy() / 60.0
    doy = local.dayofyear.to_numpy().astype(float)
    month = local.month.to_numpy().astype(float)
    ang = np.column_stack((2 * np.pi * hour / 24.0, 2 * np.pi * doy / 365.25, 2 * np.pi * month / 12.0))
    out = np.empty((len(local), 6))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


def sunrise_table(fleet: pd.Series, utc_offset: float = 0.0, window: int = SUNRISE_WINDOW_DAYS) -> pd.DataFrame:
    """Per local day, sunrise/sunset hours estimated from past generation.

    For each day, the first and last local hour with nonzero fleet output is
    found; the table entry for day ``d`` is the median over the ``window``
    days strictly before ``d``, so it never looks at day ``d`` itself. Days
    without enough history are absent from the table.
    """
    s = fleet.dropna()
    if s.empty:
        return pd.DataFrame(columns=["sunrise", "sunset"], dtype=float)
    local = _local(s.index, utc_offset)
    hours = local.hour + local.minute / 60.0
    frame = pd.DataFrame({"day": local.normalize(), "hour": hours, "on": s.to_numpy() > 0})
    on = frame[frame["on"]]
    daily = on.groupby("day")["hour"].agg(sunrise="min", sunset="max")
    all_days = pd.date_range(frame["day"].min(), frame["day"].max() + pd.Timedelta(days=1), freq="D")
    daily = daily.reindex(all_days)
    table = daily.rolling(window, min_periods=1).median().shift(1)
    return table.dropna()


def solar_position(timestamps, table: pd.DataFrame, utc_offset: float = 0.0) -> np.ndarray:
    """Fraction of the solar day elapsed, clipped to [0, 1].

    Hours on days missing from ``table`` get 0 and a warning.
    """
    local = _local(timestamps, utc_offset)
    hour = (local.hour + local.minute / 60.0).to_numpy(dtype=float)
    days = local.normalize()
    rise = table["sunrise"].reindex(days).to_numpy(dtype=float)
    sset = table["sunset"].reindex(days).to_numpy(dtype=float)
    span = sset - rise
    ok = np.isfinite(rise) & np.isfinite(sset) & (span > 0)
    out = np.zeros(len(local))
    out[ok] = np.clip((hour[ok] - rise[ok]) / span[ok], 0.0, 1.0)
    if not np.all(ok):
        warnings.warn(f"{int((~ok).sum())} hours fall outside the sunrise table; solar position set to 0", RuntimeWarning)
    return out


def lag_matrix(fleet: pd.Series, timestamps, k: int = DEFAULT_LAGS, offset: int = LAG_OFFSET_HOURS) -> np.ndarray:
    """(T, k) fleet values at ``t - offset - j`` hours, ``j = 0..k-1``; NaN if unavailable."""
    idx = pd.DatetimeIndex(timestamps)
    out = np.empty((len(idx), k))
    for j in range(k):
        out[:, j] = fleet.reindex(idx - pd.Timedelta(hours=offset + j)).to_numpy(dtype=float)
    return out


def build_contexts(
    fleet: pd.Series,
    timestamps,
    k: int = DEFAULT_LAGS,
    table: pd.DataFrame | None = None,
    capacity: float = 1.0,
    utc_offset: float = 0.0,
) -> np.ndarray:
    """Raw (unstandardized) context matrix of shape (T, k + 7).

    Rows whose lags are unavailable contain NaN; callers drop them.
    """
    if table is None:
        table = sunrise_table(fleet, utc_offset)
    lags = lag_matrix(fleet, timestamps, k) / capacity
    cal = calendar_embeddings(timestamps, utc_offset)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        sol = solar_position(timestamps, table, utc_offset)
    return np.column_stack((lags, cal, sol))


def build_context(
    fleet: pd.Series,
    timestamp,
    k: int = DEFAULT_LAGS,
    table: pd.DataFrame | None = None,
    capacity: float = 1.0,
    utc_offset: float = 0.0,
) -> ContextVector:
    """Context vector for a single hour.

    Raises
    ------
    ValueError
        If any of the ``k`` lagged fleet values is missing.
    """
    ts = pd.DatetimeIndex([pd.Timestamp(timestamp)])
    if table is None:
        table = sunrise_table(fleet[fleet.index < ts[0]], utc_offset)
    lags = lag_matrix(fleet, ts, k)[0] / capacity
    if not np.all(np.isfinite(lags)):
        raise ValueError(f"insufficient fleet history for {k} lags before {ts[0]}")
    cal = calendar_embeddings(ts, utc_offset)[0]
    sol = solar_position(ts, table, utc_offset)[0]
    return ContextVector(
        lags=lags,
        hour_embed=(cal[0], cal[1]),
        day_embed=(cal[2], cal[3]),
        month_embed=(cal[4], cal[5]),
        solar_pos=float(sol),
    )


class Standardizer:
    """Per-dimension z-scoring with parameters frozen at fit time."""

    def __init__(self, mean, std):
        self.mean = np.asarray(mean, dtype=float)
        self.std = np.asarray(std, dtype=float)

    @classmethod
    def fit(cls, contexts) -> "Standardizer":
        c = np.asarray(contexts, dtype=float)
        if c.ndim != 2 or c.shape[0] < 2:
            raise ValueError("need at least 2 contexts to fit a standardizer")
        return cls(c.mean(axis=0), np.maximum(c.std(axis=0), STD_FLOOR))

    def transform(self, contexts) -> np.ndarray:
        return (np.asarray(contexts, dtype=float) - self.mean) / self.std


def fit_standardizer(contexts) -> tuple[np.ndarray, np.ndarray]:
    s = Standardizer.fit(contexts)
    return s.mean, s.std
