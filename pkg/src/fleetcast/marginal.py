"""
Marginal predictive distributions in quantile form.

A site's forecast for one hour is a set of (level, value) knots. The CDF is
piecewise linear between knots and is extended linearly down to
``(support_lo, 0)`` and up to ``(support_hi, 1)`` so that the inverse is
single valued everywhere on ``[0, 1]``.

:class:`QuantileCurve` is the scalar representation used by the public API;
:class:`QuantilePanel` holds many curves that share one level grid (one row
per hour, or one row per site) and evaluates them in a vectorized way with
exactly the same semantics.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)


class CurveError(ValueError):
    """Raised when raw quantile knots cannot form a valid curve."""


@dataclass(frozen=True)
class QuantileCurve:
    """Immutable marginal predictive CDF stored as sorted quantile knots."""

    levels: np.ndarray
    values: np.ndarray
    support_lo: float = 0.0
    support_hi: float = 1.0
    site_id: str | None = None
    timestamp: object = None
    repaired: bool = field(default=False, compare=False)

    def __post_init__(self):
        levels = np.asarray(self.levels, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if levels.ndim != 1 or levels.shape != values.shape or levels.size == 0:
            raise CurveError("levels and values must be non-empty 1-d arrays of equal length")
        if np.any(levels <= 0.0) or np.any(levels >= 1.0):
            raise CurveError("quantile levels must lie strictly inside (0, 1)")
        if np.any(np.diff(levels) <= 0.0):
            raise CurveError("quantile levels must be strictly increasing")
        if np.any(np.diff(values) < 0.0):
            raise CurveError("quantile values must be non-decreasing")
        if self.support_lo < 0.0:
            raise CurveError(f"support_lo must be >= 0, got {self.support_lo}")
        if not self.support_lo <= values[0] or not values[-1] <= self.support_hi:
            raise CurveError(
                f"knot values [{values[0]}, {values[-1]}] fall outside support "
                f"[{self.support_lo}, {self.support_hi}]"
            )
        levels.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "values", values)

    @property
    def knot_x(self) -> np.ndarray:
        """Values augmented with both supports."""
        return np.concatenate(([self.support_lo], self.values, [self.support_hi]))

    @property
    def knot_p(self) -> np.ndarray:
        """Levels augmented with 0 and 1."""
        return np.concatenate(([0.0], self.levels, [1.0]))

    def cdf(self, x):
        return eval_cdf(self, x)

    def ppf(self, u):
        return inv_cdf(self, u)


def _cdf_on_knots(xs: np.ndarray, ps: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Piecewise-linear CDF through augmented knots, with the tie rule.

    ``xs`` is non-decreasing, ``ps`` strictly increasing from 0 to 1. Where
    ``x`` equals one or more knot values the result is the midpoint of the
    level range attached to that value.
    """
    x = np.asarray(x, dtype=float)
    left = np.searchsorted(xs, x, side="left")
    right = np.searchsorted(xs, x, side="right")
    out = np.empty(x.shape, dtype=float)

    below = right == 0
    above = left == xs.size
    tie = (right > left) & ~below & ~above
    between = ~(below | above | tie)

    out[below] = 0.0
    out[above] = 1.0
    out[tie] = 0.5 * (ps[left[tie]] + ps[right[tie] - 1])
    if np.any(between):
        i = left[between]
        x0, x1 = xs[i - 1], xs[i]
        p0, p1 = ps[i - 1], ps[i]
        out[between] = p0 + (p1 - p0) * (x[between] - x0) / (x1 - x0)
    return out


def eval_cdf(curve: QuantileCurve, x):
    """Evaluate the forecast CDF at ``x`` (scalar or array)."""
    out = _cdf_on_knots(curve.knot_x, curve.knot_p, np.atleast_1d(x))
    return float(out[0]) if np.ndim(x) == 0 else out.reshape(np.shape(x))


def inv_cdf(curve: QuantileCurve, u):
    """Inverse of :func:`eval_cdf`; ``u=0`` gives support_lo, ``u=1`` support_hi."""
    u_arr = np.asarray(u, dtype=float)
    if np.any(u_arr < 0.0) or np.any(u_arr > 1.0):
        raise ValueError("probabilities must lie in [0, 1]")
    out = np.interp(u_arr, curve.knot_p, curve.knot_x)
    return float(out) if np.ndim(u) == 0 else out


def validate_and_repair(
    knots: Iterable[tuple[float, float]],
    support_lo: float = 0.0,
    support_hi: float | None = None,
    site_id: str | None = None,
    timestamp=None,
) -> QuantileCurve:
    """Build a :class:`QuantileCurve` from raw ``(level, value)`` pairs.

    Knots are sorted by level and crossing quantiles are repaired with a
    running maximum. Values outside the supports are clipped onto them. Any
    change to the values sets ``repaired=True`` on the result.

    Raises
    ------
    CurveError
        If there are no knots, a level lies outside (0, 1) or a level is
        duplicated.
    """
    pairs = [(float(level), float(value)) for level, value in knots]
    if not pairs:
        raise CurveError("cannot build a quantile curve from an empty knot list")
    arr = np.array(sorted(pairs), dtype=float)
    levels, values = arr[:, 0], arr[:, 1]
    bad = (levels <= 0.0) | (levels >= 1.0) | ~np.isfinite(levels)
    if np.any(bad):
        raise CurveError(f"levels outside (0, 1): {levels[bad].tolist()}")
    if np.any(np.diff(levels) == 0.0):
        raise CurveError("duplicate quantile levels")
    if not np.all(np.isfinite(values)):
        raise CurveError("non-finite quantile values")
    if support_hi is None:
        support_hi = max(float(values.max()), support_lo)
    fixed = _repair_values(values[None, :], support_lo, support_hi)[0]
    repaired = bool(np.any(fixed != values))
    return QuantileCurve(
        levels=levels,
        values=fixed,
        support_lo=float(support_lo),
        support_hi=float(support_hi),
        site_id=site_id,
        timestamp=timestamp,
        repaired=repaired,
    )


def _repair_values(values: np.ndarray, lo, hi) -> np.ndarray:
    lo = np.broadcast_to(np.asarray(lo, dtype=float), values.shape[:1])[:, None]
    hi = np.broadcast_to(np.asarray(hi, dtype=float), values.shape[:1])[:, None]
    fixed = np.maximum.accumulate(values, axis=1)
    return np.clip(fixed, lo, hi)


class QuantilePanel:
    """Many quantile curves sharing one level grid.

    Parameters
    ----------
    levels : array of shape (K,)
        Strictly increasing levels in (0, 1).
    values : array of shape (R, K)
        One curve per row. Rows are repaired on construction.
    support_lo, support_hi : float or array of shape (R,)
        Per-row supports.
    """

    def __init__(self, levels, values, support_lo, support_hi):
        levels = np.asarray(levels, dtype=float)
        values = np.atleast_2d(np.asarray(values, dtype=float))
        if values.shape[1] != levels.size:
            raise CurveError("values must have one column per level")
        if np.any(levels <= 0.0) or np.any(levels >= 1.0) or np.any(np.diff(levels) <= 0.0):
            raise CurveError("levels must be strictly increasing inside (0, 1)")
        rows = values.shape[0]
        self.levels = levels
        self.support_lo = np.broadcast_to(np.asarray(support_lo, dtype=float), (rows,)).copy()
        self.support_hi = np.broadcast_to(np.asarray(support_hi, dtype=float), (rows,)).copy()
        if np.any(self.support_lo < 0.0) or np.any(self.support_hi < self.support_lo):
            raise CurveError("supports must satisfy 0 <= lo <= hi")
        fixed = _repair_values(values, self.support_lo, self.support_hi)
        self.repaired = np.any(fixed != values, axis=1)
        self.values = fixed
        self.knot_p = np.concatenate(([0.0], levels, [1.0]))
        self.knot_x = np.column_stack((self.support_lo, fixed, self.support_hi))

    def __len__(self):
        return self.values.shape[0]

    def row(self, r: int, site_id=None, timestamp=None) -> QuantileCurve:
        return QuantileCurve(
            levels=self.levels,
            values=self.values[r],
            support_lo=float(self.support_lo[r]),
            support_hi=float(self.support_hi[r]),
            site_id=site_id,
            timestamp=timestamp,
            repaired=bool(self.repaired[r]),
        )

    def take(self, rows: Sequence[int]) -> "QuantilePanel":
        rows = np.asarray(rows, dtype=int)
        out = QuantilePanel.__new__(QuantilePanel)
        out.levels = self.levels
        out.support_lo = self.support_lo[rows]
        out.support_hi = self.support_hi[rows]
        out.repaired = self.repaired[rows]
        out.values = self.values[rows]
        out.knot_p = self.knot_p
        out.knot_x = self.knot_x[rows]
        return out

    def eval_cdf(self, x) -> np.ndarray:
        """Row-wise CDF: ``x[r]`` is evaluated under curve ``r``."""
        x = np.asarray(x, dtype=float)
        xs, ps = self.knot_x, self.knot_p
        left = (xs < x[:, None]).sum(axis=1)
        right = (xs <= x[:, None]).sum(axis=1)
        n = xs.shape[1]
        rows = np.arange(xs.shape[0])
        out = np.empty(x.shape, dtype=float)

        below = right == 0
        above = left == n
        tie = (right > left) & ~below & ~above
        between = ~(below | above | tie)
        out[below] = 0.0
        out[above] = 1.0
        out[tie] = 0.5 * (ps[left[tie]] + ps[right[tie] - 1])
        if np.any(between):
            r, i = rows[between], left[between]
            x0, x1 = xs[r, i - 1], xs[r, i]
            p0, p1 = ps[i - 1], ps[i]
            out[between] = p0 + (p1 - p0) * (x[between] - x0) / (x1 - x0)
        return out

    def inv_cdf(self, u) -> np.ndarray:
        """Inverse CDF.

        ``u`` has shape (S, R): column ``r`` is mapped through curve ``r``.
        Returns an array of the same shape.
        """
        u = np.asarray(u, dtype=float)
        ps = self.knot_p
        # Segment index j such that ps[j] <= u <= ps[j+1].
        j = np.clip(np.searchsorted(ps, u, side="right") - 1, 0, ps.size - 2)
        p0, p1 = ps[j], ps[j + 1]
        cols = np.broadcast_to(np.arange(u.shape[-1]), u.shape)
        x0 = self.knot_x[cols, j]
        x1 = self.knot_x[cols, j + 1]
        out = x0 + (x1 - x0) * (u - p0) / (p1 - p0)
        return np.where(u >= 1.0, x1, out)

    def quantile(self, u: float) -> np.ndarray:
        """Value of every row at a single probability level."""
        return self.inv_cdf(np.full((1, len(self)), float(u)))[0]
