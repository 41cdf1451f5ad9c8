"""
Split-conformal calibration of prediction intervals.

Conformity scores follow conformalized quantile regression: the signed
distance of the outcome outside the interval. The correction ``s_hat`` is an
(optionally weighted) upper quantile of the calibration scores and widens or
narrows the raw interval symmetrically. Context-aware calibration weights
every calibration record by an RBF kernel on standardized context vectors.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

PLAIN = "plain"
FINITE_SAMPLE = "finite_sample"
MODES = (PLAIN, FINITE_SAMPLE)

# Relative slack when comparing cumulative mass against 1 - alpha, so that
# e.g. 9 * (1/10) still reaches 0.9.
_MASS_TOL = 1e-9


@dataclass(frozen=True)
class CalibrationRecord:
    timestamp: pd.Timestamp
    lower: float
    upper: float
    realized: float
    context: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def score(self) -> float:
        return conformity_score((self.lower, self.upper), self.realized)


class CalibrationStore:
    """Append-only, time-ordered calibration records.

    Scores and contexts are kept in growing numpy buffers so that snapshots
    (``before(t)``) are cheap array views.
    """

    def __init__(self, context_dim: int = 0):
        self.context_dim = context_dim
        self._times: list[pd.Timestamp] = []
        self._scores: list[float] = []
        self._contexts: list[np.ndarray] = []
        self._intervals: list[tuple[float, float, float]] = []

    def __len__(self):
        return len(self._scores)

    def append(self, record: CalibrationRecord) -> None:
        if self._times and record.timestamp <= self._times[-1]:
            raise ValueError(
                f"calibration records must be appended in time order: {record.timestamp} <= {self._times[-1]}"
            )
        ctx = np.asarray(record.context, dtype=float)
        if ctx.size != self.context_dim:
            raise ValueError(f"context has dimension {ctx.size}, store expects {self.context_dim}")
        self._times.append(record.timestamp)
        self._scores.append(record.score)
        self._contexts.append(ctx)
        self._intervals.append((record.lower, record.upper, record.realized))

    def extend(self, records: Iterable[CalibrationRecord]) -> None:
        for r in records:
            self.append(r)

    @property
    def times(self) -> pd.DatetimeIndex:
        return pd.DatetimeIndex(self._times)

    @property
    def scores(self) -> np.ndarray:
        return np.asarray(self._scores, dtype=float)

    @property
    def contexts(self) -> np.ndarray:
        return np.asarray(self._contexts, dtype=float).reshape(len(self), self.context_dim)

    def before(self, t) -> "CalibrationStore":
        """Frozen snapshot of the records strictly before ``t``."""
        n = int(np.searchsorted(np.asarray(self.times.asi8), pd.Timestamp(t).value, side="left")) if self._times else 0
        out = CalibrationStore(self.context_dim)
        out._times = self._times[:n]
        out._scores = self._scores[:n]
        out._contexts = self._contexts[:n]
        out._intervals = self._intervals[:n]
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["timestamp", "score"] + [f"context_{j}" for j in range(self.context_dim)])
            for t, s, c in zip(self._times, self._scores, self._contexts):
                w.writerow([t.strftime("%Y-%m-%dT%H:%M:%SZ"), repr(float(s))] + [repr(float(v)) for v in c])

    @classmethod
    def from_csv(cls, path) -> "CalibrationStore":
        """Warm restart from a score file.

        Only scores and contexts are persisted, so the restored records carry
        a zero-width interval at ``-score`` with realized value 0; their
        ``score`` is preserved exactly.
        """
        frame = pd.read_csv(path)
        ctx_cols = [c for c in frame.columns if c.startswith("context_")]
        store = cls(len(ctx_cols))
        times = pd.to_datetime(frame["timestamp"], utc=True)
        ctx = frame[ctx_cols].to_numpy(dtype=float)
        for i, t in enumerate(times):
            s = float(frame["score"].iloc[i])
            store.append(CalibrationRecord(t, -s, -s, 0.0, ctx[i]))
        return store


def conformity_score(interval, y) -> float:
    """``max(lo - y, y - hi)``; negative iff ``y`` is strictly inside."""
    lo, hi = interval
    if lo > hi:
        raise ValueError(f"interval lower bound {lo} exceeds upper bound {hi}")
    return max(lo - y, y - hi)


def conformity_scores(lower, upper, realized) -> np.ndarray:
    lower, upper, realized = (np.asarray(a, dtype=float) for a in (lower, upper, realized))
    return np.maximum(lower - realized, realized - upper)


def _rank(n: int, alpha: float, finite_sample: bool) -> int:
    target = (n + 1 if finite_sample else n) * (1.0 - alpha)
    return max(1, math.ceil(target - _MASS_TOL * max(1.0, target)))


def conformal_quantile(scores, alpha: float, mode: str = FINITE_SAMPLE) -> float:
    """Upper ``1 - alpha`` quantile of conformity scores.

    ``plain`` is the inverse empirical CDF: the smallest score whose
    empirical CDF reaches ``1 - alpha`` (the ``ceil(n (1 - alpha))``-th
    smallest). ``finite_sample`` uses rank ``ceil((n + 1)(1 - alpha))``,
    which gives the split-conformal coverage guarantee; if that rank exceeds
    ``n`` the result is ``+inf``.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    s = np.sort(np.asarray(scores, dtype=float))
    n = s.size
    if n == 0:
        raise ValueError("conformal_quantile needs at least one score")
    k = _rank(n, alpha, mode == FINITE_SAMPLE)
    if k > n:
        warnings.warn(
            f"{n} calibration scores are too few for alpha={alpha}; interval expands to the support",
            RuntimeWarning,
        )
        return math.inf
    return float(s[k - 1])


def rbf_weight(c_t, c_tau, gamma: float):
    """``exp(-gamma * ||c_t - c_tau||^2)``.

    ``c_tau`` may be a matrix of contexts (one per row), in which case a
    weight vector is returned. ``gamma = 0`` is accepted as the uniform limit.
    """
    if gamma < 0:
        raise ValueError(f"gamma must be non-negative, got {gamma}")
    a = np.asarray(c_t, dtype=float)
    b = np.asarray(c_tau, dtype=float)
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"context dimensions differ: {a.shape[-1]} vs {b.shape[-1]}")
    d2 = np.sum((a - b) ** 2, axis=-1)
    w = np.exp(-gamma * d2)
    return float(w) if np.ndim(w) == 0 else w


def _target_level(alpha: float, n: int, mode: str) -> float:
    if mode == FINITE_SAMPLE:
        return (1.0 - alpha) * (n + 1) / n
    return 1.0 - alpha


def weighted_conformal_quantile(scores, weights, alpha: float, mode: str = PLAIN) -> float:
    """Weighted upper quantile ``inf{s : sum_{s_i <= s} p_i >= 1 - alpha}``.

    Weights are normalized over the calibration records only; no mass is
    placed at ``+inf`` for the test point. ``finite_sample`` mode inflates
    the target level to ``(1 - alpha)(n + 1)/n``, which for uniform weights
    is the rank ``ceil((n + 1)(1 - alpha))`` of :func:`conformal_quantile`.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    s = np.asarray(scores, dtype=float)
    w = np.asarray(weights, dtype=float)
    if s.shape != w.shape or s.ndim != 1 or s.size == 0:
        raise ValueError("scores and weights must be non-empty 1-d arrays of equal length")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and non-negative")
    if not np.any(w > 0):
        warnings.warn("all calibration weights are zero; falling back to uniform weights", RuntimeWarning)
        w = np.ones_like(s)
    if np.all(w == w[0]):
        return conformal_quantile(s, alpha, mode)
    order = np.argsort(s, kind="stable")
    s_sorted = s[order]
    cum = np.cumsum(w[order] / w.sum())
    target = _target_level(alpha, s.size, mode)
    k = int(np.searchsorted(cum, target * (1.0 - _MASS_TOL), side="left"))
    if k >= s.size:
        warnings.warn("weighted calibration mass too small for alpha; interval expands to the support", RuntimeWarning)
        return math.inf
    return float(s_sorted[k])


def weighted_conformal_quantiles(scores, weights, alpha: float, mode: str = PLAIN) -> np.ndarray:
    """Row-wise :func:`weighted_conformal_quantile` for a weight matrix (M, n)."""
    s = np.asarray(scores, dtype=float)
    w = np.atleast_2d(np.asarray(weights, dtype=float))
    out = np.empty(w.shape[0])
    order = np.argsort(s, kind="stable")
    s_sorted = s[order]
    ws = w[:, order]
    uniform = np.all(w == w[:, :1], axis=1) | ~np.any(w > 0, axis=1)
    if np.any(uniform):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            out[uniform] = conformal_quantile(s, alpha, mode)
    rest = np.flatnonzero(~uniform)
    if rest.size:
        wr = ws[rest]
        cum = np.cumsum(wr / wr.sum(axis=1, keepdims=True), axis=1)
        target = _target_level(alpha, s.size, mode) * (1.0 - _MASS_TOL)
        k = (cum < target).sum(axis=1)
        vals = np.full(rest.size, math.inf)
        ok = k < s.size
        vals[ok] = s_sorted[k[ok]]
        out[rest] = vals
    return out


def calibrate_interval(raw, s_hat: float, support=(0.0, math.inf)) -> tuple[float, float]:
    """Expand (or contract) ``raw`` by ``s_hat`` on both sides and clip.

    A contraction larger than half the width collapses the interval onto
    its midpoint; ``s_hat = +inf`` returns the full support.
    """
    lo, hi = raw
    if lo > hi:
        raise ValueError(f"interval lower bound {lo} exceeds upper bound {hi}")
    s_lo, s_hi = support
    if math.isinf(s_hat) and s_hat > 0:
        return float(s_lo), float(s_hi)
    if s_hat < -(hi - lo) / 2.0:
        mid = 0.5 * (lo + hi)
        new_lo = new_hi = mid
    else:
        new_lo, new_hi = lo - s_hat, hi + s_hat
    new_lo = min(max(new_lo, s_lo), s_hi)
    new_hi = min(max(new_hi, s_lo), s_hi)
    return float(new_lo), float(new_hi)


def calibrate_intervals(lower, upper, s_hat, support=(0.0, math.inf)):
    """Vectorized :func:`calibrate_interval`; ``s_hat`` may be scalar or per row."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    s = np.broadcast_to(np.asarray(s_hat, dtype=float), lower.shape)
    s_lo, s_hi = support
    mid = 0.5 * (lower + upper)
    collapse = s < -(upper - lower) / 2.0
    new_lo = np.where(collapse, mid, lower - s)
    new_hi = np.where(collapse, mid, upper + s)
    full = np.isposinf(s)
    new_lo = np.where(full, s_lo, new_lo)
    new_hi = np.where(full, s_hi, new_hi)
    return np.clip(new_lo, s_lo, s_hi), np.clip(new_hi, s_lo, s_hi)


def cqr_calibrate(raw, store: CalibrationStore, alpha: float, mode: str = FINITE_SAMPLE, support=(0.0, math.inf)):
    s_hat = conformal_quantile(store.scores, alpha, mode)
    return calibrate_interval(raw, s_hat, support)


def cacp_calibrate(
    raw,
    c_t,
    store: CalibrationStore,
    gamma: float,
    alpha: float,
    mode: str = FINITE_SAMPLE,
    support=(0.0, math.inf),
):
    """Context-aware calibration of one raw interval.

    ``c_t`` and the store's contexts must already be on a common scale
    (see :class:`fleetcast.context.Standardizer`).
    """
    if len(store) == 0:
        raise ValueError("calibration store is empty")
    w = rbf_weight(c_t, store.contexts, gamma)
    s_hat = weighted_conformal_quantile(store.scores, np.atleast_1d(w), alpha, mode)
    return calibrate_interval(raw, s_hat, support)


def sq_distances(a, b) -> np.ndarray:
    """Pairwise squared Euclidean distances between the rows of ``a`` and ``b``."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    d2 = np.sum(a**2, axis=1)[:, None] + np.sum(b**2, axis=1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d2, 0.0)


def select_gamma(
    gammas: Sequence[float],
    d2,
    cal_scores,
    val_lower,
    val_upper,
    val_realized,
    alpha: float,
    mode: str = FINITE_SAMPLE,
    support=(0.0, math.inf),
) -> tuple[float, dict]:
    """Grid search for the kernel width minimizing validation Winkler score.

    ``d2`` holds squared context distances, validation hours by calibration
    records. Ties go to the earlier grid entry. Returns
    ``(best_gamma, {gamma: mean_winkler})``.
    """
    from .metrics import winkler_scores

    table = {}
    best, best_ws = gammas[0], math.inf
    for g in gammas:
        s_hat = weighted_conformal_quantiles(cal_scores, np.exp(-g * d2), alpha, mode)
        lo, hi = calibrate_intervals(val_lower, val_upper, s_hat, support)
        ws = float(np.mean(winkler_scores(lo, hi, val_realized, alpha)))
        table[g] = ws
        if ws < best_ws:
            best, best_ws = g, ws
    return best, table
