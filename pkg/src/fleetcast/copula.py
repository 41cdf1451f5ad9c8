"""
Gaussian-copula fitting and Monte Carlo fleet aggregation.

Fitting maps each observation through its own forecast CDF (PIT), turns the
PIT values into normal scores and takes ``Z Z^T / T`` as the copula
correlation. Sampling draws correlated normals, maps them back through the
site inverse CDFs and sums across sites.
"""

from __future__ import annotations

import io
import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd
from scipy.special import ndtr, ndtri

from .marginal import QuantileCurve, QuantilePanel

logger = logging.getLogger(__name__)

PIT_EPS = 1e-6
EIG_FLOOR = 1e-6
DEFAULT_SAMPLES = 2000


class SiteOrderError(ValueError):
    """Raised when curves do not line up with the model's site order."""


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------


@dataclass
class NormalScoreMatrix:
    sites: list
    times: list
    scores: np.ndarray  # (N, T)


@dataclass(frozen=True)
class CorrelationModel:
    sites: tuple
    sigma: np.ndarray
    chol: np.ndarray
    fitted_through: object = None

    def __post_init__(self):
        self.sigma.setflags(write=False)
        self.chol.setflags(write=False)

    @classmethod
    def from_sigma(cls, sites: Sequence, sigma, fitted_through=None) -> "CorrelationModel":
        sigma = pd_repair(np.asarray(sigma, dtype=float))
        return cls(tuple(sites), sigma, np.linalg.cholesky(sigma), fitted_through)

    @classmethod
    def identity(cls, sites: Sequence, fitted_through=None) -> "CorrelationModel":
        n = len(sites)
        return cls(tuple(sites), np.eye(n), np.eye(n), fitted_through)

    def permuted(self, order: Sequence) -> "CorrelationModel":
        """Same model with sites re-ordered to ``order``."""
        idx = [self.sites.index(s) for s in order]
        sigma = self.sigma[np.ix_(idx, idx)].copy()
        return CorrelationModel(tuple(order), sigma, np.linalg.cholesky(sigma), self.fitted_through)

    def to_csv(self, path=None) -> str:
        """Write sigma as CSV with a site-order header row and index column."""
        frame = pd.DataFrame(self.sigma, index=list(self.sites), columns=list(self.sites))
        frame.index.name = "site_id"
        buf = io.StringIO()
        buf.write(f"# fitted_through={self.fitted_through}\n")
        frame.to_csv(buf)
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, path) -> "CorrelationModel":
        with open(path) as fh:
            first = fh.readline().strip()
            fitted = first.split("=", 1)[1] if first.startswith("# fitted_through=") else None
            if fitted in ("None", ""):
                fitted = None
            if not first.startswith("#"):
                fh.seek(0)
            frame = pd.read_csv(fh, index_col=0, dtype={"site_id": str})
        frame.columns = [str(c) for c in frame.columns]
        if list(frame.index.astype(str)) != list(frame.columns):
            raise SiteOrderError("row and column site orders differ in correlation file")
        sigma = frame.to_numpy(dtype=float)
        return cls(tuple(frame.columns), sigma, np.linalg.cholesky(sigma), fitted)


def pit_transform(observations, panel: QuantilePanel, eps: float = PIT_EPS) -> np.ndarray:
    """PIT values ``F_hat(x)`` row by row, clipped to ``[eps, 1 - eps]``.

    ``observations`` has one entry per panel row. NaN observations stay NaN;
    callers drop those columns before fitting.
    """
    x = np.asarray(observations, dtype=float)
    out = np.full(x.shape, np.nan)
    ok = np.isfinite(x)
    if np.any(ok):
        out[ok] = panel.take(np.flatnonzero(ok)).eval_cdf(x[ok])
    return np.clip(out, eps, 1.0 - eps)


def pit_matrix(obs: np.ndarray, panels: Sequence[QuantilePanel], eps: float = PIT_EPS):
    """PIT matrix for N sites over T hours.

    Parameters
    ----------
    obs : array (N, T)
        Realized values, NaN where missing.
    panels : list of N panels with T rows each
        NaN-valued rows mark missing forecasts.

    Returns
    -------
    pit : array (N, K) of the complete columns
    keep : boolean mask (T,) of complete columns
    gaps : list of (site_index, time_index) pairs that were missing
    """
    obs = np.asarray(obs, dtype=float)
    n_sites, n_times = obs.shape
    missing = ~np.isfinite(obs)
    for i, panel in enumerate(panels):
        missing[i] |= ~np.all(np.isfinite(panel.values), axis=1)
    gaps = [tuple(map(int, g)) for g in np.argwhere(missing)]
    keep = ~missing.any(axis=0)
    pit = np.empty((n_sites, int(keep.sum())))
    cols = np.flatnonzero(keep)
    for i, panel in enumerate(panels):
        pit[i] = pit_transform(obs[i, cols], panel.take(cols), eps)
    if gaps:
        logger.info("pit: %d missing (site, hour) cells, %d columns dropped", len(gaps), n_times - keep.sum())
    return pit, keep, gaps


def normal_scores(pit, sites=None, times=None) -> NormalScoreMatrix:
    pit = np.asarray(pit, dtype=float)
    if np.any(pit <= 0.0) or np.any(pit >= 1.0):
        raise ValueError("PIT values must lie strictly inside (0, 1)")
    z = ndtri(pit)
    n, t = np.atleast_2d(z).shape
    return NormalScoreMatrix(
        sites=list(sites) if sites is not None else list(range(n)),
        times=list(times) if times is not None else list(range(t)),
        scores=np.atleast_2d(z),
    )


def pd_repair(matrix, floor: float = EIG_FLOOR) -> np.ndarray:
    """Nearest-ish valid correlation matrix by eigenvalue clipping.

    Eigenvalues are clipped at ``floor``, the matrix is rebuilt and rescaled
    to unit diagonal. Rescaling can push the smallest eigenvalue a hair below
    the floor, so the result is finally shrunk towards the identity by the
    exact amount needed. Valid inputs are returned unchanged.
    """
    a = np.asarray(matrix, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("pd_repair expects a square matrix")
    a = 0.5 * (a + a.T)
    if a.shape[0] == 0:
        return a.copy()
    if np.all(np.diag(a) == 1.0) and np.linalg.eigvalsh(a)[0] >= floor * (1.0 - 1e-9):
        return a.copy()
    vals, vecs = np.linalg.eigh(a)
    vals = np.maximum(vals, floor)
    rebuilt = (vecs * vals) @ vecs.T
    d = np.sqrt(np.diag(rebuilt))
    out = rebuilt / np.outer(d, d)
    out = 0.5 * (out + out.T)
    np.fill_diagonal(out, 1.0)
    lam = np.linalg.eigvalsh(out)[0]
    if lam < floor:
        w = (floor - lam) / (1.0 - lam) * (1.0 + 1e-9)
        out = (1.0 - w) * out
        np.fill_diagonal(out, 1.0)
    return out


def estimate_correlation(scores: NormalScoreMatrix, fitted_through=None) -> CorrelationModel:
    """Fit the Gaussian-copula correlation ``Z Z^T / T`` and make it valid.

    Sites whose scores are constant over time carry no dependence
    information; they are decoupled (zero correlation) with a warning.
    """
    z = np.asarray(scores.scores, dtype=float)
    n, t = z.shape
    if t < 2:
        raise ValueError(f"need at least 2 time points to fit a correlation, got {t}")
    m = (z @ z.T) / t
    constant = np.ptp(z, axis=1) == 0.0
    constant |= np.diag(m) <= 0.0
    if np.any(constant):
        names = [scores.sites[i] for i in np.flatnonzero(constant)]
        warnings.warn(f"zero score variance for sites {names}; decoupled from the copula", RuntimeWarning)
    d = np.sqrt(np.where(constant, 1.0, np.diag(m)))
    corr = m / np.outer(d, d)
    corr[constant, :] = 0.0
    corr[:, constant] = 0.0
    np.fill_diagonal(corr, 1.0)
    sigma = pd_repair(corr)
    return CorrelationModel(tuple(scores.sites), sigma, np.linalg.cholesky(sigma), fitted_through)


def fit_copula(obs: np.ndarray, panels: Sequence[QuantilePanel], sites: Sequence, fitted_through=None):
    """PIT, normal scores and correlation in one step; returns (model, gaps)."""
    pit, keep, gaps = pit_matrix(obs, panels)
    if pit.shape[1] < 2:
        raise ValueError("fewer than 2 complete hours available for correlation fitting")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        model = estimate_correlation(normal_scores(pit, sites=sites), fitted_through)
    return model, gaps


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator for the substream ``(seed, stream)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(stream)])))


def sample_mvn(model: CorrelationModel, n_samples: int, seed: int, stream: int = 0) -> np.ndarray:
    """``n_samples x N`` draws from ``MVN(0, sigma)`` as ``G @ chol.T``."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    g = make_rng(seed, stream).standard_normal((n_samples, len(model.sites)))
    return g @ model.chol.T


@dataclass(frozen=True)
class FleetDistribution:
    timestamp: object
    samples: np.ndarray
    rng_seed: int
    sample_count: int = field(init=False)

    def __post_init__(self):
        s = np.sort(np.asarray(self.samples, dtype=float))
        if s.size < 1:
            raise ValueError("a fleet distribution needs at least one sample")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)
        object.__setattr__(self, "sample_count", s.size)

    def cdf(self, x) -> np.ndarray:
        return np.searchsorted(self.samples, np.asarray(x, dtype=float), side="right") / self.sample_count

    def quantile(self, u):
        return np.quantile(self.samples, u, method="linear")


def _check_order(model: CorrelationModel, sites: Sequence | None):
    if sites is None:
        return
    if tuple(sites) != tuple(model.sites):
        missing = sorted(set(map(str, model.sites)) - set(map(str, sites)))
        extra = sorted(set(map(str, sites)) - set(map(str, model.sites)))
        raise SiteOrderError(
            f"curve sites do not match model order; missing={missing} extra={extra}"
            + ("" if missing or extra else " (same sites, different order)")
        )


def aggregate_panel(
    model: CorrelationModel,
    panel: QuantilePanel,
    n_samples: int = DEFAULT_SAMPLES,
    seed: int = 0,
    stream: int = 0,
    timestamp=None,
    sites: Sequence | None = None,
) -> FleetDistribution:
    """Fleet distribution from a panel holding one row per site."""
    _check_order(model, sites)
    if len(panel) != len(model.sites):
        raise SiteOrderError(f"model has {len(model.sites)} sites but {len(panel)} curves were given")
    z = sample_mvn(model, n_samples, seed, stream)
    u = ndtr(z)
    x = panel.inv_cdf(u)
    return FleetDistribution(timestamp, x.sum(axis=1), seed)


def aggregate(
    model: CorrelationModel,
    curves: Sequence[QuantileCurve],
    n_samples: int = DEFAULT_SAMPLES,
    seed: int = 0,
    stream: int = 0,
) -> FleetDistribution:
    """Fleet distribution from one :class:`QuantileCurve` per site in model order."""
    ids = [c.site_id for c in curves]
    if all(i is not None for i in ids):
        _check_order(model, ids)
    if len(curves) != len(model.sites):
        raise SiteOrderError(f"model has {len(model.sites)} sites but {len(curves)} curves were given")
    z = sample_mvn(model, n_samples, seed, stream)
    u = ndtr(z)
    x = np.column_stack([c.ppf(u[:, i]) for i, c in enumerate(curves)])
    ts = curves[0].timestamp if curves else None
    return FleetDistribution(ts, x.sum(axis=1), seed)


def fleet_interval(dist: FleetDistribution, alpha: float) -> tuple[float, float]:
    """Central ``1 - alpha`` interval from the sorted samples (type-7 quantiles)."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    lo, hi = np.quantile(dist.samples, [alpha / 2.0, 1.0 - alpha / 2.0], method="linear")
    return float(lo), float(max(lo, hi))


def dump_samples(dists: Sequence[FleetDistribution], path) -> None:
    """Audit dump: ``timestamp,sample_index,value``."""
    with open(path, "w", newline="") as fh:
        fh.write("timestamp,sample_index,value\n")
        for d in dists:
            ts = _fmt_ts(d.timestamp)
            for i, v in enumerate(d.samples):
                fh.write(f"{ts},{i},{v!r}\n")


def _fmt_ts(ts) -> str:
    if isinstance(ts, pd.Timestamp):
        return ts.strftime("%Y-%m-%dT%H:%M:%SZ")
    return str(ts)
