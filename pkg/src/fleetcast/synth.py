"""
Synthetic fleets with known dependence and controllable forecast error.

Site outputs are drawn from a true Gaussian copula with simple marginals.
The emitted quantile forecasts are the true marginal quantiles passed
through a miscalibration operator, so every downstream step can be checked
against ground truth. The synthetic dataset is a regular
:class:`~fleetcast.dataio.DatasetBundle` and can be written with the same
CSV formats as real data.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd
from scipy import stats
from scipy.special import ndtr

from .copula import make_rng, pd_repair
from .dataio import CoverageReport, DatasetBundle

logger = logging.getLogger(__name__)

NREL_LEVELS = np.round(np.arange(1, 100) / 100.0, 2)
FAMILIES = ("uniform", "truncnormal", "diurnal")


# ---------------------------------------------------------------------------
# miscalibration operators
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Identity:
    def factor(self, regime):
        return np.ones_like(regime, dtype=float)

    def shift(self, regime):
        return np.zeros_like(regime, dtype=float)


@dataclass(frozen=True)
class Widen:
    """Scale quantiles about the median by ``f`` (``f < 1`` is overconfident)."""

    f: float

    def factor(self, regime):
        return np.full(regime.shape, float(self.f))

    def shift(self, regime):
        return np.zeros_like(regime, dtype=float)


@dataclass(frozen=True)
class Shift:
    """Add ``delta`` (a fraction of capacity) to every quantile."""

    delta: float

    def factor(self, regime):
        return np.ones_like(regime, dtype=float)

    def shift(self, regime):
        return np.full(regime.shape, float(self.delta))


@dataclass(frozen=True)
class RegimeSwitch:
    """Per-regime spread factors.

    Regime 1 covers local hours in ``[start_hour, end_hour)``, everything else
    is regime 0. ``factors[r]`` widens (or narrows) the forecast in regime
    ``r`` and ``noise[r]`` scales the true spread there. ``centers[r]`` moves
    the typical output level (as a fraction of capacity) for the uniform and
    truncated-normal families, which makes the regimes visible in the lagged
    generation of the context vector.
    """

    factors: tuple = (0.2, 1.2)
    noise: tuple = (1.0, 1.0)
    centers: tuple = (0.25, 0.75)
    start_hour: int = 16
    end_hour: int = 24

    def regime(self, local_hours) -> np.ndarray:
        h = np.asarray(local_hours)
        return ((h >= self.start_hour) & (h < self.end_hour)).astype(int)

    def factor(self, regime):
        return np.asarray(self.factors, dtype=float)[regime]

    def shift(self, regime):
        return np.zeros_like(regime, dtype=float)


# ---------------------------------------------------------------------------
# spec and generation
# ---------------------------------------------------------------------------


@dataclass
class SynthSpec:
    n_sites: int = 3
    corr: np.ndarray | None = None
    families: Sequence[str] = ()
    capacities: Sequence[float] = ()
    miscal: object = field(default_factory=Identity)
    days: int = 60
    seed: int = 0
    start: str = "2019-01-01"
    levels: np.ndarray = field(default_factory=lambda: NREL_LEVELS.copy())
    region: str = "SYN"
    utc_offset: float = 0.0
    system_samples: int = 1000
    with_system: bool = True

    def __post_init__(self):
        n = self.n_sites
        if n < 1:
            raise ValueError("n_sites must be >= 1")
        corr = np.eye(n) if self.corr is None else np.asarray(self.corr, dtype=float)
        if corr.shape != (n, n):
            raise ValueError(f"corr must be {n}x{n}")
        repaired = pd_repair(corr)
        if not np.allclose(repaired, corr, atol=1e-9):
            if np.max(np.abs(repaired - corr)) > 1e-4:
                warnings.warn("true correlation was not a valid correlation matrix; repaired", RuntimeWarning)
        self.corr = repaired
        self.families = tuple(self.families) or ("truncnormal",) * n
        if len(self.families) != n or any(f not in FAMILIES for f in self.families):
            raise ValueError(f"families must list one of {FAMILIES} per site")
        self.capacities = np.asarray(self.capacities if len(self.capacities) else np.full(n, 100.0), dtype=float)
        if self.capacities.shape != (n,) or np.any(self.capacities <= 0):
            raise ValueError("capacities must be positive, one per site")
        self.levels = np.asarray(self.levels, dtype=float)

    @property
    def site_ids(self) -> list:
        return [f"S{i:03d}" for i in range(self.n_sites)]

    @property
    def hours(self) -> pd.DatetimeIndex:
        return pd.date_range(pd.Timestamp(self.start, tz="UTC"), periods=24 * self.days, freq="h")

    def local_hours(self, hours=None) -> np.ndarray:
        hours = self.hours if hours is None else hours
        return ((hours.hour.to_numpy() + self.utc_offset) % 24).astype(int)

    def regimes(self, hours=None) -> np.ndarray:
        lh = self.local_hours(hours)
        if isinstance(self.miscal, RegimeSwitch):
            return self.miscal.regime(lh)
        return np.zeros(lh.shape, dtype=int)


def _base_ppf(family: str, u, noise=1.0, center=0.5):
    """Quantile function on the unit-capacity scale, before the diurnal profile."""
    u = np.asarray(u, dtype=float)
    noise = np.asarray(noise, dtype=float)
    if family == "uniform":
        return np.clip(center + noise * (u - 0.5), 0.0, 1.0)
    if family == "truncnormal":
        loc, scale = np.asarray(center, dtype=float), 0.15
        a, b = (0.0 - loc) / scale, (1.0 - loc) / scale
        q = stats.truncnorm.ppf(u, a, b, loc=loc, scale=scale)
        return np.clip(loc + noise * (q - loc), 0.0, 1.0)
    if family == "diurnal":
        q = stats.beta.ppf(u, 4.0, 2.0)
        med = stats.beta.ppf(0.5, 4.0, 2.0)
        return np.clip(med + noise * (q - med), 0.0, 1.0)
    raise ValueError(f"unknown family {family!r}")


def _profile(family: str, local_hours) -> np.ndarray:
    h = np.asarray(local_hours, dtype=float)
    if family == "diurnal":
        return np.clip(np.sin(np.pi * (h - 6.0) / 12.0), 0.0, None)
    return np.ones(h.shape)


def true_quantiles(spec: SynthSpec, u, hours=None) -> np.ndarray:
    """True marginal quantiles in MW.

    ``u`` has shape (T, N) or (S, T, N) with the last two axes aligned to
    ``hours`` and sites.
    """
    u = np.asarray(u, dtype=float)
    lh = spec.local_hours(hours)
    reg = spec.regimes(hours)
    noise = np.asarray(getattr(spec.miscal, "noise", (1.0, 1.0)), dtype=float)[reg]
    center = np.asarray(getattr(spec.miscal, "centers", (0.5, 0.5)), dtype=float)[reg]
    out = np.empty(u.shape)
    for i, fam in enumerate(spec.families):
        prof = _profile(fam, lh) * spec.capacities[i]
        out[..., i] = prof * _base_ppf(fam, u[..., i], noise, center)
    return out


def forecast_cube(spec: SynthSpec, hours=None) -> np.ndarray:
    """(N, T, K) quantile forecasts after miscalibration."""
    hours = spec.hours if hours is None else hours
    t = len(hours)
    lv = spec.levels
    u = np.broadcast_to(lv[:, None, None], (lv.size, t, spec.n_sites))
    q = true_quantiles(spec, u, hours)  # (K, T, N)
    med = true_quantiles(spec, np.full((t, spec.n_sites), 0.5), hours)  # (T, N)
    reg = spec.regimes(hours)
    f = spec.miscal.factor(reg)[None, :, None]
    d = spec.miscal.shift(reg)[None, :, None] * spec.capacities[None, None, :]
    fc = med[None] + f * (q - med[None]) + d
    fc = np.clip(fc, 0.0, spec.capacities[None, None, :])
    fc = np.maximum.accumulate(fc, axis=0)
    return np.transpose(fc, (2, 1, 0)).copy()


def draw_true(spec: SynthSpec, n_samples: int, seed: int, stream: int, hours) -> np.ndarray:
    """(S, T, N) joint draws from the true distribution."""
    chol = np.linalg.cholesky(spec.corr)
    g = make_rng(seed, stream).standard_normal((n_samples, len(hours), spec.n_sites))
    return true_quantiles(spec, ndtr(g @ chol.T), hours)


@dataclass
class SynthDataset:
    spec: SynthSpec
    bundle: DatasetBundle

    def oracle_samples(self, t_index: int, n_samples: int, seed: int = 12345) -> np.ndarray:
        return oracle_fleet_samples(self.spec, t_index, n_samples, seed)


def generate(spec: SynthSpec) -> SynthDataset:
    """Draw observations and forecasts for ``spec.days`` days."""
    hours = spec.hours
    ids = spec.site_ids
    obs = draw_true(spec, 1, spec.seed, 0, hours)[0].T  # (N, T)
    fc = forecast_cube(spec, hours)
    sites = pd.DataFrame(
        {
            "capacity_mw": spec.capacities,
            "latitude": np.linspace(35.0, 40.0, spec.n_sites),
            "longitude": np.full(spec.n_sites, spec.utc_offset * 15.0),
            "region": spec.region,
            "utc_offset": float(spec.utc_offset),
        },
        index=pd.Index(ids, name="site_id"),
    )
    system, sys_levels = {}, None
    if spec.with_system:
        sys_levels = spec.levels
        system[spec.region] = _system_forecast(spec, fc, hours)
    report = CoverageReport(n_sites=spec.n_sites, n_hours=len(hours))
    bundle = DatasetBundle(sites, hours, obs, spec.levels.copy(), fc, sys_levels, system, report)
    return SynthDataset(spec, bundle)


def _system_forecast(spec: SynthSpec, fc: np.ndarray, hours) -> np.ndarray:
    """Provider-style fleet quantiles: miscalibrated marginals, true copula."""
    from .marginal import QuantilePanel

    s = spec.system_samples
    chol = np.linalg.cholesky(spec.corr)
    rng = make_rng(spec.seed, 1)
    out = np.empty((len(hours), spec.levels.size))
    for t in range(len(hours)):
        u = ndtr(rng.standard_normal((s, spec.n_sites)) @ chol.T)
        panel = QuantilePanel(spec.levels, fc[:, t, :], 0.0, spec.capacities)
        fleet = panel.inv_cdf(u).sum(axis=1)
        out[t] = np.quantile(fleet, spec.levels, method="linear")
    return out


def oracle_fleet_samples(spec: SynthSpec, t_index: int, n_samples: int, seed: int = 12345) -> np.ndarray:
    """Sorted fleet totals drawn directly from the true joint distribution."""
    hours = spec.hours[t_index : t_index + 1]
    draws = draw_true(spec, n_samples, seed, 2, hours)[:, 0, :]
    return np.sort(draws.sum(axis=1))


def oracle_fleet_quantile(spec: SynthSpec, u: float, n_oracle: int = 100_000, t_index: int = 0, seed: int = 12345) -> float:
    if not 0.0 < u < 1.0:
        raise ValueError("u must lie in (0, 1)")
    if n_oracle < 10_000:
        raise ValueError("the oracle needs at least 10^4 samples")
    return float(np.quantile(oracle_fleet_samples(spec, t_index, n_oracle, seed), u, method="linear"))


def equicorrelation(n: int, rho: float) -> np.ndarray:
    c = np.full((n, n), float(rho))
    np.fill_diagonal(c, 1.0)
    return c


def random_correlation(n: int, seed: int) -> np.ndarray:
    """Random valid correlation matrix from a random factor model."""
    rng = make_rng(seed, 99)
    f = rng.standard_normal((n, max(2, n // 2)))
    cov = f @ f.T + np.diag(rng.uniform(0.2, 1.0, n))
    d = np.sqrt(np.diag(cov))
    return cov / np.outer(d, d)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_MISCAL_KINDS = {"identity": Identity, "widen": Widen, "shift": Shift, "regime": RegimeSwitch}


def miscal_to_dict(op) -> dict:
    kind = next(k for k, cls in _MISCAL_KINDS.items() if type(op) is cls)
    params = {k: (list(v) if isinstance(v, tuple) else v) for k, v in op.__dict__.items()}
    return {"kind": kind, **params}


def miscal_from_dict(data: dict):
    data = dict(data)
    kind = data.pop("kind", "identity")
    if kind not in _MISCAL_KINDS:
        raise ValueError(f"unknown miscalibration {kind!r}; expected one of {sorted(_MISCAL_KINDS)}")
    params = {k: (tuple(v) if isinstance(v, list) else v) for k, v in data.items()}
    return _MISCAL_KINDS[kind](**params)


def spec_to_dict(spec: SynthSpec) -> dict:
    return {
        "n_sites": spec.n_sites,
        "corr": spec.corr.tolist(),
        "families": list(spec.families),
        "capacities": spec.capacities.tolist(),
        "miscal": miscal_to_dict(spec.miscal),
        "days": spec.days,
        "seed": spec.seed,
        "start": spec.start,
        "levels": spec.levels.tolist(),
        "region": spec.region,
        "utc_offset": spec.utc_offset,
        "system_samples": spec.system_samples,
        "with_system": spec.with_system,
    }


def spec_from_dict(data: dict) -> SynthSpec:
    data = dict(data)
    if "miscal" in data:
        data["miscal"] = miscal_from_dict(data["miscal"])
    for key in ("corr", "levels"):
        if key in data:
            data[key] = np.asarray(data[key], dtype=float)
    return SynthSpec(**data)
