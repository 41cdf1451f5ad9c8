"""
Rolling day-ahead evaluation of fleet interval forecasts.

For every test day the run refits the copula at month boundaries, rebuilds
the calibration pools from earlier days, picks the kernel width on the
validation week and issues intervals for the 24 hours of the day. All
history is read through :class:`HistoryView`, which refuses observations at
or after the test day and forecasts beyond it.
"""

from __future__ import annotations

import logging
import math
import sys
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np
import pandas as pd

from .conformal import (
    FINITE_SAMPLE,
    MODES,
    calibrate_intervals,
    conformal_quantile,
    conformity_scores,
    select_gamma,
    sq_distances,
    weighted_conformal_quantiles,
)
from .context import Standardizer, build_contexts, context_dim, sunrise_table
from .copula import CorrelationModel, aggregate_panel, fit_copula
from .dataio import DatasetBundle, select_region
from .marginal import QuantilePanel
from .metrics import IntervalSeries, MetricReport, covered, daylight_mask, evaluate, normalize_by_capacity

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger(__name__)

SYSTEM_RAW = "SYSTEM_RAW"
SYSTEM_CQR = "SYSTEM_CQR"
SYSTEM_CACP = "SYSTEM_CACP"
COPULA = "COPULA"
COPULA_CQR = "COPULA_CQR"
COPULA_CACP = "COPULA_CACP"
METHODS = (SYSTEM_RAW, SYSTEM_CQR, SYSTEM_CACP, COPULA, COPULA_CQR, COPULA_CACP)
_FAMILY = {
    SYSTEM_RAW: "system",
    SYSTEM_CQR: "system",
    SYSTEM_CACP: "system",
    COPULA: "copula",
    COPULA_CQR: "copula",
    COPULA_CACP: "copula",
}


class LookAheadError(RuntimeError):
    """Raised when a test day tries to read data it could not have had."""


@dataclass
class ProtocolConfig:
    warmup_months: int = 6
    warmup_days: int | None = None
    validation_days: int = 7
    alphas: tuple = (0.1, 0.2, 0.3, 0.4)
    n_samples: int = 2000
    lags: int = 3
    gamma_grid: tuple = (0.01, 0.05, 0.1, 0.5, 1.0, 5.0)
    seed: int = 0
    methods: tuple = METHODS
    conformal_mode: str = FINITE_SAMPLE
    merge_validation: bool = False
    correlation: str = "fitted"
    correlation_window_days: int | None = None
    daylight_only: bool = False
    regions: tuple | None = None

    def __post_init__(self):
        self.alphas = tuple(float(a) for a in self.alphas)
        self.gamma_grid = tuple(float(g) for g in self.gamma_grid)
        self.methods = tuple(self.methods)
        if self.regions is not None:
            self.regions = tuple(self.regions)
        if not self.alphas or any(not 0.0 < a < 1.0 for a in self.alphas):
            raise ValueError(f"alpha levels must lie in (0, 1): {self.alphas}")
        if not self.gamma_grid or any(g < 0 for g in self.gamma_grid):
            raise ValueError("gamma grid must be non-empty and non-negative")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ValueError(f"unknown methods {unknown}; choose from {METHODS}")
        if self.conformal_mode not in MODES:
            raise ValueError(f"conformal_mode must be one of {MODES}")
        if self.correlation not in ("fitted", "identity"):
            raise ValueError("correlation must be 'fitted' or 'identity'")
        if self.validation_days < 1:
            raise ValueError("validation_days must be >= 1")
        if self.n_samples < 1 or self.lags < 1:
            raise ValueError("n_samples and lags must be >= 1")
        if self.warmup_days is not None and self.warmup_days <= self.validation_days:
            raise ValueError("the warm-up period must be longer than the validation window")

    @classmethod
    def from_dict(cls, data: dict) -> "ProtocolConfig":
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        return cls(**data)

    @classmethod
    def from_toml(cls, path) -> "ProtocolConfig":
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
        return cls.from_dict(data.get("protocol", data))

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


class HistoryView:
    """Read-only access to a bundle as of the start of one test day.

    Observations are visible strictly before ``cutoff``; forecasts are
    visible up to the end of the test day (they are issued day ahead).
    """

    def __init__(self, bundle: DatasetBundle, cutoff: int):
        self._b = bundle
        self.cutoff = int(cutoff)
        self.forecast_end = self.cutoff + 24

    def _check_obs(self, stop):
        if stop > self.cutoff:
            raise LookAheadError(f"observation access up to hour {stop} past cutoff {self.cutoff}")

    def _check_fc(self, stop):
        if stop > self.forecast_end:
            raise LookAheadError(f"forecast access up to hour {stop} past {self.forecast_end}")

    def site_obs(self, start: int, stop: int) -> np.ndarray:
        self._check_obs(stop)
        return self._b.obs[:, start:stop]

    def fleet(self, start: int, stop: int) -> np.ndarray:
        return self.site_obs(start, stop).sum(axis=0)

    def fleet_series(self) -> pd.Series:
        return pd.Series(self.fleet(0, self.cutoff), index=self._b.hours[: self.cutoff])

    def site_forecasts(self, i: int, start: int, stop: int) -> np.ndarray:
        self._check_fc(stop)
        return self._b.forecasts[i, start:stop]

    def hour_forecasts(self, t: int) -> np.ndarray:
        self._check_fc(t + 1)
        return self._b.forecasts[:, t, :]

    def system_forecasts(self, region: str, start: int, stop: int) -> np.ndarray | None:
        self._check_fc(stop)
        if region not in self._b.system:
            return None
        return self._b.system[region][start:stop]


@dataclass
class RegionResult:
    region: str
    capacity: float
    utc_offset: float
    intervals: pd.DataFrame
    reports: dict
    gammas: pd.DataFrame
    site_hourly: pd.DataFrame
    skipped: list = field(default_factory=list)
    refits: list = field(default_factory=list)


@dataclass
class BacktestResult:
    config: ProtocolConfig
    regions: dict

    @property
    def reports(self) -> dict:
        out = {}
        for name, res in self.regions.items():
            for (method, alpha), rep in res.reports.items():
                out[(name, method, alpha)] = rep
        return out


def _test_days(hours: pd.DatetimeIndex, config: ProtocolConfig) -> tuple[pd.Timestamp, list]:
    start = hours[0].normalize()
    if hours[0] != start:
        start = start + pd.Timedelta(days=1)
    if config.warmup_days is not None:
        first = start + pd.Timedelta(days=config.warmup_days)
    else:
        first = start + pd.DateOffset(months=config.warmup_months)
    if first - pd.Timedelta(days=config.validation_days) <= hours[0]:
        raise ValueError("warm-up period does not leave room for the validation window")
    last_full = (hours[-1] + pd.Timedelta(hours=1)).normalize()
    days = list(pd.date_range(first, last_full - pd.Timedelta(days=1), freq="D"))
    return first, days


class _RegionRun:
    def __init__(self, bundle: DatasetBundle, region: str, config: ProtocolConfig):
        self.b = bundle
        self.region = region
        self.cfg = config
        self.hours = bundle.hours
        self.T = len(self.hours)
        self.N = len(bundle.site_ids)
        self.caps = bundle.capacities
        self.capacity = float(self.caps.sum())
        self.support = (0.0, self.capacity)
        self.offset = bundle.utc_offset()
        self.na = len(config.alphas)
        self.families = sorted({_FAMILY[m] for m in config.methods})
        if "system" in self.families and region not in bundle.system:
            logger.warning("region %s: no system-level forecasts; SYSTEM_* methods skipped", region)
            self.families.remove("system")
        self.raw = {f: np.full((self.T, self.na, 2), np.nan) for f in self.families}
        self.raw_filled = {f: 0 for f in self.families}
        self.ctx = np.full((self.T, context_dim(config.lags)), np.nan)
        self.ctx_filled = 0
        self.model: CorrelationModel | None = None
        self.model_month = None
        self.refits = []
        self.skipped = []
        self.rows = []
        self.gamma_rows = []

    # -- per-hour pieces, each computed once through the day's view ---------

    def _stream(self, t: int) -> int:
        return int(self.hours[t].value // 3_600_000_000_000)

    def _fill_raw(self, view: HistoryView, stop: int):
        alphas = self.cfg.alphas
        lo_q = [a / 2.0 for a in alphas]
        hi_q = [1.0 - a / 2.0 for a in alphas]
        if "copula" in self.families:
            start = self.raw_filled["copula"]
            for t in range(start, stop):
                fc = view.hour_forecasts(t)
                if not np.all(np.isfinite(fc)):
                    continue
                panel = QuantilePanel(self.b.levels, fc, 0.0, self.caps)
                dist = aggregate_panel(self.model, panel, self.cfg.n_samples, self.cfg.seed, self._stream(t))
                q = np.quantile(dist.samples, lo_q + hi_q, method="linear")
                self.raw["copula"][t, :, 0] = q[: self.na]
                self.raw["copula"][t, :, 1] = np.maximum(q[: self.na], q[self.na :])
            self.raw_filled["copula"] = max(start, stop)
        if "system" in self.families:
            start = self.raw_filled["system"]
            if stop > start:
                vals = view.system_forecasts(self.region, start, stop)
                ok = np.all(np.isfinite(vals), axis=1)
                if ok.any():
                    panel = QuantilePanel(self.b.system_levels, vals[ok], 0.0, self.capacity)
                    q = np.column_stack([panel.quantile(p) for p in lo_q + hi_q])
                    idx = start + np.flatnonzero(ok)
                    self.raw["system"][idx, :, 0] = q[:, : self.na]
                    self.raw["system"][idx, :, 1] = q[:, self.na :]
                self.raw_filled["system"] = stop

    def _fill_contexts(self, view: HistoryView, stop: int):
        start = self.ctx_filled
        if stop <= start:
            return
        fleet = view.fleet_series()
        table = sunrise_table(fleet, self.offset)
        self.ctx[start:stop] = build_contexts(
            fleet, self.hours[start:stop], self.cfg.lags, table, self.capacity, self.offset
        )
        self.ctx_filled = stop

    def _refit(self, view: HistoryView, day: pd.Timestamp):
        cutoff = view.cutoff
        start = 0
        if self.cfg.correlation_window_days is not None:
            start = max(0, cutoff - 24 * self.cfg.correlation_window_days)
        if self.cfg.correlation == "identity":
            self.model = CorrelationModel.identity(self.b.site_ids, fitted_through=str(self.hours[cutoff - 1]))
        else:
            obs = view.site_obs(start, cutoff)
            panels = [QuantilePanel(self.b.levels, view.site_forecasts(i, start, cutoff), 0.0, self.caps[i]) for i in range(self.N)]
            self.model, gaps = fit_copula(obs, panels, self.b.site_ids, fitted_through=str(self.hours[cutoff - 1]))
        self.model_month = (day.year, day.month)
        self.refits.append(str(day.date()))
        logger.info("region %s: correlation refit on %s", self.region, day.date())

    # -- main loop ----------------------------------------------------------

    def run(self, days: Sequence[pd.Timestamp]):
        cfg = self.cfg
        hour_index = {h: i for i, h in enumerate(self.hours)}
        v_hours = 24 * cfg.validation_days
        for day in days:
            d0 = hour_index.get(day)
            if d0 is None or d0 + 24 > self.T:
                continue
            view = HistoryView(self.b, d0)
            if "copula" in self.families and self.model_month != (day.year, day.month):
                try:
                    self._refit(view, day)
                except (ValueError, np.linalg.LinAlgError) as exc:
                    logger.error("region %s: correlation fit failed on %s: %s", self.region, day.date(), exc)
                    if self.model is None:
                        self.skipped.append((str(day.date()), "copula", f"fit failed: {exc}"))
                        continue
            self._fill_raw(view, d0 + 24)
            self._fill_contexts(view, d0 + 24)
            y_hist = view.fleet(0, d0)

            test = np.arange(d0, d0 + 24)
            ctx_ok = np.all(np.isfinite(self.ctx[:d0]), axis=1)
            y_ok = np.isfinite(y_hist)
            sel_end = d0 - v_hours
            ctx_test = self.ctx[test]

            for fam in self.families:
                raw = self.raw[fam]
                raw_ok = np.all(np.isfinite(raw[:d0]), axis=(1, 2))
                valid = raw_ok & ctx_ok & y_ok
                sel = np.flatnonzero(valid[: max(sel_end, 0)])
                val = sel_end + np.flatnonzero(valid[sel_end:d0]) if sel_end > 0 else np.array([], dtype=int)
                final = np.flatnonzero(valid) if cfg.merge_validation else sel
                test_ok = np.all(np.isfinite(raw[test]), axis=(1, 2))
                if not test_ok.all():
                    for m in self._methods(fam):
                        self.skipped.append((str(day.date()), m, "missing forecasts"))
                    continue
                self._issue_day(day, fam, raw, test, y_hist, sel, val, final, ctx_test)

    def _methods(self, fam):
        return [m for m in self.cfg.methods if _FAMILY[m] == fam]

    def _issue_day(self, day, fam, raw, test, y_hist, sel, val, final, ctx_test):
        cfg = self.cfg
        methods = self._methods(fam)
        raw_name, cqr_name, cacp_name = (
            (SYSTEM_RAW, SYSTEM_CQR, SYSTEM_CACP) if fam == "system" else (COPULA, COPULA_CQR, COPULA_CACP)
        )
        need_cal = cqr_name in methods or cacp_name in methods
        if need_cal and final.size == 0:
            for m in (cqr_name, cacp_name):
                if m in methods:
                    self.skipped.append((str(day.date()), m, "empty calibration pool"))
            need_cal = False
            methods = [m for m in methods if m == raw_name]

        d2_test = d2_val = None
        if cacp_name in methods:
            std_fin = Standardizer.fit(self.ctx[final]) if final.size >= 2 else None
            if std_fin is not None:
                c_t = std_fin.transform(ctx_test)
                d2_test = sq_distances(c_t, std_fin.transform(self.ctx[final]))
                bad = ~np.all(np.isfinite(c_t), axis=1)
                d2_test[bad] = 0.0
            grid = list(cfg.gamma_grid)
            if len(grid) > 1 and sel.size >= 2 and val.size > 0:
                std_sel = Standardizer.fit(self.ctx[sel])
                d2_val = sq_distances(std_sel.transform(self.ctx[val]), std_sel.transform(self.ctx[sel]))

        for a_i, alpha in enumerate(cfg.alphas):
            lo_t, hi_t = raw[test, a_i, 0], raw[test, a_i, 1]
            if raw_name in methods:
                self._emit(day, raw_name, alpha, test, lo_t, hi_t)
            if not need_cal:
                continue
            scores = conformity_scores(raw[final, a_i, 0], raw[final, a_i, 1], y_hist[final])
            if cqr_name in methods:
                s_hat = conformal_quantile(scores, alpha, cfg.conformal_mode)
                lo, hi = calibrate_intervals(lo_t, hi_t, s_hat, self.support)
                self._emit(day, cqr_name, alpha, test, lo, hi)
            if cacp_name in methods:
                gamma = cfg.gamma_grid[0]
                table = {}
                if d2_val is not None:
                    sel_scores = conformity_scores(raw[sel, a_i, 0], raw[sel, a_i, 1], y_hist[sel])
                    gamma, table = select_gamma(
                        cfg.gamma_grid,
                        d2_val,
                        sel_scores,
                        raw[val, a_i, 0],
                        raw[val, a_i, 1],
                        y_hist[val],
                        alpha,
                        cfg.conformal_mode,
                        self.support,
                    )
                if d2_test is None:
                    w = np.ones((test.size, final.size))
                else:
                    w = np.exp(-gamma * d2_test)
                s_hat = weighted_conformal_quantiles(scores, w, alpha, cfg.conformal_mode)
                lo, hi = calibrate_intervals(lo_t, hi_t, s_hat, self.support)
                self._emit(day, cacp_name, alpha, test, lo, hi)
                self.gamma_rows.append(
                    {
                        "region": self.region,
                        "day": str(day.date()),
                        "method": cacp_name,
                        "level": round(1.0 - alpha, 10),
                        "gamma": gamma,
                        "validation_ws": table.get(gamma, math.nan),
                    }
                )

    def _emit(self, day, method, alpha, test, lo, hi):
        for j, t in enumerate(test):
            self.rows.append((t, method, alpha, float(lo[j]), float(hi[j])))

    # -- scoring ------------------------------------------------------------

    def results(self) -> RegionResult:
        cfg = self.cfg
        fleet = self.b.fleet_obs()
        cols = ["hour", "method", "alpha", "lower", "upper"]
        frame = pd.DataFrame(self.rows, columns=cols)
        frame["timestamp"] = self.hours[frame["hour"].to_numpy(dtype=int)]
        frame["realized"] = fleet[frame["hour"].to_numpy(dtype=int)]
        frame["level"] = np.round(1.0 - frame["alpha"], 10)
        frame.insert(0, "region", self.region)
        frame = frame.sort_values(["method", "alpha", "hour"], kind="stable").reset_index(drop=True)

        reports = {}
        for (method, alpha), grp in frame.groupby(["method", "alpha"], sort=True):
            grp = grp[np.isfinite(grp["realized"].to_numpy())]
            if grp.empty:
                continue
            series = IntervalSeries(alpha, grp["timestamp"], grp["lower"], grp["upper"], grp["realized"])
            series = normalize_by_capacity(series, self.capacity)
            if cfg.daylight_only:
                series = series.subset(daylight_mask(series))
                if len(series) == 0:
                    continue
            reports[(method, alpha)] = evaluate(series, self.offset)

        out = frame[["region", "timestamp", "method", "level", "lower", "upper", "realized"]].copy()
        gammas = pd.DataFrame(self.gamma_rows, columns=["region", "day", "method", "level", "gamma", "validation_ws"])
        return RegionResult(
            region=self.region,
            capacity=self.capacity,
            utc_offset=self.offset,
            intervals=out,
            reports=reports,
            gammas=gammas,
            site_hourly=self._site_hourly(frame),
            skipped=self.skipped,
            refits=self.refits,
        )

    def _site_hourly(self, frame) -> pd.DataFrame:
        """Pooled site-level coverage per local hour over the scored test hours."""
        hours_idx = np.unique(frame["hour"].to_numpy(dtype=int))
        rows = []
        if hours_idx.size == 0:
            return pd.DataFrame(columns=["region", "level", "hour", "coverage", "count"])
        local_h = ((self.hours[hours_idx].hour.to_numpy() + int(self.offset)) % 24).astype(int)
        for alpha in self.cfg.alphas:
            hits = np.zeros(24)
            counts = np.zeros(24)
            for i in range(self.N):
                fc = self.b.forecasts[i, hours_idx]
                y = self.b.obs[i, hours_idx]
                ok = np.all(np.isfinite(fc), axis=1) & np.isfinite(y)
                if not ok.any():
                    continue
                panel = QuantilePanel(self.b.levels, fc[ok], 0.0, self.caps[i])
                lo = panel.quantile(alpha / 2.0)
                hi = panel.quantile(1.0 - alpha / 2.0)
                c = covered(lo, hi, y[ok]).astype(float)
                hits += np.bincount(local_h[ok], weights=c, minlength=24)
                counts += np.bincount(local_h[ok], minlength=24)
            for h in range(24):
                cov = hits[h] / counts[h] if counts[h] else math.nan
                rows.append({"region": self.region, "level": round(1.0 - alpha, 10), "hour": h, "coverage": cov, "count": int(counts[h])})
        return pd.DataFrame(rows)


def run_backtest(config: ProtocolConfig, bundle: DatasetBundle) -> BacktestResult:
    """Run the rolling protocol for every region in ``bundle``.

    Regions are processed in sorted order; every (method, day) failure is
    logged and isolated.
    """
    regions = list(config.regions) if config.regions else bundle.regions
    results = {}
    for region in sorted(regions):
        sub = bundle if bundle.regions == [region] else select_region(bundle, region)
        first, days = _test_days(sub.hours, config)
        if not days:
            raise ValueError(f"region {region}: the warm-up period leaves no complete test day in the data")
        logger.info("region %s: %d sites, %d test days from %s", region, len(sub.site_ids), len(days), first.date())
        run = _RegionRun(sub, region, config)
        run.run(days)
        results[region] = run.results()
    return BacktestResult(config, results)


def _fmt_frame(frame: pd.DataFrame) -> pd.DataFrame:
    out = frame.copy()
    for col in out.columns:
        if pd.api.types.is_datetime64_any_dtype(out[col]):
            out[col] = out[col].dt.strftime("%Y-%m-%dT%H:%M:%SZ")
    return out


def results_table(result: BacktestResult) -> pd.DataFrame:
    """One row per (region, method, level): ``region,method,level,picp,aiw,ws``."""
    rows = []
    for (region, method, alpha), rep in sorted(result.reports.items()):
        rows.append(
            {"region": region, "method": method, "level": rep.level, "picp": rep.picp, "aiw": rep.aiw, "ws": rep.winkler}
        )
    return pd.DataFrame(rows, columns=["region", "method", "level", "picp", "aiw", "ws"])


def emit_results(result: BacktestResult, out_dir) -> list:
    """Write result tables and per-hour coverage files; returns the paths written."""
    from pathlib import Path

    from .metrics import reports_to_frame, reports_to_json

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def _csv(frame, name):
        path = out / name
        _fmt_frame(frame).to_csv(path, index=False, lineterminator="\n")
        written.append(path)

    _csv(results_table(result), "results.csv")
    _csv(reports_to_frame(result.reports), "metrics_long.csv")
    path = out / "metrics.json"
    path.write_text(reports_to_json(result.reports) + "\n")
    written.append(path)

    hourly = []
    for (region, method, alpha), rep in sorted(result.reports.items()):
        for h in range(24):
            hourly.append(
                {
                    "region": region,
                    "method": method,
                    "level": rep.level,
                    "hour": h,
                    "coverage": rep.hourly[h],
                    "count": rep.hourly_counts[h],
                }
            )
    _csv(pd.DataFrame(hourly, columns=["region", "method", "level", "hour", "coverage", "count"]), "hourly_coverage.csv")

    regions = [result.regions[r] for r in sorted(result.regions)]
    if regions:
        _csv(pd.concat([r.site_hourly for r in regions], ignore_index=True), "site_hourly_coverage.csv")
        _csv(pd.concat([r.intervals for r in regions], ignore_index=True), "intervals.csv")
        _csv(pd.concat([r.gammas for r in regions], ignore_index=True), "gamma_selections.csv")
    return written
