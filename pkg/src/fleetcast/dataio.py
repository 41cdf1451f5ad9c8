"""
Loading, validation and gap reporting for fleet datasets.

File formats (all CSV with a header row, timestamps ISO-8601 UTC):

* observations: ``timestamp,site_id,value``
* site forecasts: ``timestamp,site_id,level,value`` (long form, one row per
  site, hour and quantile level)
* system forecasts: ``timestamp,region,level,value`` (``site_id`` is accepted
  in place of ``region``)
* site metadata: ``site_id,capacity_mw,latitude,longitude,region`` plus an
  optional ``utc_offset`` column in hours
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .marginal import QuantilePanel

logger = logging.getLogger(__name__)

TS_FORMAT = "%Y-%m-%dT%H:%M:%SZ"
KNOWN_REGIONS = ("ERCOT", "MISO", "SPP")


class DataValidationError(ValueError):
    """Raised after all problems in the input files have been collected."""

    def __init__(self, errors):
        self.errors = list(errors)
        shown = "\n".join(f"  {e}" for e in self.errors[:50])
        more = f"\n  ... {len(self.errors) - 50} more" if len(self.errors) > 50 else ""
        super().__init__(f"{len(self.errors)} validation error(s):\n{shown}{more}")


@dataclass
class DataPaths:
    observations: str
    site_forecasts: str
    sites: str
    system_forecasts: str | None = None


@dataclass
class CoverageReport:
    row_counts: dict = field(default_factory=dict)
    obs_missing: list = field(default_factory=list)
    forecast_missing: list = field(default_factory=list)
    repaired_curves: int = 0
    n_sites: int = 0
    n_hours: int = 0

    @property
    def present_cells(self) -> int:
        missing = set(self.obs_missing) | set(self.forecast_missing)
        return self.n_sites * self.n_hours - len(missing)

    @property
    def gap_cells(self) -> int:
        return len(set(self.obs_missing) | set(self.forecast_missing))

    def summary(self) -> str:
        lines = [
            f"sites: {self.n_sites}",
            f"hours: {self.n_hours}",
            *(f"rows[{k}]: {v}" for k, v in self.row_counts.items()),
            f"missing observation cells: {len(self.obs_missing)}",
            f"missing forecast cells: {len(self.forecast_missing)}",
            f"gap cells: {self.gap_cells}",
            f"present cells: {self.present_cells}",
            f"repaired curves: {self.repaired_curves}",
        ]
        return "\n".join(lines)


@dataclass
class DatasetBundle:
    sites: pd.DataFrame  # index site_id, sorted
    hours: pd.DatetimeIndex
    obs: np.ndarray  # (N, T)
    levels: np.ndarray  # (K,)
    forecasts: np.ndarray  # (N, T, K)
    system_levels: np.ndarray | None = None
    system: dict = field(default_factory=dict)  # region -> (T, K_sys)
    report: CoverageReport = field(default_factory=CoverageReport)

    @property
    def site_ids(self) -> list:
        return list(self.sites.index)

    @property
    def capacities(self) -> np.ndarray:
        return self.sites["capacity_mw"].to_numpy(dtype=float)

    @property
    def regions(self) -> list:
        return sorted(self.sites["region"].unique())

    def site_panel(self, i: int, rows=None) -> QuantilePanel:
        """Curves of site ``i`` over the hours ``rows`` (all hours by default)."""
        vals = self.forecasts[i] if rows is None else self.forecasts[i, rows]
        cap = self.capacities[i]
        return QuantilePanel(self.levels, vals, 0.0, cap)

    def hour_panel(self, t: int) -> QuantilePanel:
        """Curves of all sites at hour index ``t``."""
        return QuantilePanel(self.levels, self.forecasts[:, t, :], 0.0, self.capacities)

    def system_panel(self, region: str, rows=None) -> QuantilePanel | None:
        if region not in self.system:
            return None
        vals = self.system[region] if rows is None else self.system[region][rows]
        cap = float(self.capacities[(self.sites["region"] == region).to_numpy()].sum())
        return QuantilePanel(self.system_levels, vals, 0.0, cap)

    def fleet_obs(self) -> np.ndarray:
        """Fleet totals per hour; NaN if any site is missing."""
        return self.obs.sum(axis=0)

    def utc_offset(self) -> float:
        return float(np.round(self.sites["utc_offset"].astype(float).mean()))


# ---------------------------------------------------------------------------
# parsing helpers
# ---------------------------------------------------------------------------


def _read(path, required, errors, name):
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        errors.append(f"{name}: cannot read {path}: {exc}")
        return None
    frame.columns = [c.strip() for c in frame.columns]
    missing = [c for c in required if c not in frame.columns]
    if missing:
        errors.append(f"{name}: missing column(s) {missing} in {path}")
        return None
    frame["_line"] = np.arange(2, len(frame) + 2)
    return frame


def _parse_ts(frame, name, errors):
    ts = pd.to_datetime(frame["timestamp"], utc=True, errors="coerce", format="ISO8601")
    bad = ts.isna()
    for line, raw in zip(frame.loc[bad, "_line"], frame.loc[bad, "timestamp"]):
        errors.append(f"{name}:{line}: bad timestamp {raw!r}")
    off = ~bad & (ts != ts.dt.floor("h"))
    for line, raw in zip(frame.loc[off, "_line"], frame.loc[off, "timestamp"]):
        errors.append(f"{name}:{line}: timestamp {raw!r} is not on the hour")
    return ts, ~(bad | off)


def _to_float(raw) -> float:
    try:
        return float(raw)
    except (TypeError, ValueError):
        return np.nan


def _parse_num(frame, col, name, errors):
    # float() round-trips repr output exactly; pd.to_numeric can be off by an ulp
    vals = frame[col].map(_to_float).astype(float)
    bad = vals.isna() | ~np.isfinite(vals.fillna(0.0))
    for line, raw in zip(frame.loc[bad, "_line"], frame.loc[bad, col]):
        errors.append(f"{name}:{line}: bad {col} {raw!r}")
    return vals, ~bad


def _report_duplicates(frame, keys, name, errors):
    dup = frame.duplicated(keys, keep="first")
    for line in frame.loc[dup, "_line"]:
        errors.append(f"{name}:{line}: duplicate row for {keys}")
    return ~dup


def load_sites(path, errors=None) -> pd.DataFrame:
    own = errors is None
    errors = [] if own else errors
    frame = _read(path, ["site_id", "capacity_mw", "latitude", "longitude", "region"], errors, "sites")
    if frame is None:
        if own:
            raise DataValidationError(errors)
        return pd.DataFrame()
    cap, ok = _parse_num(frame, "capacity_mw", "sites", errors)
    lat, ok_lat = _parse_num(frame, "latitude", "sites", errors)
    lon, ok_lon = _parse_num(frame, "longitude", "sites", errors)
    for line in frame.loc[ok & (cap <= 0), "_line"]:
        errors.append(f"sites:{line}: capacity_mw must be positive")
    if "utc_offset" in frame.columns:
        off, _ = _parse_num(frame, "utc_offset", "sites", errors)
    else:
        off = np.round(lon / 15.0)
    out = pd.DataFrame(
        {
            "capacity_mw": cap.to_numpy(),
            "latitude": lat.to_numpy(),
            "longitude": lon.to_numpy(),
            "region": frame["region"].str.strip().to_numpy(),
            "utc_offset": np.asarray(off, dtype=float),
        },
        index=pd.Index(frame["site_id"].str.strip(), name="site_id"),
    )
    dup = out.index.duplicated()
    for line in frame.loc[dup, "_line"]:
        errors.append(f"sites:{line}: duplicate site_id")
    if own and errors:
        raise DataValidationError(errors)
    return out[~dup].sort_index()


def load_bundle(paths: DataPaths, region: str | None = None) -> DatasetBundle:
    """Load and validate a dataset.

    Every malformed row in every file is collected before raising
    :class:`DataValidationError`. Site ids absent from the metadata are
    fatal. Crossing quantiles are repaired and counted. ``region`` restricts
    loading to the sites of one region.
    """
    errors: list[str] = []
    sites = load_sites(paths.sites, errors)
    if errors:
        raise DataValidationError(errors)
    if region is not None:
        sites = _filter_region(sites, region)
    site_set = set(sites.index)
    report = CoverageReport()

    obs_f = _read(paths.observations, ["timestamp", "site_id", "value"], errors, "observations")
    fc_f = _read(paths.site_forecasts, ["timestamp", "site_id", "level", "value"], errors, "site_forecasts")
    sys_f = None
    if paths.system_forecasts:
        sys_f = _read(paths.system_forecasts, ["timestamp", "level", "value"], errors, "system_forecasts")
        if sys_f is not None and "region" not in sys_f.columns:
            if "site_id" in sys_f.columns:
                sys_f = sys_f.rename(columns={"site_id": "region"})
            else:
                errors.append("system_forecasts: missing column 'region'")
                sys_f = None
    if obs_f is None or fc_f is None:
        raise DataValidationError(errors)

    unknown = []
    for name, frame in (("observations", obs_f), ("site_forecasts", fc_f)):
        frame["site_id"] = frame["site_id"].str.strip()
        report.row_counts[name] = len(frame)
        if region is None:
            bad = ~frame["site_id"].isin(site_set)
            for line, sid in zip(frame.loc[bad, "_line"], frame.loc[bad, "site_id"]):
                unknown.append(f"{name}:{line}: unknown site_id {sid!r}")
    if unknown:
        raise DataValidationError(unknown + errors)
    if region is not None:
        obs_f = obs_f[obs_f["site_id"].isin(site_set)]
        fc_f = fc_f[fc_f["site_id"].isin(site_set)]

    obs_ts, ok_ts = _parse_ts(obs_f, "observations", errors)
    obs_v, ok_v = _parse_num(obs_f, "value", "observations", errors)
    cap_by_site = sites["capacity_mw"]
    caps = obs_f["site_id"].map(cap_by_site).to_numpy(dtype=float)
    out_of_range = ok_v & ((obs_v < 0) | (obs_v > caps))
    for line, v in zip(obs_f.loc[out_of_range, "_line"], obs_v[out_of_range]):
        errors.append(f"observations:{line}: value {v} outside [0, capacity]")
    obs_f = obs_f.assign(timestamp=obs_ts, value=obs_v)
    obs_ok = ok_ts & ok_v & ~out_of_range
    obs_ok &= _report_duplicates(obs_f, ["timestamp", "site_id"], "observations", errors)

    fc_ts, ok_ts = _parse_ts(fc_f, "site_forecasts", errors)
    fc_v, ok_v = _parse_num(fc_f, "value", "site_forecasts", errors)
    fc_l, ok_l = _parse_num(fc_f, "level", "site_forecasts", errors)
    bad_level = ok_l & ((fc_l <= 0) | (fc_l >= 1))
    for line, v in zip(fc_f.loc[bad_level, "_line"], fc_l[bad_level]):
        errors.append(f"site_forecasts:{line}: level {v} outside (0, 1)")
    fc_f = fc_f.assign(timestamp=fc_ts, value=fc_v, level=fc_l)
    fc_ok = ok_ts & ok_v & ok_l & ~bad_level
    fc_ok &= _report_duplicates(fc_f, ["timestamp", "site_id", "level"], "site_forecasts", errors)

    if sys_f is not None:
        report.row_counts["system_forecasts"] = len(sys_f)
        s_ts, ok_ts = _parse_ts(sys_f, "system_forecasts", errors)
        s_v, ok_v = _parse_num(sys_f, "value", "system_forecasts", errors)
        s_l, ok_l = _parse_num(sys_f, "level", "system_forecasts", errors)
        bad_level = ok_l & ((s_l <= 0) | (s_l >= 1))
        for line, v in zip(sys_f.loc[bad_level, "_line"], s_l[bad_level]):
            errors.append(f"system_forecasts:{line}: level {v} outside (0, 1)")
        sys_f = sys_f.assign(timestamp=s_ts, value=s_v, level=s_l, region=sys_f["region"].str.strip())
        sys_ok = ok_ts & ok_v & ok_l & ~bad_level
        sys_ok &= _report_duplicates(sys_f, ["timestamp", "region", "level"], "system_forecasts", errors)
        if region is not None:
            sys_f = sys_f[sys_f["region"] == region]
            sys_ok = sys_ok[sys_f.index]

    if errors:
        raise DataValidationError(errors)

    obs_f, fc_f = obs_f[obs_ok], fc_f[fc_ok]
    if obs_f.empty or fc_f.empty:
        raise DataValidationError(["observations and site forecasts must contain at least one row each"])
    t0 = min(obs_f["timestamp"].min(), fc_f["timestamp"].min())
    t1 = max(obs_f["timestamp"].max(), fc_f["timestamp"].max())
    hours = pd.date_range(t0, t1, freq="h")
    site_ids = list(sites.index)

    obs = (
        obs_f.pivot(index="site_id", columns="timestamp", values="value")
        .reindex(index=site_ids, columns=hours)
        .to_numpy(dtype=float)
    )
    levels = np.sort(fc_f["level"].unique())
    fc = _cube(fc_f, "site_id", site_ids, hours, levels)

    # Repair crossing quantiles and clip onto [0, capacity].
    caps = sites["capacity_mw"].to_numpy(dtype=float)
    complete = np.all(np.isfinite(fc), axis=2)
    for i in range(len(site_ids)):
        rows = np.flatnonzero(complete[i])
        if rows.size:
            panel = QuantilePanel(levels, fc[i, rows], 0.0, caps[i])
            report.repaired_curves += int(panel.repaired.sum())
            fc[i, rows] = panel.values
    fc[~complete] = np.nan

    report.n_sites, report.n_hours = len(site_ids), len(hours)
    report.obs_missing = [(site_ids[i], hours[t]) for i, t in np.argwhere(~np.isfinite(obs))]
    report.forecast_missing = [(site_ids[i], hours[t]) for i, t in np.argwhere(~complete)]

    system, sys_levels = {}, None
    if sys_f is not None and not sys_f.empty:
        sys_f = sys_f[sys_ok]
        sys_levels = np.sort(sys_f["level"].unique())
        regs = sorted(sys_f["region"].unique())
        cube = _cube(sys_f, "region", regs, hours, sys_levels)
        for j, reg in enumerate(regs):
            cap = float(caps[(sites["region"] == reg).to_numpy()].sum())
            ok = np.all(np.isfinite(cube[j]), axis=1)
            vals = cube[j]
            if ok.any() and cap > 0:
                panel = QuantilePanel(sys_levels, vals[ok], 0.0, cap)
                report.repaired_curves += int(panel.repaired.sum())
                vals[ok] = panel.values
            vals[~ok] = np.nan
            system[reg] = vals

    bundle = DatasetBundle(sites, hours, obs, levels, fc, sys_levels, system, report)
    logger.info("loaded bundle: %d sites, %d hours, %d gap cells", len(site_ids), len(hours), report.gap_cells)
    return bundle


def _cube(frame, key, keys, hours, levels) -> np.ndarray:
    k_idx = pd.Index(keys).get_indexer(frame[key])
    t_idx = hours.get_indexer(frame["timestamp"])
    l_idx = pd.Index(levels).get_indexer(frame["level"])
    cube = np.full((len(keys), len(hours), len(levels)), np.nan)
    ok = (k_idx >= 0) & (t_idx >= 0)
    cube[k_idx[ok], t_idx[ok], l_idx[ok]] = frame["value"].to_numpy(dtype=float)[ok]
    return cube


def _filter_region(sites: pd.DataFrame, region: str) -> pd.DataFrame:
    sub = sites[sites["region"] == region]
    if sub.empty:
        available = sorted(set(sites["region"]))
        raise DataValidationError(
            [f"region {region!r} has no sites; available regions: {available}; known ISO regions: {list(KNOWN_REGIONS)}"]
        )
    return sub


def select_region(bundle: DatasetBundle, region: str) -> DatasetBundle:
    """Restrict a bundle to the sites of one region."""
    sub = _filter_region(bundle.sites, region)
    mask = (bundle.sites["region"] == region).to_numpy()
    idx = np.flatnonzero(mask)
    ids = set(sub.index)
    report = CoverageReport(
        row_counts=dict(bundle.report.row_counts),
        obs_missing=[g for g in bundle.report.obs_missing if g[0] in ids],
        forecast_missing=[g for g in bundle.report.forecast_missing if g[0] in ids],
        repaired_curves=bundle.report.repaired_curves,
        n_sites=len(idx),
        n_hours=bundle.report.n_hours,
    )
    system = {region: bundle.system[region]} if region in bundle.system else {}
    logger.info("region %s: %d sites", region, len(idx))
    return DatasetBundle(
        sub,
        bundle.hours,
        bundle.obs[idx],
        bundle.levels,
        bundle.forecasts[idx],
        bundle.system_levels,
        system,
        report,
    )


# ---------------------------------------------------------------------------
# writing
# ---------------------------------------------------------------------------


def _fmt(v: float) -> str:
    return repr(float(v))


def write_observations(path, hours, site_ids, obs) -> None:
    ts = hours.strftime(TS_FORMAT)
    with open(path, "w", newline="") as fh:
        fh.write("timestamp,site_id,value\n")
        for t in range(len(hours)):
            for i, sid in enumerate(site_ids):
                v = obs[i, t]
                if np.isfinite(v):
                    fh.write(f"{ts[t]},{sid},{_fmt(v)}\n")


def write_quantiles(path, hours, keys, levels, cube, key_name="site_id") -> None:
    ts = hours.strftime(TS_FORMAT)
    lv = [_fmt(x) for x in levels]
    with open(path, "w", newline="") as fh:
        fh.write(f"timestamp,{key_name},level,value\n")
        for t in range(len(hours)):
            for i, key in enumerate(keys):
                row = cube[i, t]
                if not np.all(np.isfinite(row)):
                    continue
                fh.write("".join(f"{ts[t]},{key},{lv[j]},{_fmt(row[j])}\n" for j in range(len(levels))))


def write_sites(path, sites: pd.DataFrame) -> None:
    out = sites.reset_index()[["site_id", "capacity_mw", "latitude", "longitude", "region", "utc_offset"]]
    out.to_csv(path, index=False)


def write_bundle(bundle: DatasetBundle, out_dir) -> DataPaths:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = DataPaths(
        observations=str(out / "obs.csv"),
        site_forecasts=str(out / "site_forecasts.csv"),
        sites=str(out / "sites.csv"),
        system_forecasts=str(out / "system_forecasts.csv") if bundle.system else None,
    )
    write_observations(paths.observations, bundle.hours, bundle.site_ids, bundle.obs)
    write_quantiles(paths.site_forecasts, bundle.hours, bundle.site_ids, bundle.levels, bundle.forecasts)
    write_sites(paths.sites, bundle.sites)
    if bundle.system:
        regs = sorted(bundle.system)
        cube = np.stack([bundle.system[r] for r in regs])
        write_quantiles(paths.system_forecasts, bundle.hours, regs, bundle.system_levels, cube, key_name="region")
    return paths


def file_digest(path) -> str:
    import hashlib

    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def paths_exist(paths: DataPaths) -> list[str]:
    return [p for p in (paths.observations, paths.site_forecasts, paths.sites, paths.system_forecasts) if p and not os.path.exists(p)]
