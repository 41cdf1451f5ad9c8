"""
Command line entry point.

    fleetcast validate --obs obs.csv --site-forecasts sf.csv --sites sites.csv
    fleetcast synth --out data/ --sites 5 --days 90 --miscal widen --param 0.6
    fleetcast backtest --config run.toml --obs ... --out results/
    fleetcast backtest --manifest results/manifest.json --out replay/
    fleetcast metrics --intervals intervals.csv --capacity 250 --out scores/

Exit codes: 0 success, 1 bad input or usage, 2 failure while running.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .backtest import ProtocolConfig, emit_results, run_backtest
from .context import context_dim
from .dataio import DataPaths, DataValidationError, file_digest, load_bundle, paths_exist, write_bundle
from .metrics import (
    IntervalSeries,
    daylight_mask,
    evaluate,
    normalize_by_capacity,
    reports_to_frame,
    reports_to_json,
)

logger = logging.getLogger("fleetcast")

MANIFEST = "manifest.json"
USAGE_ERROR = 1
RUNTIME_ERROR = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad arguments; here 2 means a runtime failure
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(USAGE_ERROR, f"{self.prog}: error: {message}\n")


def _data_args(p, system=True):
    p.add_argument("--obs", help="observations CSV: timestamp,site_id,value")
    p.add_argument("--site-forecasts", help="site quantile CSV: timestamp,site_id,level,value")
    p.add_argument("--sites", help="site metadata CSV: site_id,capacity_mw,latitude,longitude,region")
    if system:
        p.add_argument("--system-forecasts", help="optional system quantile CSV: timestamp,region,level,value")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fleetcast", description="Calibrated fleet-level solar forecast intervals.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("validate", help="check input files and print a coverage report")
    _data_args(p)
    p.add_argument("--region", help="restrict to one region")

    p = sub.add_parser("synth", help="write a synthetic dataset with known ground truth")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--spec", help="JSON spec to regenerate from (other options are ignored)")
    p.add_argument("--sites", type=int, default=3, help="number of sites (default 3)")
    p.add_argument("--days", type=int, default=60, help="horizon in days (default 60)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rho", type=float, default=0.5, help="equicorrelation of the true copula (default 0.5)")
    p.add_argument("--family", choices=("uniform", "truncnormal", "diurnal"), default="truncnormal")
    p.add_argument("--capacity", type=float, default=100.0, help="capacity per site in MW")
    p.add_argument("--miscal", choices=("identity", "widen", "shift", "regime"), default="identity")
    p.add_argument("--param", type=float, help="widen factor or shift delta")
    p.add_argument("--start", default="2019-01-01")
    p.add_argument("--region", default="SYN")
    p.add_argument("--utc-offset", type=float, default=0.0)
    p.add_argument("--no-system", action="store_true", help="skip system-level forecasts")

    p = sub.add_parser("backtest", help="run the rolling daily backtest")
    p.add_argument("--config", help="TOML file mirroring ProtocolConfig")
    p.add_argument("--manifest", help="replay a previous run from its manifest")
    _data_args(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override the configured seed")

    p = sub.add_parser("metrics", help="score an interval CSV")
    p.add_argument("--intervals", required=True, help="CSV with timestamp,lower,upper,realized")
    p.add_argument("--alpha", type=float, help="miscoverage level when the file has no level/alpha column")
    p.add_argument("--capacity", type=float, help="normalize by this capacity (MW)")
    p.add_argument("--daylight-only", action="store_true", help="drop rows with no realized or forecast generation")
    p.add_argument("--utc-offset", type=float, default=0.0, help="offset for the hour-of-day breakdown")
    p.add_argument("--out", help="output directory (prints JSON to stdout when omitted)")
    return parser


# ---------------------------------------------------------------------------
# validate
# ---------------------------------------------------------------------------


def _paths(args) -> DataPaths:
    missing = [f"--{n}" for n in ("obs", "site-forecasts", "sites") if not getattr(args, n.replace("-", "_"))]
    if missing:
        raise UsageError(f"missing required options: {', '.join(missing)}")
    paths = DataPaths(args.obs, args.site_forecasts, args.sites, getattr(args, "system_forecasts", None))
    absent = paths_exist(paths)
    if absent:
        raise UsageError(f"input files not found: {', '.join(absent)}")
    return paths


def cmd_validate(args) -> int:
    bundle = load_bundle(_paths(args), region=args.region)
    print(bundle.report.summary())
    print(f"regions: {', '.join(bundle.regions)}")
    return 0


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def _synth_spec(args):
    from . import synth

    if args.spec:
        with open(args.spec) as fh:
            return synth.spec_from_dict(json.load(fh))
    if args.miscal == "widen":
        op = synth.Widen(0.5 if args.param is None else args.param)
    elif args.miscal == "shift":
        op = synth.Shift(0.1 if args.param is None else args.param)
    elif args.miscal == "regime":
        op = synth.RegimeSwitch()
    else:
        op = synth.Identity()
    return synth.SynthSpec(
        n_sites=args.sites,
        corr=synth.equicorrelation(args.sites, args.rho),
        families=(args.family,) * args.sites,
        capacities=np.full(args.sites, args.capacity),
        miscal=op,
        days=args.days,
        seed=args.seed,
        start=args.start,
        region=args.region,
        utc_offset=args.utc_offset,
        with_system=not args.no_system,
    )


def cmd_synth(args) -> int:
    from . import synth

    try:
        spec = _synth_spec(args)
    except (TypeError, ValueError, OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"invalid synthetic spec: {exc}") from exc
    ds = synth.generate(spec)
    paths = write_bundle(ds.bundle, args.out)
    spec_path = Path(args.out) / "synth_spec.json"
    spec_path.write_text(json.dumps(synth.spec_to_dict(spec), indent=2, sort_keys=True) + "\n")
    for p in (paths.observations, paths.site_forecasts, paths.sites, paths.system_forecasts, spec_path):
        if p:
            print(p)
    return 0


# ---------------------------------------------------------------------------
# backtest
# ---------------------------------------------------------------------------


def _inputs(paths: DataPaths) -> dict:
    out = {}
    for name in ("observations", "site_forecasts", "sites", "system_forecasts"):
        p = getattr(paths, name)
        if p:
            out[name] = {"path": str(Path(p).resolve()), "sha256": file_digest(p)}
    return out


def _from_manifest(path):
    try:
        with open(path) as fh:
            man = json.load(fh)
        config = ProtocolConfig.from_dict(man["config"])
        files = man["inputs"]
    except (OSError, KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"cannot read manifest {path}: {exc}") from exc
    paths = DataPaths(
        files["observations"]["path"],
        files["site_forecasts"]["path"],
        files["sites"]["path"],
        files.get("system_forecasts", {}).get("path"),
    )
    absent = paths_exist(paths)
    if absent:
        raise UsageError(f"inputs named in the manifest are missing: {', '.join(absent)}")
    for name, entry in files.items():
        if file_digest(entry["path"]) != entry["sha256"]:
            raise UsageError(f"{entry['path']} changed since the manifest was written (sha256 mismatch)")
    return config, paths


def build_manifest(config: ProtocolConfig, paths: DataPaths, bundle, result, outputs) -> dict:
    gammas = [r.gammas for r in result.regions.values()]
    gamma_rows = pd.concat(gammas, ignore_index=True) if gammas else pd.DataFrame()
    rep = bundle.report
    return {
        "version": __version__,
        "seed": config.seed,
        "config": config.to_dict(),
        "inputs": _inputs(paths),
        "context": {"lags": config.lags, "dim": context_dim(config.lags)},
        "data": {
            "sites": rep.n_sites,
            "hours": rep.n_hours,
            "repaired_curves": rep.repaired_curves,
            "gap_cells": rep.gap_cells,
            "missing_observations": len(rep.obs_missing),
            "missing_forecasts": len(rep.forecast_missing),
        },
        "regions": {
            name: {"refits": r.refits, "skipped": [list(s) for s in r.skipped]}
            for name, r in sorted(result.regions.items())
        },
        "gamma_selections": [
            {k: (v.item() if hasattr(v, "item") else v) for k, v in row.items()}
            for row in gamma_rows.to_dict(orient="records")
        ],
        "outputs": {Path(p).name: file_digest(p) for p in outputs},
    }


def cmd_backtest(args) -> int:
    if args.manifest:
        config, paths = _from_manifest(args.manifest)
    elif args.config:
        if not Path(args.config).is_file():
            raise UsageError(f"config file not found: {args.config}")
        try:
            config = ProtocolConfig.from_toml(args.config)
        except (ValueError, TypeError) as exc:
            raise UsageError(f"invalid config {args.config}: {exc}") from exc
        paths = _paths(args)
    else:
        raise UsageError("backtest needs --config (or --manifest to replay a run)")
    if args.seed is not None:
        config = ProtocolConfig.from_dict({**config.to_dict(), "seed": args.seed})

    bundle = load_bundle(paths)
    result = run_backtest(config, bundle)
    outputs = emit_results(result, args.out)
    manifest = build_manifest(config, paths, bundle, result, outputs)
    path = Path(args.out) / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, allow_nan=False, default=_json_default) + "\n")
    print(path)
    return 0


def _json_default(v):
    if isinstance(v, (np.integer, np.floating)):
        return v.item()
    raise TypeError(f"not JSON serializable: {type(v).__name__}")


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def _interval_groups(frame: pd.DataFrame, alpha):
    if "alpha" in frame.columns:
        frame = frame.assign(_alpha=frame["alpha"].astype(float))
    elif "level" in frame.columns:
        frame = frame.assign(_alpha=(1.0 - frame["level"].astype(float)).round(10))
    elif alpha is not None:
        frame = frame.assign(_alpha=float(alpha))
    else:
        raise UsageError("interval file has no alpha or level column; pass --alpha")
    if "method" not in frame.columns:
        frame = frame.assign(method="INTERVALS")
    if "region" not in frame.columns:
        frame = frame.assign(region="ALL")
    for key, g in frame.groupby(["region", "method", "_alpha"], sort=True):
        yield key, g


def cmd_metrics(args) -> int:
    try:
        frame = pd.read_csv(args.intervals)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise UsageError(f"cannot read {args.intervals}: {exc}") from exc
    missing = [c for c in ("timestamp", "lower", "upper", "realized") if c not in frame.columns]
    if missing:
        raise UsageError(f"interval file is missing columns: {missing}")
    try:
        ts = pd.to_datetime(frame["timestamp"], utc=True)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"bad timestamps in {args.intervals}: {exc}") from exc
    frame = frame.assign(timestamp=ts)

    reports = {}
    for (region, method, alpha), g in _interval_groups(frame, args.alpha):
        try:
            series = IntervalSeries(alpha, pd.DatetimeIndex(g["timestamp"]), g["lower"], g["upper"], g["realized"])
            if args.capacity is not None:
                series = normalize_by_capacity(series, args.capacity)
        except ValueError as exc:
            raise UsageError(f"{method} at alpha={alpha}: {exc}") from exc
        if args.daylight_only:
            series = series.subset(daylight_mask(series))
        if len(series) == 0:
            logger.warning("%s at alpha=%s: no rows left to score", method, alpha)
            continue
        reports[(region, method, alpha)] = evaluate(series, args.utc_offset)

    text = reports_to_json(reports)
    if not args.out:
        print(text)
        return 0
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(text + "\n")
    reports_to_frame(reports).to_csv(out / "metrics_long.csv", index=False, lineterminator="\n")
    hourly = [
        {"region": r, "method": m, "level": rep.level, "hour": h, "coverage": rep.hourly[h], "count": rep.hourly_counts[h]}
        for (r, m, a), rep in sorted(reports.items())
        for h in range(24)
    ]
    pd.DataFrame(hourly, columns=["region", "method", "level", "hour", "coverage", "count"]).to_csv(
        out / "hourly_coverage.csv", index=False, lineterminator="\n"
    )
    print(out / "metrics.json")
    return 0


COMMANDS = {"validate": cmd_validate, "synth": cmd_synth, "backtest": cmd_backtest, "metrics": cmd_metrics}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if not args.verbose:
        warnings.simplefilter("ignore", RuntimeWarning)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("fleetcast: error: a command is required", file=sys.stderr)
        return USAGE_ERROR
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"fleetcast {args.command}: error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except DataValidationError as exc:
        print(f"fleetcast {args.command}: invalid input: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except Exception as exc:  # noqa: BLE001 - last line of defence for the exit-code contract
        logger.debug("failure", exc_info=True)
        print(f"fleetcast {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
