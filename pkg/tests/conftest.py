import numpy as np
import pandas as pd
import pytest

from fleetcast import synth


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: acceptance criteria (one line per criterion)")
    config.addinivalue_line("markers", "slow: runs a multi-seed backtest")


@pytest.fixture
def three_knot_curve():
    from fleetcast.marginal import validate_and_repair

    return validate_and_repair([(0.25, 10.0), (0.5, 20.0), (0.75, 30.0)], 0.0, 40.0)


@pytest.fixture(scope="session")
def small_synth():
    """Three sites, 40 days, overconfident forecasts."""
    spec = synth.SynthSpec(
        n_sites=3,
        corr=synth.equicorrelation(3, 0.6),
        miscal=synth.Widen(0.6),
        days=40,
        seed=3,
        levels=np.arange(1, 20) / 20,
        system_samples=300,
    )
    return synth.generate(spec)


def write_fixture(tmp_path, n_sites=2, hours=48, levels=(0.1, 0.5, 0.9), drop=None, cross=()):
    """Hand-built CSV fixture; ``drop`` removes one (site, hour) observation,
    ``cross`` lists (site, hour) curves whose quantiles are made to cross."""
    ts = pd.date_range("2020-06-01", periods=hours, freq="h", tz="UTC")
    fmt = [t.strftime("%Y-%m-%dT%H:%M:%SZ") for t in ts]
    ids = [f"P{i}" for i in range(n_sites)]
    obs, fc = [], []
    for i, sid in enumerate(ids):
        for t, stamp in enumerate(fmt):
            if drop != (sid, t):
                obs.append((stamp, sid, 10.0 + i + (t % 24) * 0.5))
            for k, lv in enumerate(levels):
                v = 5.0 + 10.0 * lv + (t % 24) * 0.5
                if (sid, t) in cross and k == 0:
                    v = 50.0
                fc.append((stamp, sid, lv, v))
    paths = {
        "obs": tmp_path / "obs.csv",
        "sf": tmp_path / "sf.csv",
        "sites": tmp_path / "sites.csv",
    }
    pd.DataFrame(obs, columns=["timestamp", "site_id", "value"]).to_csv(paths["obs"], index=False)
    pd.DataFrame(fc, columns=["timestamp", "site_id", "level", "value"]).to_csv(paths["sf"], index=False)
    pd.DataFrame(
        {
            "site_id": ids,
            "capacity_mw": [100.0] * n_sites,
            "latitude": [35.0] * n_sites,
            "longitude": [-90.0] * n_sites,
            "region": ["MISO"] * n_sites,
        }
    ).to_csv(paths["sites"], index=False)
    return paths


# -- acceptance reporting ----------------------------------------------------

ACCEPTANCE_LINES = []


@pytest.fixture
def criterion(request):
    """Record one pass/fail line for an acceptance criterion.

    The test calls ``criterion(name, ok, detail)`` once; the line is printed
    immediately and repeated in the terminal summary.
    """

    def record(name, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
