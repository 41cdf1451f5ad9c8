import math
import warnings

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fleetcast.conformal import (
    FINITE_SAMPLE,
    PLAIN,
    CalibrationRecord,
    CalibrationStore,
    cacp_calibrate,
    calibrate_interval,
    calibrate_intervals,
    conformal_quantile,
    conformity_score,
    conformity_scores,
    cqr_calibrate,
    rbf_weight,
    select_gamma,
    sq_distances,
    weighted_conformal_quantile,
    weighted_conformal_quantiles,
)


def test_score_above():
    assert conformity_score((2, 5), 6) == 1


def test_score_inside():
    assert conformity_score((2, 5), 3) == -1


def test_score_below():
    assert conformity_score((2, 5), 1) == 1


def test_score_rejects_inverted_interval():
    with pytest.raises(ValueError):
        conformity_score((5, 2), 3)


@settings(max_examples=200)
@given(st.floats(-100, 100), st.floats(0, 50), st.floats(-200, 200))
def test_score_sign_iff_covered(lo, width, y):
    hi = lo + width
    assert (conformity_score((lo, hi), y) <= 0) == (lo <= y <= hi)


def test_rank_formula():
    assert conformal_quantile(np.arange(1, 100), 0.1, FINITE_SAMPLE) == 90


def test_constant_scores():
    for mode in (PLAIN, FINITE_SAMPLE):
        assert conformal_quantile([2.5] * 40, 0.2, mode) == 2.5


def test_rank_overflow_gives_infinity():
    with pytest.warns(RuntimeWarning):
        assert conformal_quantile([1, 2, 3, 4, 5], 0.1, FINITE_SAMPLE) == math.inf


def test_plain_is_inverse_ecdf():
    assert conformal_quantile(np.arange(1, 11), 0.1, PLAIN) == 9
    assert conformal_quantile([1, 2, 3, 4, 5], 0.1, PLAIN) == 5


def test_quantile_rejects_bad_input():
    with pytest.raises(ValueError):
        conformal_quantile([], 0.1)
    with pytest.raises(ValueError):
        conformal_quantile([1.0], 1.0)
    with pytest.raises(ValueError):
        conformal_quantile([1.0], 0.1, "exact")


def test_rbf_self_weight():
    assert rbf_weight([1.0, 2.0], [1.0, 2.0], 3.0) == 1.0


def test_rbf_direct_formula():
    assert rbf_weight([0.0], [math.sqrt(math.log(2))], 1.0) == pytest.approx(0.5, abs=1e-12)


@settings(max_examples=100)
@given(
    st.lists(st.floats(-5, 5), min_size=3, max_size=3),
    st.lists(st.floats(-5, 5), min_size=3, max_size=3),
    st.floats(0, 10),
)
def test_rbf_symmetric(a, b, g):
    assert rbf_weight(a, b, g) == rbf_weight(b, a, g)


def test_rbf_errors():
    with pytest.raises(ValueError):
        rbf_weight([0.0], [0.0, 1.0], 1.0)
    with pytest.raises(ValueError):
        rbf_weight([0.0], [0.0], -1.0)


def test_rbf_zero_gamma_uniform():
    assert np.all(rbf_weight([0.0, 0.0], np.random.default_rng(0).normal(size=(5, 2)), 0.0) == 1.0)


def test_weighted_uniform_inf_rule():
    assert weighted_conformal_quantile(np.arange(1, 11), np.ones(10), 0.1) == 9


def test_weighted_point_mass():
    s = np.array([4.0, -1.0, 7.0, 2.0])
    w = np.array([0.0, 0.0, 0.0, 1.0])
    for alpha in (0.01, 0.3, 0.9):
        assert weighted_conformal_quantile(s, w, alpha) == 2.0


def _scan(s, w, alpha, target_scale=1.0):
    """Exhaustive oracle: smallest candidate threshold whose weight share reaches the target."""
    p = [wi / sum(w) for wi in w]
    target = (1 - alpha) * target_scale
    for cand in sorted(s):
        if sum(pi for si, pi in zip(s, p) if si <= cand) >= target - 1e-12:
            return cand
    return math.inf


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 100_000), st.sampled_from([0.05, 0.1, 0.2, 0.37, 0.5]))
def test_weighted_matches_threshold_scan(seed, alpha):
    rng = np.random.default_rng(seed)
    s = rng.normal(size=12).tolist()
    w = rng.uniform(0.01, 1.0, 12).tolist()
    assert weighted_conformal_quantile(s, w, alpha, PLAIN) == _scan(s, w, alpha)
    expected = _scan(s, w, alpha, 13 / 12)
    if math.isinf(expected):
        with pytest.warns(RuntimeWarning, match="too small"):
            assert weighted_conformal_quantile(s, w, alpha, FINITE_SAMPLE) == expected
    else:
        assert weighted_conformal_quantile(s, w, alpha, FINITE_SAMPLE) == expected


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=60), st.floats(0.01, 0.99), st.floats(0.001, 100))
def test_uniform_weights_equal_unweighted_exactly(scores, alpha, c):
    for mode in (PLAIN, FINITE_SAMPLE):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            expected = conformal_quantile(scores, alpha, mode)
            got = weighted_conformal_quantile(scores, [c] * len(scores), alpha, mode)
        assert got == expected


def test_weighted_rows_match_scalar():
    rng = np.random.default_rng(2)
    s = rng.normal(size=30)
    w = rng.uniform(0, 1, (8, 30))
    w[3] = 1.0
    for mode in (PLAIN, FINITE_SAMPLE):
        rows = weighted_conformal_quantiles(s, w, 0.1, mode)
        for i in range(8):
            assert rows[i] == weighted_conformal_quantile(s, w[i], 0.1, mode)


def test_zero_weights_fall_back_to_uniform():
    with pytest.warns(RuntimeWarning, match="zero"):
        assert weighted_conformal_quantile(np.arange(1, 11), np.zeros(10), 0.1) == 9


def test_calibrate_expand():
    assert calibrate_interval((10, 20), 2) == (8, 22)


def test_calibrate_contract():
    assert calibrate_interval((10, 20), -3) == (13, 17)


def test_calibrate_collapse():
    assert calibrate_interval((10, 20), -8) == (15, 15)


def test_calibrate_clips_and_infinite():
    assert calibrate_interval((1, 20), 2, support=(0, 21)) == (0, 21)
    assert calibrate_interval((1, 20), math.inf, support=(0, 50)) == (0, 50)


def test_vectorized_calibration_matches_scalar():
    rng = np.random.default_rng(1)
    lo = rng.uniform(0, 10, 50)
    hi = lo + rng.uniform(0, 10, 50)
    s = rng.uniform(-8, 4, 50)
    s[0] = math.inf
    vl, vh = calibrate_intervals(lo, hi, s, (0.0, 18.0))
    for i in range(50):
        assert (vl[i], vh[i]) == calibrate_interval((lo[i], hi[i]), s[i], (0.0, 18.0))


def _store(scores, ctx):
    store = CalibrationStore(context_dim=ctx.shape[1])
    t0 = pd.Timestamp("2020-01-01", tz="UTC")
    for i, s in enumerate(scores):
        store.append(CalibrationRecord(t0 + pd.Timedelta(hours=i), 0.0, 0.0, float(s), ctx[i]))
    return store


def test_single_zero_score_leaves_interval():
    store = _store([0.0], np.zeros((1, 2)))
    assert cacp_calibrate((3.0, 7.0), np.ones(2), store, 1.0, 0.1, PLAIN) == (3.0, 7.0)


def test_zero_gamma_equals_cqr():
    rng = np.random.default_rng(4)
    store = _store(rng.uniform(0, 5, 200), rng.normal(size=(200, 4)))
    for mode in (PLAIN, FINITE_SAMPLE):
        for alpha in (0.1, 0.2, 0.4):
            assert cacp_calibrate((10, 20), rng.normal(size=4), store, 0.0, alpha, mode) == cqr_calibrate(
                (10, 20), store, alpha, mode
            )


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 10_000), st.floats(1.0, 50.0))
def test_boosting_max_score_weight_never_shrinks(seed, boost):
    rng = np.random.default_rng(seed)
    s = rng.normal(size=25)
    w = rng.uniform(0.05, 1.0, 25)
    top = int(np.argmax(s))
    w2 = w.copy()
    w2[top] *= boost
    for mode in (PLAIN, FINITE_SAMPLE):
        a = calibrate_interval((10, 20), weighted_conformal_quantile(s, w, 0.2, mode), (0, 100))
        b = calibrate_interval((10, 20), weighted_conformal_quantile(s, w2, 0.2, mode), (0, 100))
        assert b[0] <= a[0] and b[1] >= a[1]


def test_store_ordering_and_dimension():
    store = _store([1.0, 2.0], np.zeros((2, 3)))
    with pytest.raises(ValueError):
        store.append(CalibrationRecord(pd.Timestamp("2019-01-01", tz="UTC"), 0, 0, 0, np.zeros(3)))
    with pytest.raises(ValueError):
        store.append(CalibrationRecord(pd.Timestamp("2021-01-01", tz="UTC"), 0, 0, 0, np.zeros(2)))


def test_store_snapshot_and_csv(tmp_path):
    store = _store([0.5, -1.0, 2.0], np.arange(6.0).reshape(3, 2))
    assert len(store.before(pd.Timestamp("2020-01-01T02:00", tz="UTC"))) == 2
    store.to_csv(tmp_path / "cal.csv")
    back = CalibrationStore.from_csv(tmp_path / "cal.csv")
    np.testing.assert_array_equal(back.scores, store.scores)
    np.testing.assert_array_equal(back.contexts, store.contexts)


def test_vector_scores():
    np.testing.assert_array_equal(conformity_scores([2, 2, 2], [5, 5, 5], [6, 3, 1]), [1, -1, 1])


def test_sq_distances_brute_force():
    rng = np.random.default_rng(8)
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(6, 3))
    expected = [[sum((x - y) ** 2 for x, y in zip(r, q)) for q in b] for r in a]
    np.testing.assert_allclose(sq_distances(a, b), expected, atol=1e-12)


def test_select_gamma_prefers_informative_kernel():
    # two clusters with different score scales; a sharp kernel should win
    rng = np.random.default_rng(0)
    ctx = np.r_[np.zeros((200, 1)), np.full((200, 1), 5.0)]
    scores = np.r_[rng.normal(0, 0.1, 200), rng.normal(0, 3.0, 200)]
    val_ctx = np.r_[np.zeros((50, 1)), np.full((50, 1), 5.0)]
    val_y = np.r_[rng.normal(0, 0.1, 50), rng.normal(0, 3.0, 50)]
    d2 = sq_distances(val_ctx, ctx)
    best, table = select_gamma([0.0, 1.0], d2, scores, np.zeros(100), np.zeros(100), val_y, 0.1, PLAIN, (-1e9, 1e9))
    assert best == 1.0
    assert table[1.0] < table[0.0]


def test_select_gamma_tie_goes_to_first():
    d2 = np.zeros((3, 5))
    best, _ = select_gamma([0.5, 0.1], d2, np.arange(5.0), np.zeros(3), np.ones(3), np.full(3, 0.5), 0.2)
    assert best == 0.5
