import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from srblab.map_family import logistic
from srblab.tower import (
    ComparabilityError,
    GoodnessViolation,
    TowerError,
    bound_free_times,
    build_tower,
    cutoff_family,
    decay_constant,
    key_estimate_check,
    partial_zone_in_climb_interval,
    partial_zones_disjoint,
    smoothstep7,
    smoothstep7_d,
    verify_distortion,
)

FAM = logistic()


@pytest.fixture(scope="module")
def cf4(tower4):
    return cutoff_family(tower4)


def test_t4_tower_geometry(tower4):
    tw = tower4
    assert tw.H_delta == 2
    assert all(tw.points[k] == 0.0 for k in range(2, tw.K_max + 1))
    assert tw.I(1) is None and tw.I(2) is None
    for j in range(tw.H_delta + 1, tw.K_max + 1):
        assert tw.I(j) is not None
    # the smallest nonempty index is H + 1
    assert tw.b[1] == 1 / 8 and all(tw.b[k] == 1 / 16 for k in range(3, tw.K_max + 1))


def test_J_nesting_and_ground_levels(tower4):
    tw = tower4
    for k in range(tw.K_max):
        assert tw.um[k + 1] <= tw.um[k] and tw.up[k + 1] <= tw.up[k]
    for k in range(tw.H_delta + 1):
        assert tw.J(k) == (-tw.delta, tw.delta)


def test_H_nondecreasing_as_delta_shrinks():
    Hs = [build_tower(FAM, 4.0, d, K_max=40).H_delta for d in (0.05, 0.02, 0.01, 0.005, 0.001)]
    assert Hs == sorted(Hs)
    assert Hs == [2, 4, 5, 6, 8]


def test_delta_too_large():
    with pytest.raises(TowerError, match="delta too large"):
        build_tower(FAM, 4.0, 0.1, K_max=20)


@pytest.mark.parametrize("t", [2.0, 3.2])
def test_goodness_violation(t):
    with pytest.raises(GoodnessViolation):
        build_tower(FAM, t, 0.05, K_max=20)


def test_default_delta_search(mt0):
    tw = build_tower(FAM, mt0.t, K_max=40, points=mt0.postcritical_orbit(FAM, 43))
    assert tw.H_delta == 5
    assert tw.delta == pytest.approx(0.25 * 2 ** (-9 / 4), rel=1e-15)


def test_decay_constant_single(tower4):
    C = decay_constant(tower4)
    assert np.all(np.isfinite(C)) and C.max() < 0.26
    assert C[-1] == pytest.approx(0.25268, abs=1e-4)
    # |J_{j-1}| <= C~^2 lambda_c^{-j/2} with lambda_c = 4
    js = np.arange(2, tower4.K_max + 2)
    lens = np.array([tower4.J_length(j - 1) for j in js])
    Ct2 = np.max(lens * 4.0 ** (js / 2))
    assert Ct2 < 1.1


def test_climb_interval_endpoints_by_direct_iteration(tower4):
    tw = tower4
    for j in range(tw.H_delta + 1, 25):
        for lo, hi in tw.I(j):
            for frac in (0.25, 0.5, 0.75):
                x = tw.c + lo + frac * (hi - lo)
                y, climbed = x, 0
                for k in range(1, tw.K_max + 1):
                    y = 4.0 * y * (1 - y)
                    if abs(y - tw.points[k]) <= tw.b[k]:
                        climbed = k
                    else:
                        break
                assert climbed == j - 1


def test_tower_json(tmp_path, tower4):
    p = tmp_path / "tw.json"
    tower4.to_json(p)
    d = json.loads(p.read_text())
    assert d["H_delta"] == 2 and len(d["levels"]) == tower4.K_max
    assert d["levels"][2]["center"] == 0.0 and d["levels"][2]["radius"] == 1 / 16


@given(st.floats(0.001, 0.05), st.integers(5, 40))
def test_tower_invariants_t4(delta, K):
    tw = build_tower(FAM, 4.0, delta, K_max=K)
    for k in range(1, tw.K_max + 1):
        assert 1 / 8**3 <= tw.b[k] <= 1 / 8
    assert np.all(np.diff(tw.um[: K + 1]) <= 0) and np.all(np.diff(tw.up[: K + 1]) <= 0)


@given(st.floats(0.002, 0.04))
def test_tower_invariants_mt(mt0, delta):
    pts = mt0.postcritical_orbit(FAM, 43)
    try:
        tw = build_tower(FAM, mt0.t, delta, K_max=40, points=pts)
    except TowerError:
        return
    for k in range(1, tw.K_max + 1):
        assert 1 / 8**3 <= tw.b[k] <= 1 / 8
    assert np.all(np.diff(tw.um[: tw.K_max + 1]) <= 0) and np.all(np.diff(tw.up[: tw.K_max + 1]) <= 0)


def test_xi0_plateau(cf4, tower4):
    d = tower4.delta
    u = np.linspace(-d / 2, d / 2, 1001)
    assert np.all(cf4.xi(0, u) == 1.0)
    assert cf4.xi(0, np.array([-d, d, 1.1 * d])).tolist() == [0.0, 0.0, 0.0]


def test_cutoff_derivative_constants_uniform(cf4):
    for r in (1, 2, 3):
        C = cf4.derivative_constants(r)
        assert np.all(np.isfinite(C))
        assert C[20:].max() <= 1.01 * C[:20].max()
    assert cf4.derivative_constants(1).max() == pytest.approx(14.7574, abs=1e-3)


def test_partial_zones(cf4, tower4):
    assert partial_zones_disjoint(cf4)
    for k in range(1, tower4.K_max - 1):
        assert partial_zone_in_climb_interval(cf4, k)
    assert cf4.levels[tower4.K_max].mode == "zero"


def test_comparability_error(tower4):
    with pytest.raises(ComparabilityError, match="comparability"):
        cutoff_family(tower4, comparability=0.9)


def test_smoothstep_derivatives():
    s = np.linspace(0.01, 0.99, 99)
    h = 1e-6
    for r, f in ((1, smoothstep7), (2, lambda x: smoothstep7_d(x, 1)), (3, lambda x: smoothstep7_d(x, 2))):
        fd = (f(s + h) - f(s - h)) / (2 * h)
        assert np.allclose(smoothstep7_d(s, r), fd, atol=1e-4)


@given(st.integers(0, 39), st.lists(st.floats(-0.06, 0.06), min_size=3, max_size=50))
def test_xi_range_and_unimodal(tower4, k, us):
    cf = cutoff_family(tower4)
    u = np.sort(np.array(us))
    v = cf.xi(k, u)
    assert np.all((v >= 0) & (v <= 1))
    peak = int(np.argmax(v))
    assert np.all(np.diff(v[: peak + 1]) >= 0) and np.all(np.diff(v[peak:]) <= 0)


def test_bound_free_examples(tower4):
    r = bound_free_times(tower4, 0.0, 100)
    assert r.T == []
    x = tower4.c - tower4.delta / 2
    r = bound_free_times(tower4, x, 100)
    j = int(tower4.climb_height(x - tower4.c)) + 1
    assert r.T[0] == 0 and r.S[0] == j


def test_bound_free_hits_c(tower4):
    r = bound_free_times(tower4, 0.5, 10)
    assert r.S[0] == math.inf and r.flags


@given(st.floats(0.001, 0.999))
def test_bound_free_structure_and_expansion(tower4, x):
    r = bound_free_times(tower4, x, 100)
    prev_S = 0
    y, n = x, 0
    for T, S, L in zip(r.T, r.S, r.log_derivs_at_S):
        assert prev_S <= T < S
        # T is the first entry into [c - delta, c + delta] after the previous S
        while n < T:
            y = 4.0 * y * (1 - y)
            n += 1
            if n < T:
                assert abs(y - 0.5) > tower4.delta
        assert L >= S * math.log(1.5)
        prev_S = S


def test_distortion_band(tower4):
    vals = [verify_distortion(tower4, j).max_log_ratio for j in range(1, 31)]
    assert max(vals) < 0.2
    assert vals[0] == pytest.approx(0.0201, abs=1e-4)
    a = verify_distortion(tower4, 20, 1000).max_log_ratio
    b = verify_distortion(tower4, 20, 2000, seed=1).max_log_ratio
    assert abs(a - b) <= 0.1 * a


def test_distortion_below_predicted(tower4):
    for j in (1, 5, 10, 30):
        r = verify_distortion(tower4, j)
        assert r.max_log_ratio <= r.predicted_log_bound


def test_key_estimate_t4():
    r = key_estimate_check(FAM, 4.0, 5, 60)
    assert abs(r.total - 1 / 3) < 1e-12 and r.tail < 1e-30
    r0 = key_estimate_check(FAM, 4.0, 0, 60)
    assert math.isfinite(r0.total) and r0.total == pytest.approx(1 / 3, abs=1e-12)


def test_key_estimate_single_constant():
    totals = [key_estimate_check(FAM, 4.0, j, 60, alpha=0.0).total for j in range(31)]
    C = max(totals)
    assert all(key_estimate_check(FAM, 4.0, j, 60, C=C).margin >= 0 for j in range(31))
    assert C == pytest.approx(1 / 3, abs=1e-12)


@given(st.floats(3.6, 4.0), st.integers(0, 20), st.integers(2, 40))
def test_key_estimate_partial_monotone(t, j, K):
    a = key_estimate_check(FAM, t, j, K)
    b = key_estimate_check(FAM, t, j, K + 5)
    if math.isfinite(a.partial) and math.isfinite(b.partial):
        assert b.partial >= a.partial
