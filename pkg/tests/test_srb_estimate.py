import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st

from srblab.map_family import DomainError
from srblab.response_experiment import observable_AD
from srblab.srb_estimate import (
    BinnedDensity,
    UlamMatrix,
    arcsine_bin_masses,
    birkhoff_average,
    build_ulam,
    integrate_observable,
    lyapunov,
    stationary_density,
    ulam_density,
)


def X(x):
    return np.asarray(x, dtype=float)


def X2(x):
    return np.asarray(x, dtype=float) ** 2


def ONE(x):
    return np.ones_like(np.asarray(x, dtype=float))


def test_birkhoff_t4(fam):
    r = birkhoff_average(fam, 4.0, X, 10**7)
    assert abs(r.mean - 0.5) <= 0.005
    assert 0 < r.stderr < 1e-3


def test_birkhoff_constant_observable(fam):
    assert birkhoff_average(fam, 3.83, ONE, 10**5).mean == 1.0


def test_birkhoff_attracting_fixed_point(fam):
    r = birkhoff_average(fam, 2.5, X, 10**5)
    assert abs(r.mean - 0.6) <= 1e-6


def test_birkhoff_requires_enough_iterates(fam):
    with pytest.raises(DomainError):
        birkhoff_average(fam, 4.0, X, 999)


def test_birkhoff_exact_critical_hit_flagged(fam):
    # x0 = c at t = 2 stays on the superattracting fixed point without a nudge
    r = birkhoff_average(fam, 2.0, X, 10**4, burn_in=0, x0=0.5, chains=4)
    assert r.flags and abs(r.mean - 0.5) < 1e-6


def test_birkhoff_deterministic(fam):
    a = birkhoff_average(fam, 3.9, X, 10**5, seed=7)
    b = birkhoff_average(fam, 3.9, X, 10**5, seed=7)
    assert a == b


def test_ulam_rows_stochastic(fam):
    for n in (2, 3, 64, 1000):
        U = build_ulam(fam, 4.0, n)
        assert np.all(np.abs(U.row_sums() - 1) < 1e-12)
        assert U.P.data.min() >= 0


def test_ulam_two_bins_t4(fam):
    P = build_ulam(fam, 4.0, 2).P.toarray()
    assert P[0, 0] + P[0, 1] == pytest.approx(1.0, abs=1e-15)
    # |[0, 1/2) ∩ f^{-1}[0, 1/2)| = (1 - 1/sqrt(2))/2, divided by the bin width
    assert P[0, 0] == pytest.approx(1 - 1 / math.sqrt(2), abs=1e-14)
    assert P[0, 1] > 0


def test_stationary_permutation():
    perm = sp.csr_matrix(np.eye(4)[[1, 2, 3, 0]])
    d = stationary_density(UlamMatrix(4, perm), tol=1e-14)
    assert np.allclose(d.masses, 0.25, atol=1e-15)


def test_stationary_t25_concentrates(fam):
    d = ulam_density(fam, 2.5, 1000)
    assert np.argmax(d.masses) == 600
    assert d.masses[599] + d.masses[600] > 0.999


def test_ulam_t4_first_moment_2_14(fam):
    d = ulam_density(fam, 4.0, 2**14)
    assert abs(integrate_observable(d, X) - 0.5) <= 0.005


@pytest.mark.xfail(strict=True, reason="Ulam bias at 4096 bins is about 3.3e-3; see the boundary-bin analysis")
def test_ulam_t4_first_moment_4096_within_2e3(fam):
    d = ulam_density(fam, 4.0, 4096)
    assert abs(integrate_observable(d, X) - 0.5) <= 0.002


def _l1_gap(fam, n):
    return float(np.abs(ulam_density(fam, 4.0, n).masses - arcsine_bin_masses(n)).sum())


@pytest.mark.xfail(strict=True, reason="the measured rate per doubling is about 1/sqrt(2), not 1/2")
def test_ulam_l1_gap_halves_per_doubling(fam):
    gaps = [_l1_gap(fam, n) for n in (1024, 2048, 4096)]
    for a, b in zip(gaps, gaps[1:]):
        assert 0.375 <= b / a <= 0.625


def test_ulam_l1_gap_rate_measured(fam):
    gaps = [_l1_gap(fam, n) for n in (1024, 2048, 4096, 8192)]
    ratios = [b / a for a, b in zip(gaps, gaps[1:])]
    assert all(0.6 <= r <= 0.85 for r in ratios)
    assert gaps[0] == pytest.approx(0.0395, abs=5e-4)


def test_integrate_observable_trivial():
    d = BinnedDensity(10, np.full(10, 0.1))
    assert integrate_observable(d, X) == pytest.approx(0.5, abs=1e-15)
    assert integrate_observable(d, lambda x: np.full_like(x, 3.25)) == pytest.approx(3.25, abs=1e-14)


def test_integrate_observable_AD_matches_birkhoff(fam):
    A = observable_AD(0.75, 0.1)
    u = integrate_observable(ulam_density(fam, 4.0, 2**14), A)
    u2 = integrate_observable(ulam_density(fam, 4.0, 2**13), A)
    b = birkhoff_average(fam, 4.0, A, 10**7)
    assert abs(u - b.mean) <= 3 * (b.stderr + abs(u - u2))


def test_density_csv(tmp_path, fam):
    d = ulam_density(fam, 4.0, 8)
    p = tmp_path / "d.csv"
    d.to_csv(p)
    lines = p.read_text().splitlines()
    assert lines[0] == "bin_left,bin_right,mass" and len(lines) == 9
    assert sum(float(l.split(",")[2]) for l in lines[1:]) == pytest.approx(1.0, abs=1e-12)


def test_lyapunov_examples(fam):
    assert abs(lyapunov(fam, 4.0, 10**7).mean - math.log(2)) <= 0.01
    assert abs(lyapunov(fam, 2.5, 10**5).mean - math.log(0.5)) <= 0.01
    r = lyapunov(fam, 2.0, 10**5)
    assert r.mean < -10


@pytest.mark.parametrize(
    "which",
    [
        "t4",
        "mt0",
        pytest.param(
            "member",
            marks=pytest.mark.xfail(
                strict=True, reason="Ulam bias of about 2e-4 persists to 2^18 bins, far above the doubling error"
            ),
        ),
    ],
)
def test_estimator_agreement(fam, mt0, mt_seq, which):
    if which == "t4":
        t, center = 4.0, 0.75
    elif which == "mt0":
        t, center = mt0.t, mt0.periodic_point
    else:
        t, center = mt_seq[0].t, mt0.periodic_point
    # below about 2^15 bins a single doubling can underestimate the Ulam error
    d1 = ulam_density(fam, t, 2**16)
    d2 = ulam_density(fam, t, 2**15)
    for A in (X, X2, observable_AD(center, 0.05)):
        b = birkhoff_average(fam, t, A, 10**7)
        u1, u2 = integrate_observable(d1, A), integrate_observable(d2, A)
        assert abs(b.mean - u1) <= 3 * (b.stderr + abs(u1 - u2))


@given(st.floats(3.4, 4.0), st.integers(2, 200))
def test_ulam_coarse_graining(t, n):
    from srblab.map_family import logistic

    fam = logistic()
    fine = build_ulam(fam, t, 2 * n).P.toarray()
    coarse = build_ulam(fam, t, n).P.toarray()
    cg = 0.5 * fine.reshape(n, 2, n, 2).sum(axis=(1, 3))
    assert np.max(np.abs(cg - coarse)) < 1e-9


@given(st.floats(3.4, 4.0), st.integers(2, 128))
def test_stationary_is_fixed_point(t, n):
    from srblab.map_family import logistic

    fam = logistic()
    U = build_ulam(fam, t, n)
    d = stationary_density(U, tol=1e-12)
    assert abs(d.masses.sum() - 1) < 1e-12 and d.masses.min() >= 0
    assert np.abs(U.P.T @ d.masses - d.masses).sum() <= 10 * 1e-12
