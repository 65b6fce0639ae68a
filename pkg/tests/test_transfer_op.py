import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from srblab.map_family import DomainError
from srblab.srb_estimate import ulam_density
from srblab.transfer_op import (
    EigenpairError,
    TowerFunction,
    apply_transfer,
    default_lambda,
    dual_mass,
    leading_eigenpair,
    lp_exponent,
    norm,
    project,
    theta0,
    truncate,
)


def random_psi(op, seed, levels=None):
    rng = np.random.default_rng(seed)
    g = op.grid
    m = rng.random(g.size) * np.repeat(rng.random(g.K + 1), [g.n(k) for k in range(g.K + 1)])
    if levels is not None:
        keep = np.zeros(g.size, dtype=bool)
        for k in levels:
            keep[g.sl(k)] = True
        m[~keep] = 0.0
    return TowerFunction(g, m)


@pytest.fixture(scope="module")
def eigs(op4):
    return {M: leading_eigenpair(op4, M) for M in (10, 15, 20, 25, 30)}


def test_default_lambda_range():
    lam = default_lambda(4.0, 2.0)
    assert 1 < lam < min(math.sqrt(4.0), math.sqrt(2.0))
    assert lam == pytest.approx(1.3899182198, abs=1e-9)
    assert 1 / theta0(4.0, lam) == pytest.approx(0.83684872, abs=1e-8)


def test_inner_half_climbs(op4, tower4):
    g = op4.grid
    d = tower4.delta
    psi = TowerFunction.from_levels(g, [lambda x: ((np.abs(x - 0.5) <= d / 2 - 2.0 / g.n0)).astype(float)])
    out = apply_transfer(op4, psi)
    assert np.all(out.level(0) == 0.0)
    assert out.level(1).sum() == pytest.approx(psi.level(0).sum() / g.lam, rel=1e-13)
    u = g.u_edges(1)
    mid = 0.5 * (u[:-1] + u[1:])
    inner = np.abs(mid) < d / 2 - 4 * g.width(0)
    assert np.allclose(out.values(1)[inner], 1 / g.lam, rtol=1e-12)


def test_zero_maps_to_zero(op4):
    z = TowerFunction(op4.grid, np.zeros(op4.grid.size))
    assert not np.any(apply_transfer(op4, z).m)
    for kind in ("L1", "W11"):
        assert norm(z, kind) == 0.0
    assert norm(z, "Lp", p=2.0, Lambda=4.0) == 0.0


def test_nu_conservation_random(op4):
    for seed in range(20):
        psi = random_psi(op4, seed)
        assert abs(dual_mass(apply_transfer(op4, psi)) / dual_mass(psi) - 1) < 1e-8


def test_weak_norm_non_expansive(op4):
    for seed in range(5):
        psi = random_psi(op4, 100 + seed)
        n0 = norm(psi, "L1")
        for _ in range(20):
            psi = apply_transfer(op4, psi)
            assert norm(psi, "L1") <= (1 + 1e-8) * n0


@given(st.integers(0, 2**31))
def test_positivity(op4, seed):
    psi = random_psi(op4, seed)
    assert apply_transfer(op4, psi).m.min() >= 0.0


def test_project_level0_identity(op4):
    psi = random_psi(op4, 3, levels=[0])
    assert np.array_equal(project(op4, psi), psi.level(0))


@given(st.integers(0, 2**31))
def test_project_l1_bound(op4, seed):
    psi = random_psi(op4, seed)
    signs = np.where(np.random.default_rng(seed).random(op4.grid.size) < 0.5, -1.0, 1.0)
    psi.m *= signs
    assert np.abs(project(op4, psi, 4096)).sum() <= norm(psi, "L1") * (1 + 1e-12)


def test_commutation_error_decreases_under_refinement(fam):
    from srblab.tower import build_tower, cutoff_family
    from srblab.transfer_op import TowerGrid, TransferOperator

    tw = build_tower(fam, 4.0, 0.05, K_max=40)
    cf = cutoff_family(tw)
    errs = []
    for n0, nl in ((2**11, 2**9), (2**12, 2**10)):
        op = TransferOperator(tw, cf, TowerGrid(tw, default_lambda(4.0, 2.0), n0, nl))
        fns = [lambda x: 1 + 0.5 * np.sin(2 * np.pi * x)] + [
            (lambda u, k=k: 0.3 ** k * np.abs(u) / tw.delta) for k in range(1, tw.K_max + 1)
        ]
        psi = TowerFunction.from_levels(op.grid, fns)
        lhs = op.ground_ulam @ project(op, psi)
        rhs = project(op, apply_transfer(op, psi))
        errs.append(np.abs(lhs - rhs).sum())
    assert errs[1] < 0.75 * errs[0]


def test_truncate_identity_and_idempotent(op4):
    psi = random_psi(op4, 5)
    assert np.array_equal(truncate(psi, op4.grid.K).m, psi.m)
    assert np.array_equal(truncate(psi, 100).m, psi.m)
    once = truncate(psi, 7)
    assert np.array_equal(truncate(once, 7).m, once.m)


@given(st.integers(0, 2**31), st.integers(0, 45))
def test_truncation_properties(op4, seed, M):
    psi = random_psi(op4, seed)
    tr = truncate(psi, M)
    assert np.array_equal(truncate(tr, M).m, tr.m)
    for kind in ("L1", "W11"):
        assert norm(tr, kind) <= norm(psi, kind)
    assert norm(tr, "Lp", p=2.0, Lambda=4.0) <= norm(psi, "Lp", p=2.0, Lambda=4.0)
    assert dual_mass(tr) <= dual_mass(psi)


def test_single_level_norm(op4):
    g = op4.grid
    m = np.zeros(g.size)
    m[g.sl(7)] = 0.25 / g.n(7)
    psi = TowerFunction(g, m)
    assert norm(psi, "L1") == pytest.approx(g.lam**7 * 0.25, rel=1e-14)


def test_lp_requires_Lambda(op4):
    with pytest.raises(DomainError):
        norm(random_psi(op4, 0), "Lp", p=2.0)


@given(st.integers(0, 2**31), st.floats(1.1, 4.0))
def test_lp_embedding(op4, tower4, seed, p):
    g = op4.grid
    r = lp_exponent(g.lam, 4.0, p)
    # Hoelder on each level: lambda^k |psi_k|_1 <= lambda^{k(1-r)} |J_k|^{1-1/p} lambda^{kr} |psi_k|_p
    lens = [1.0] + [tower4.J_length(k) for k in range(1, g.K + 1)]
    C = max(g.lam ** (k * (1 - r)) * lens[k] ** (1 - 1 / p) for k in range(g.K + 1))
    psi = random_psi(op4, seed)
    assert norm(psi, "L1") <= C * norm(psi, "Lp", p=p, Lambda=4.0) * (1 + 1e-12)


@given(st.integers(0, 2**31), st.integers(0, 45))
def test_dual_mass_properties(op4, seed, M):
    psi = random_psi(op4, seed)
    assert dual_mass(psi) == pytest.approx(norm(psi, "L1"), rel=1e-13)
    assert dual_mass(truncate(psi, M)) <= dual_mass(psi)


def test_eigenpairs(op4, eigs):
    lo = 1 / theta0(4.0, op4.grid.lam)
    gaps = []
    for M, ep in eigs.items():
        assert lo < ep.kappa <= 1
        assert ep.phi.m.min() >= 0
        assert abs(dual_mass(ep.phi) - 1) < 1e-10
        assert ep.residual < 1e-10
        gaps.append(1 - ep.kappa)
    assert all(b < a for a, b in zip(gaps, gaps[1:]))
    fit = stats.linregress(list(eigs), np.log(gaps))
    assert fit.rvalue**2 > 0.9 and fit.slope < 0
    taus = [ep.tau_M for ep in eigs.values()]
    tfit = stats.linregress(np.log(taus), np.log(gaps))
    assert tfit.slope > 0 and tfit.rvalue**2 > 0.9


def test_eigenfunction_matches_ulam(fam, op4, eigs):
    ref = ulam_density(fam, 4.0, 2**14).masses
    assert np.abs(project(op4, eigs[30].phi) / dual_mass(eigs[30].phi) - ref).sum() < 0.05


def test_eigenpair_nonconvergence(op4):
    with pytest.raises(EigenpairError) as err:
        leading_eigenpair(op4, 20, max_iter=3)
    assert len(err.value.history) == 3


def test_eigenpair_serialization(eigs):
    d = eigs[10].to_dict()
    assert {"M", "kappa", "residual", "tau_M"} <= set(d)
    assert d["phi"]["levels"][0]["k"] == 0


def test_lasota_yorke_trend(op4):
    psi = TowerFunction.from_levels(op4.grid, [lambda x: 1 + 0.9 * np.sin(2 * np.pi * 512 * x)])
    w = []
    for _ in range(16):
        w.append(norm(psi, "W11"))
        psi = apply_transfer(op4, psi)
    floor = w[-1]
    ex = np.array(w[1:9]) - floor
    fit = stats.linregress(np.arange(1, 9), np.log(ex))
    assert fit.slope < 0 and fit.rvalue**2 > 0.9
    assert w[0] > 100 * floor and max(w[9:]) < 1.01 * floor
