"""Response experiments: the bump observable A_D, response curves along
Misiurewicz-Thurston sequences, Hölder-exponent fits, spike displacement and
the three-term decomposition of phi_t - phi.
"""

from __future__ import annotations

import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy import stats

from .map_family import DomainError, MapFamily
from .parameter_select import AdmissiblePair, MTParameter, NotAdmissibleError, SequenceMember
from .srb_estimate import birkhoff_average, integrate_observable, ulam_density
from .tower import Tower, build_tower, cutoff_family
from .transfer_op import (
    Eigenpair,
    TowerGrid,
    TransferOperator,
    default_lambda,
    leading_eigenpair,
    pair_observable,
)


class InsufficientSpanError(ValueError):
    pass


# ---------------------------------------------------------------- observable


def _smoothstep9(s):
    s = np.clip(s, 0.0, 1.0)
    return s**5 * (126 - 420 * s + 540 * s**2 - 315 * s**3 + 70 * s**4)


_S9 = np.polynomial.Polynomial([0, 0, 0, 0, 0, 126, -420, 540, -315, 70])
_S9_INT = _S9.integ()


@dataclass(frozen=True)
class ObservableAD:
    """Bump of half-width D around ``center``.

    profile 'tent': 1 - |x - center| / D, the only profile with peak 1, support
    [center - D, center + D] and slope at most 1/D.
    profile 'smooth': A = g(1 - |x - center| / D) with g' = S9(r/eps) S9((1 - r)/eps),
    a C^4 bump, flat at the peak and at the support edges, with peak 1 - eps.
    """

    center: float
    D: float
    profile: str = "tent"
    eps: float = 0.1

    def __post_init__(self):
        if not (0.0 < self.center - self.D and self.center + self.D < 1.0):
            raise DomainError("support of A_D must lie in (0, 1)")
        if self.profile not in ("tent", "smooth"):
            raise DomainError(f"unknown profile {self.profile!r}")

    def _g(self, r):
        if self.profile == "tent":
            return r
        e = self.eps
        lo = e * _S9_INT(np.clip(r / e, 0.0, 1.0))
        hi = (1.0 - e) - e * _S9_INT(np.clip((1.0 - r) / e, 0.0, 1.0))
        mid = e / 2 + (r - e)
        return np.where(r < e, lo, np.where(r > 1 - e, hi, mid))

    def _gp(self, r):
        if self.profile == "tent":
            return np.ones_like(r)
        return _smoothstep9(r / self.eps) * _smoothstep9((1.0 - r) / self.eps)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        r = 1.0 - np.abs(x - self.center) / self.D
        return np.where(r > 0, self._g(np.clip(r, 0.0, 1.0)), 0.0)

    def derivative(self, x):
        x = np.asarray(x, dtype=float)
        r = 1.0 - np.abs(x - self.center) / self.D
        s = -np.sign(x - self.center) / self.D
        return np.where((r > 0) & (r < 1), s * self._gp(np.clip(r, 0.0, 1.0)), 0.0)

    def lq_norm(self, q, n=200_001):
        x = np.linspace(self.center - self.D, self.center + self.D, n)
        y = np.abs(self(x)) ** q
        return float(np.trapezoid(y, x)) ** (1.0 / q)


def observable_AD(center, D, profile="tent", eps=0.1) -> ObservableAD:
    return ObservableAD(float(center), float(D), profile, eps)


# ---------------------------------------------------------------- response curves


@dataclass
class ResponseRow:
    t: float
    abs_dt: float
    M: int
    deltaR: float
    stderr: float
    flags: List[str] = field(default_factory=list)

    @property
    def ratio_sqrt(self):
        return abs(self.deltaR) / math.sqrt(self.abs_dt) if self.abs_dt > 0 else math.nan

    @property
    def usable(self):
        return self.abs_dt > 0 and abs(self.deltaR) > 3 * self.stderr and "excluded" not in self.flags


@dataclass
class HolderFit:
    slope: float
    intercept: float
    r2: float
    ci: tuple
    n_rows: int


@dataclass
class ResponseCurve:
    t0: float
    R0: float
    R0_stderr: float
    rows: List[ResponseRow]
    fit: Optional[HolderFit] = None
    ratio_band: Optional[tuple] = None
    meta: dict = field(default_factory=dict)

    def usable_rows(self):
        return [r for r in self.rows if r.usable]

    def band_factor(self):
        if not self.ratio_band:
            return math.nan
        lo, hi = self.ratio_band
        return hi / lo if lo > 0 else math.inf

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("t,abs_dt,M,deltaR,stderr,ratio_sqrt\n")
            for r in self.rows:
                fh.write(f"{r.t:.17g},{r.abs_dt:.17g},{r.M},{r.deltaR:.17g},{r.stderr:.17g},{r.ratio_sqrt:.17g}\n")

    def summary(self):
        d = {"t0": self.t0, "R0": self.R0, "R0_stderr": self.R0_stderr, "rows": len(self.rows), "usable_rows": len(self.usable_rows())}
        if self.fit:
            d.update({"slope": self.fit.slope, "intercept": self.fit.intercept, "r2": self.fit.r2, "slope_ci": list(self.fit.ci)})
        if self.ratio_band:
            d.update({"ratio_band": list(self.ratio_band), "band_factor": self.band_factor()})
        d["meta"] = self.meta
        return d


def _estimate(family, t, A, estimator, n_iters, seed, n_bins, chains):
    out = {}
    if estimator in ("birkhoff", "both"):
        res = birkhoff_average(family, t, A, n_iters, seed=seed, chains=chains)
        out["birkhoff"] = (res.mean, res.stderr)
    if estimator in ("ulam", "both"):
        d1 = ulam_density(family, t, n_bins)
        d2 = ulam_density(family, t, n_bins // 2)
        v1 = integrate_observable(d1, A)
        v2 = integrate_observable(d2, A)
        out["ulam"] = (v1, abs(v1 - v2))
    return out


def response_curve(
    family: MapFamily,
    t0,
    ts: Sequence,
    A: Callable,
    estimator: str = "birkhoff",
    n_iters: int = 10**8,
    base_factor: int = 4,
    seed: int = 0,
    n_bins: int = 2**14,
    chains: Optional[int] = None,
    threads: int = 1,
    fit: bool = True,
) -> ResponseCurve:
    """Rows of Delta R = R_A(t) - R_A(t0) for each t in ``ts``.

    ``ts`` may hold floats or SequenceMember objects (whose truncation
    levels are recorded).  The base value uses ``base_factor`` times more
    iterates.  Each row has its own seed, so the numbers do not depend on
    ``threads``.
    """
    if estimator not in ("birkhoff", "ulam", "both"):
        raise DomainError(f"unknown estimator {estimator!r}")
    t0f = t0.t if isinstance(t0, MTParameter) else float(t0)
    base = _estimate(family, t0f, A, estimator, n_iters * base_factor, seed, n_bins, chains)

    def row(i_item):
        i, item = i_item
        if isinstance(item, SequenceMember):
            t, M = item.t, item.M
        else:
            t, M = float(item), -1
        if t == t0f:
            return ResponseRow(t, 0.0, M, 0.0, 0.0)
        est = _estimate(family, t, A, estimator, n_iters, seed + 1 + i, n_bins, chains)
        flags = []
        key = "birkhoff" if "birkhoff" in est else "ulam"
        dR = est[key][0] - base[key][0]
        se = math.hypot(est[key][1], base[key][1])
        if estimator == "both":
            du = est["ulam"][0] - base["ulam"][0]
            tol = se + math.hypot(est["ulam"][1], base["ulam"][1])
            if abs(du - dR) > 5 * tol:
                flags.append("excluded")
                flags.append(f"estimators disagree: birkhoff {dR:.3g}, ulam {du:.3g}")
            elif abs(du - dR) > tol:
                flags.append("estimator disagreement")
        return ResponseRow(t, abs(t - t0f), M, dR, se, flags)

    items = list(enumerate(ts))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            rows = list(ex.map(row, items))
    else:
        rows = [row(it) for it in items]
    rows.sort(key=lambda r: r.abs_dt)
    key = "birkhoff" if "birkhoff" in base else "ulam"
    curve = ResponseCurve(
        t0=t0f,
        R0=base[key][0],
        R0_stderr=base[key][1],
        rows=rows,
        meta={"estimator": estimator, "n_iters": n_iters, "base_factor": base_factor, "seed": seed, "n_bins": n_bins},
    )
    use = curve.usable_rows()
    if use:
        ratios = [r.ratio_sqrt for r in use]
        curve.ratio_band = (min(ratios), max(ratios))
    if fit:
        try:
            curve.fit = fit_holder_exponent(curve)
        except InsufficientSpanError as err:
            curve.meta["fit_error"] = str(err)
    return curve


def fit_holder_exponent(curve, min_rows: int = 5, min_decades: float = 2.0, level: float = 0.95) -> HolderFit:
    """OLS of log|Delta R| on log|t - t0| over usable rows."""
    rows = curve.usable_rows() if isinstance(curve, ResponseCurve) else list(curve)
    x = np.log(np.array([r.abs_dt for r in rows], dtype=float))
    y = np.log(np.abs(np.array([r.deltaR for r in rows], dtype=float)))
    if len(rows) < min_rows:
        raise InsufficientSpanError(f"{len(rows)} usable rows, need {min_rows}")
    if (x.max() - x.min()) / math.log(10) < min_decades:
        raise InsufficientSpanError("usable rows span fewer than the required decades in |t - t0|")
    res = stats.linregress(x, y)
    tq = stats.t.ppf(0.5 + level / 2, len(rows) - 2)
    r2 = float(res.rvalue**2)
    return HolderFit(float(res.slope), float(res.intercept), r2, (float(res.slope - tq * res.stderr), float(res.slope + tq * res.stderr)), len(rows))


def synthetic_rows(dts, fn) -> List[ResponseRow]:
    return [ResponseRow(float(d), float(d), -1, float(fn(d)), 0.0) for d in dts]


def write_svg(curve: ResponseCurve, path, band: Optional[float] = None):
    """Log-log plot of |Delta R| against |t - t0| with the fitted line."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    use = curve.usable_rows()
    rest = [r for r in curve.rows if not r.usable and r.abs_dt > 0]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.loglog([r.abs_dt for r in use], [abs(r.deltaR) for r in use], "o", label="rows used in fit")
    if rest:
        ax.loglog([r.abs_dt for r in rest], [max(abs(r.deltaR), 1e-12) for r in rest], "x", color="grey", label="noise floor")
    if curve.fit:
        xs = np.array([min(r.abs_dt for r in curve.rows if r.abs_dt > 0), max(r.abs_dt for r in curve.rows)])
        ys = np.exp(curve.fit.intercept) * xs**curve.fit.slope
        ax.loglog(xs, ys, "-", label=f"slope {curve.fit.slope:.3f}")
        if band:
            ax.fill_between(xs, ys / band, ys * band, alpha=0.15)
    ax.set_xlabel("|t - t0|")
    ax.set_ylabel("|R(t) - R(t0)|")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


# ---------------------------------------------------------------- spikes and the decomposition


@dataclass
class TowerSetup:
    """Tower, cutoffs, grid and operator of one parameter."""

    tower: Tower
    cutoffs: object
    grid: TowerGrid
    op: TransferOperator


def setup_base(family, mt: MTParameter, K_max: int = 64, delta=None, L=8.0, lam=None, n0=2**14, n_level=2**12) -> TowerSetup:
    pts = mt.postcritical_orbit(family, K_max + 3)
    tw = build_tower(family, mt.t, delta, L, 0.0, K_max, 1, points=pts)
    cf = cutoff_family(tw)
    if lam is None:
        # lambda_c and rho are both taken as the postcritical expansion Lambda
        lam = default_lambda(mt.Lambda, mt.Lambda)
    g = TowerGrid(tw, lam, n0, n_level)
    return TowerSetup(tw, cf, g, TransferOperator(tw, cf, g))


def setup_identified(family, base: TowerSetup, mt: MTParameter, horizon: int) -> TowerSetup:
    K = base.tower.K_max
    pts = mt.postcritical_orbit(family, K + 3)
    tw = build_tower(family, mt.t, K_max=K, points=pts, identify_with=base.tower, horizon=horizon)
    cf = cutoff_family(tw, base=base.cutoffs)
    g = TowerGrid(tw, base.grid.lam, base.grid.n0, base.grid.n_level)
    return TowerSetup(tw, cf, g, TransferOperator(tw, cf, g))


def _on_grid(psi, grid):
    """The same cell masses viewed on another grid with identical lower levels."""
    from .transfer_op import TowerFunction

    m = np.zeros(grid.size)
    n = min(grid.size, psi.grid.size)
    m[:n] = psi.m[:n]
    return TowerFunction(grid, m)


def spike_levels(base: TowerSetup, tower_t: Tower, ep: Eigenpair, A: Callable) -> np.ndarray:
    """Per-level lambda^k int (A(f_t^k x) - A(f^k x)) phi_k(x) dx."""
    top = min(ep.M, tower_t.K_max)
    levels = range(top + 1)
    return pair_observable(tower_t, ep.phi, A, levels) - pair_observable(base.tower, ep.phi, A, levels)


def spike_displacement(base: TowerSetup, tower_t: Tower, ep: Eigenpair, A: Callable, pair: Optional[AdmissiblePair] = None) -> float:
    """int A (Pi_t - Pi)(phi_hat) for the truncated eigenfunction ``ep`` (level 2M in the MT case)."""
    if pair is not None:
        if abs(pair.t - tower_t.t) > 0 or ep.M > base.tower.K_max:
            raise NotAdmissibleError("pair does not match the perturbed tower")
        if tower_t.identified_horizon is not None and tower_t.identified_horizon < ep.M:
            raise NotAdmissibleError("towers are not identified up to the eigenfunction level")
    if tower_t.t == base.tower.t:
        return 0.0
    return math.fsum(spike_levels(base, tower_t, ep, A))


@dataclass
class SignCoherence:
    per_level_fraction: List[float]
    min_fraction: float
    levels_checked: int


def sign_coherence(base: TowerSetup, tower_t: Tower, ep: Eigenpair, A: Callable, min_weight: float = 0.0) -> SignCoherence:
    """Fraction of grid nodes per level where (A(f_t^k) - A(f^k)) phi_k has the level's majority sign."""
    g = ep.phi.grid
    fr = []
    for k in range(1, min(ep.M, tower_t.K_max) + 1):
        m = ep.phi.level(k)
        if not np.any(m > min_weight):
            continue
        u = 0.5 * (g.u_edges(k)[:-1] + g.u_edges(k)[1:])
        v = (np.asarray(A(tower_t.image(k, u))) - np.asarray(A(base.tower.image(k, u)))) * m
        nz = v[np.abs(v) > 0]
        if len(nz) == 0:
            continue
        pos = np.sum(nz > 0)
        fr.append(max(pos, len(nz) - pos) / len(nz))
    return SignCoherence(fr, min(fr) if fr else 1.0, len(fr))


@dataclass
class Decomposition:
    t0: float
    t: float
    M: int
    term1: float
    term2: float
    term3: float
    total: float
    telescoping_residual: float
    kappa_M: float
    kappa_tM: float
    flags: List[str] = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def decomposition_report(
    family: MapFamily,
    base: TowerSetup,
    member: SequenceMember,
    A: Callable,
    tol: float = 1e-10,
    phi_full: Optional[Eigenpair] = None,
) -> Decomposition:
    """A-pairings of the three brackets of phi_t - phi at truncation level 2M.

    term1 = int A [Pi_t(phi_t - phi_{t,2M}) + Pi(phi_{2M} - phi)],
    term2 = int A Pi_t(phi_{t,2M} - phi_{2M}),
    term3 = int A (Pi_t - Pi) phi_{2M}  (the spike displacement),
    total = int A (Pi_t phi_t - Pi phi).
    """
    M2 = 2 * member.M
    K = base.tower.K_max
    if M2 >= K:
        raise DomainError(f"2M = {M2} exceeds the tower height {K}")
    if phi_full is None:
        phi_full = leading_eigenpair(base.op, K, tol)
    ep0 = leading_eigenpair(base.op, M2, tol)
    ts = setup_identified(family, base, member.mt, M2)
    ept = leading_eigenpair(ts.op, ts.tower.K_max, tol)
    eptM = leading_eigenpair(ts.op, M2, tol)
    tw0, twt = base.tower, ts.tower

    def P(tower, psi):
        return math.fsum(pair_observable(tower, psi, A))

    phi0M_t = _on_grid(ep0.phi, ts.grid)
    a = P(twt, ept.phi) - P(twt, eptM.phi)
    b = P(tw0, ep0.phi) - P(tw0, phi_full.phi)
    term1 = a + b
    term2 = P(twt, eptM.phi) - P(twt, phi0M_t)
    term3 = P(twt, phi0M_t) - P(tw0, ep0.phi)
    total = P(twt, ept.phi) - P(tw0, phi_full.phi)
    s = term1 + term2 + term3
    scale = max(abs(term1), abs(term2), abs(term3), 1e-300)
    return Decomposition(
        t0=tw0.t,
        t=twt.t,
        M=member.M,
        term1=term1,
        term2=term2,
        term3=term3,
        total=total,
        telescoping_residual=abs(s - total) / scale,
        kappa_M=ep0.kappa,
        kappa_tM=eptM.kappa,
        flags=list(twt.flags),
    )


def d_sweep(base: TowerSetup, setups_t: Sequence[TowerSetup], ep: Eigenpair, center: float, Ds=(0.02, 0.05, 0.1)) -> dict:
    """Band factor of |spike| / |t - t0|^{1/2} for several half-widths D."""
    out = {}
    for D in Ds:
        A = observable_AD(center, D)
        r = [abs(spike_displacement(base, s.tower, ep, A)) / math.sqrt(abs(s.tower.t - base.tower.t)) for s in setups_t]
        out[D] = max(r) / min(r) if min(r) > 0 else math.inf
    return out
