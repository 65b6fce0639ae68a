"""Goodness checks, Misiurewicz-Thurston parameters and admissible pairs.

The conditions in the theory quantify over all iterates; everything here is
checked up to a finite horizon and reported with margins.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

import mpmath
import numpy as np

from .map_family import (
    DomainError,
    MapFamily,
    check_param,
    critical_orbit,
    kahan_cumsum,
    orbit_log_derivs,
    transversality_sum,
)

log = logging.getLogger(__name__)

DEFAULT_HORIZON = 10_000


class BracketError(ValueError):
    pass


class AttractingCycleError(ValueError):
    def __init__(self, msg, multiplier_log):
        super().__init__(msg)
        self.multiplier_log = multiplier_log


class NotAdmissibleError(ValueError):
    pass


@dataclass
class GoodnessReport:
    lambda_c: Optional[float]
    H0: int
    alpha: Optional[float]
    horizon: int
    ce_ok: Optional[bool] = None
    recurrence_ok: Optional[bool] = None
    worst_ce_margin: Optional[float] = None
    worst_rec_margin: Optional[float] = None
    worst_ce_index: Optional[int] = None
    worst_rec_index: Optional[int] = None
    worst_distance: Optional[float] = None
    flags: List[str] = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def check_collet_eckmann(family: MapFamily, t, lambda_c, H0: int, N: int, points=None) -> GoodnessReport:
    """log|(f^k)'(c_1)| >= k log(lambda_c) for H0 <= k <= N."""
    if not lambda_c > 1:
        raise DomainError("lambda_c must exceed 1")
    if not 1 <= H0 <= N:
        raise DomainError("need 1 <= H0 <= N")
    orb = critical_orbit(family, t, N, points=points)
    rep = GoodnessReport(lambda_c=lambda_c, H0=H0, alpha=None, horizon=N)
    ks = np.arange(H0, N + 1)
    margins = orb.log_derivs[H0:] - ks * math.log(lambda_c)
    i = int(np.argmin(margins))
    rep.worst_ce_margin = float(margins[i])
    rep.worst_ce_index = int(ks[i])
    rep.ce_ok = bool(rep.worst_ce_margin >= 0)
    if orb.zero_index is not None:
        rep.flags.append("superstable: derivative vanishes on the critical orbit")
        rep.ce_ok = False
    return rep


def check_polynomial_recurrence(family: MapFamily, t, alpha, H0: int, N: int, C: float = 1.0, points=None) -> GoodnessReport:
    """|c_k - c| >= C^{-1} k^{-alpha} for H0 <= k <= N.

    The margin is log|c_k - c| + alpha log k + log C.  For alpha = 0 the
    condition is a uniform distance C^{-1}; the smallest distance is always
    reported as ``worst_distance``.
    """
    if alpha < 0:
        raise DomainError("alpha must be >= 0")
    if not 1 <= H0 <= N:
        raise DomainError("need 1 <= H0 <= N")
    orb = critical_orbit(family, t, N, points=points)
    ks = np.arange(H0, N + 1)
    dist = np.abs(orb.points[H0:] - family.c)
    with np.errstate(divide="ignore"):
        margins = np.log(dist) + alpha * np.log(ks) + math.log(C)
    i = int(np.argmin(margins))
    rep = GoodnessReport(lambda_c=None, H0=H0, alpha=alpha, horizon=N)
    rep.worst_rec_margin = float(margins[i])
    rep.worst_rec_index = int(ks[i])
    rep.worst_distance = float(np.min(dist))
    rep.recurrence_ok = bool(rep.worst_rec_margin >= 0)
    if rep.worst_distance == 0.0:
        rep.flags.append("critical point returns exactly")
    return rep


@dataclass
class ExpansionReport:
    rho: float
    C0: float
    delta: float
    trials: int
    max_n: int
    sample_x: np.ndarray
    sample_n: np.ndarray
    sample_margin_free: np.ndarray
    sample_margin_entry: np.ndarray
    per_n_min_logderiv: np.ndarray
    statistical: bool = True

    @property
    def min_margin_free(self):
        return float(np.nanmin(self.sample_margin_free))

    @property
    def min_margin_entry(self):
        m = self.sample_margin_entry[np.isfinite(self.sample_margin_entry)]
        return float(np.min(m)) if len(m) else math.inf

    @property
    def ok(self):
        return self.min_margin_free >= 0 and self.min_margin_entry >= 0

    def to_dict(self):
        return {
            "rho": self.rho,
            "C0": self.C0,
            "delta": self.delta,
            "trials": self.trials,
            "max_n": self.max_n,
            "min_margin_free": self.min_margin_free,
            "min_margin_entry": self.min_margin_entry,
            "ok": self.ok,
            "statistical": True,
        }


def check_expansion_conditions(family: MapFamily, t, rho, C0, delta, trials: int = 1000, max_n: int = 200, seed: int = 0) -> ExpansionReport:
    """Sampled check of the two expansion conditions away from c.

    For each sampled x, orbit segments with f^j(x) outside (c - delta, c + delta)
    for j < n are tested against C0 delta rho^n, and the entry time into the
    neighbourhood against C0 rho^n.  Margins are in log form.
    """
    if not rho > 1 or not delta > 0:
        raise DomainError("need rho > 1 and delta > 0")
    check_param(family, t)
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, trials)
    y = x.copy()
    L = np.zeros(trials)
    alive = np.ones(trials, dtype=bool)
    n_stop = np.full(trials, max_n)
    free_min = np.full(trials, np.inf)
    entry = np.full(trials, np.nan)
    per_n = np.full(max_n + 1, np.nan)
    base_free = math.log(C0) + math.log(delta)
    base_entry = math.log(C0)
    lr = math.log(rho)
    for n in range(max_n + 1):
        inside = np.abs(y - family.c) < delta
        # condition with n: all j < n outside, which holds for alive samples
        if np.any(alive):
            mfree = L[alive] - (base_free + n * lr)
            free_min[alive] = np.minimum(free_min[alive], mfree)
            cur = np.nanmin(L[alive])
            per_n[n] = cur
        hit = alive & inside
        entry[hit] = L[hit] - (base_entry + n * lr)
        n_stop[hit] = n
        alive &= ~inside
        if n == max_n or not np.any(alive):
            break
        d = np.abs(family.dx(t, y))
        with np.errstate(divide="ignore"):
            L = L + np.where(alive, np.log(d), 0.0)
        y = family.eval(t, y)
    return ExpansionReport(
        rho=rho,
        C0=C0,
        delta=delta,
        trials=trials,
        max_n=max_n,
        sample_x=x,
        sample_n=n_stop,
        sample_margin_free=free_min,
        sample_margin_entry=entry,
        per_n_min_logderiv=per_n,
    )


# ---------------------------------------------------------------- MT parameters


@dataclass
class MTParameter:
    t: float
    preperiod: int
    period: int
    periodic_point: float
    multiplier_log: float
    residual: float
    Lambda: float
    t_hp: str = ""
    family_name: str = "logistic"

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        keys = cls.__dataclass_fields__.keys()
        return cls(**{k: v for k, v in d.items() if k in keys})

    def t_mp(self):
        return mpmath.mpf(self.t_hp) if self.t_hp else mpmath.mpf(self.t)

    def postcritical_orbit(self, family: MapFamily, N: int, dps: int = 50) -> np.ndarray:
        """c_0..c_N of the exact pre-periodic orbit (the cycle is repeated exactly)."""
        with mpmath.workdps(dps):
            t = self.t_mp()
            x = mpmath.mpf(family.c)
            pts = [x]
            for _ in range(min(N, self.preperiod)):
                x = family.eval(t, x)
                pts.append(x)
            if N > self.preperiod:
                p = _mp_periodic_point(family, t, self.period, mpmath.mpf(self.periodic_point))
                cyc = [p]
                for _ in range(self.period - 1):
                    cyc.append(family.eval(t, cyc[-1]))
                # the landing point is replaced by the exact cycle point
                pts[self.preperiod] = cyc[0]
                k = 1
                while len(pts) < N + 1:
                    pts.append(cyc[k % self.period])
                    k += 1
            return np.array([float(v) for v in pts])


def _mp_periodic_point(family, t, period, seed, iters=200):
    p = mpmath.mpf(seed)
    for _ in range(iters):
        y = p
        der = mpmath.mpf(1)
        for _ in range(period):
            der *= family.dx(t, y)
            y = family.eval(t, y)
        F = y - p
        dF = der - 1
        if dF == 0:
            break
        step = F / dF
        p = p - step
        if abs(step) <= mpmath.eps * 16 * max(1, abs(p)):
            break
    return p


def _np_periodic_point(family, t, period, seed, iters=60):
    """Vectorized Newton continuation of a periodic point over an array of t."""
    t = np.asarray(t, dtype=float)
    p = np.broadcast_to(np.asarray(seed, dtype=float), t.shape).copy()
    for _ in range(iters):
        y = p
        der = np.ones_like(p)
        for _ in range(period):
            der = der * family.dx(t, y)
            y = family.eval(t, y)
        dF = der - 1.0
        with np.errstate(divide="ignore", invalid="ignore"):
            step = np.where(dF != 0, (y - p) / dF, 0.0)
        p = p - step
        if np.all(np.abs(step) <= 1e-15):
            break
    return p


def _periodic_candidates(family, t, period, grid=4001):
    xs = np.linspace(0.0, 1.0, grid)
    y = xs.copy()
    for _ in range(period):
        y = family.eval(t, y)
    F = y - xs
    cands = []
    if F[0] == 0.0:
        cands.append(0.0)
    idx = np.nonzero(np.sign(F[:-1]) * np.sign(F[1:]) < 0)[0]
    for i in idx:
        p = float(_np_periodic_point(family, t, period, 0.5 * (xs[i] + xs[i + 1]))[()])
        cands.append(p)
    out = []
    for p in cands:
        # discard points of lower minimal period
        y = p
        minimal = True
        for k in range(1, period):
            y = float(family.eval(t, y))
            if period % k == 0 and abs(y - p) < 1e-10:
                minimal = False
        if minimal and all(abs(p - q) > 1e-10 for q in out):
            out.append(p)
    return out


def _gap_mp(family, t, n, period, p_seed):
    x = mpmath.mpf(family.c)
    for _ in range(n):
        x = family.eval(t, x)
    p = _mp_periodic_point(family, t, period, p_seed)
    return x - p, p


def _mp_bisect(family, a, b, n, period, p_seed, dps):
    """Bisection on g(t) = f_t^n(c) - p_t, then a secant polish."""
    with mpmath.workdps(dps):
        a = mpmath.mpf(a)
        b = mpmath.mpf(b)
        ga, pa = _gap_mp(family, a, n, period, p_seed)
        gb, pb = _gap_mp(family, b, n, period, p_seed)
        if ga == 0:
            return a, ga, pa
        if gb == 0:
            return b, gb, pb
        if ga * gb > 0:
            raise BracketError(f"no sign change of f_t^{n}(c) - p_t on [{float(a)}, {float(b)}]")
        p = pa
        width_goal = mpmath.mpf(10) ** (-(dps - 6))
        while b - a > width_goal * max(1, abs(a)):
            m = (a + b) / 2
            gm, p = _gap_mp(family, m, n, period, p)
            if gm == 0:
                return m, gm, p
            if ga * gm < 0:
                b, gb = m, gm
            else:
                a, ga = m, gm
        # secant step inside the final bracket
        s = b - gb * (b - a) / (gb - ga)
        if not (a <= s <= b):
            s = (a + b) / 2
        gs, p = _gap_mp(family, s, n, period, p)
        best = min([(abs(ga), a), (abs(gb), b), (abs(gs), s)], key=lambda z: z[0])
        t = best[1]
        g, p = _gap_mp(family, t, n, period, p)
        return t, g, p


def _make_mt(family, t_mp, n, period, p_mp, g, dps) -> MTParameter:
    with mpmath.workdps(dps):
        der = mpmath.mpf(1)
        y = p_mp
        for _ in range(period):
            der *= family.dx(t_mp, y)
            y = family.eval(t_mp, y)
        mlog = float(mpmath.log(abs(der))) if der != 0 else -math.inf
        t_hp = mpmath.nstr(t_mp, dps - 2, strip_zeros=False)
    return MTParameter(
        t=float(t_mp),
        preperiod=n,
        period=period,
        periodic_point=float(p_mp),
        multiplier_log=mlog,
        residual=float(abs(g)),
        Lambda=math.exp(mlog / period),
        t_hp=t_hp,
        family_name=family.name,
    )


def _verify_mt(family, mt: MTParameter, dps):
    if mt.multiplier_log <= 0:
        raise AttractingCycleError(
            f"periodic point {mt.periodic_point} is not repelling (log multiplier {mt.multiplier_log})",
            mt.multiplier_log,
        )
    with mpmath.workdps(dps):
        t = mt.t_mp()
        x = mpmath.mpf(family.c)
        tiny = mpmath.mpf(10) ** (-(dps // 2))
        for _ in range(mt.preperiod + mt.period):
            x = family.eval(t, x)
            if abs(x - family.c) < tiny:
                raise ValueError("critical point is periodic, not pre-periodic")


def find_misiurewicz_thurston(
    family: MapFamily,
    bracket: Sequence[float],
    preperiod: int,
    period: int = 1,
    tol: float = 1e-12,
    p_seed: Optional[float] = None,
    dps: int = 40,
) -> MTParameter:
    """Parameter t in ``bracket`` with f_t^n(c) on a repelling cycle of period l0.

    The cycle point p_t is continued in t by Newton iteration from ``p_seed``
    (or from every cycle of the requested period at the bracket midpoint when
    no seed is given).  The gap g(t) = f_t^n(c) - p_t is bisected in
    ``dps``-digit arithmetic.
    """
    a, b = float(bracket[0]), float(bracket[1])
    if not a < b:
        raise DomainError("bracket must be increasing")
    check_param(family, a)
    check_param(family, b)
    if preperiod < 1 or period < 1:
        raise DomainError("preperiod and period must be positive")
    mid = 0.5 * (a + b)
    seeds = [p_seed] if p_seed is not None else _periodic_candidates(family, mid, period)
    last_err = None
    for seed in seeds:
        try:
            t_mp, g, p = _mp_bisect(family, a, b, preperiod, period, seed, dps)
        except BracketError as err:
            last_err = err
            continue
        mt = _make_mt(family, t_mp, preperiod, period, p, g, dps)
        if mt.residual >= tol:
            raise ValueError(f"root residual {mt.residual} above tolerance {tol}")
        _verify_mt(family, mt, dps)
        return mt
    raise last_err or BracketError("no periodic orbit of the requested period")


def verify_mt_shadowing(family: MapFamily, mt: MTParameter, steps: int = 200, dps: Optional[int] = None) -> float:
    """Max |f_t^k(c) - cycle point| over n <= k <= n + steps, in high precision.

    The root is re-solved at a precision sufficient for the orbit to stay on
    the repelling cycle for ``steps`` iterates, so a small value certifies the
    landing independently of the double-precision data.
    """
    if dps is None:
        dps = 30 + int(steps * max(mt.multiplier_log / mt.period, 0.1) / math.log(10)) + 10
    with mpmath.workdps(dps):
        t0 = mt.t_mp()
        h = mpmath.mpf(10) ** (-12)
        t, g, p = _mp_bisect(family, t0 - h, t0 + h, mt.preperiod, mt.period, mt.periodic_point, dps)
        cyc = [p]
        for _ in range(mt.period - 1):
            cyc.append(family.eval(t, cyc[-1]))
        x = mpmath.mpf(family.c)
        for _ in range(mt.preperiod):
            x = family.eval(t, x)
        worst = mpmath.mpf(0)
        for k in range(steps + 1):
            worst = max(worst, abs(x - cyc[k % mt.period]))
            x = family.eval(t, x)
        drift = abs(t - t0)
    return float(max(worst, drift))


# ---------------------------------------------------------------- admissible pairs


@dataclass
class AdmissiblePair:
    t0: float
    t: float
    M: int
    Ca: float
    alpha: float
    beta: float

    def to_dict(self):
        return asdict(self)

    def lhs(self, log_derivs, M=None):
        M = self.M if M is None else M
        return log_derivs[M] + math.log(abs(self.t - self.t0)) + math.log(self.Ca) + (self.alpha + self.beta) * math.log(M)


def _base_log_derivs(family, t0, horizon):
    if isinstance(t0, MTParameter):
        pts = t0.postcritical_orbit(family, horizon + 1)
        cum, _, _ = orbit_log_derivs(family, t0.t, pts)
        return t0.t, cum
    orb = critical_orbit(family, t0, horizon + 1)
    return float(t0), orb.log_derivs


def admissible_M(
    family: MapFamily,
    t0,
    t,
    Ca: float = 10.0,
    alpha: float = 0.0,
    beta: float = 0.0,
    horizon: int = 2000,
    eps: Optional[float] = None,
    log_derivs=None,
) -> AdmissiblePair:
    """Maximal M with log|(f^M)'(c_1)| + log|t - t0| <= -log Ca - (alpha + beta) log M."""
    if log_derivs is None:
        t0f, L = _base_log_derivs(family, t0, horizon)
    else:
        t0f = t0.t if isinstance(t0, MTParameter) else float(t0)
        L = np.asarray(log_derivs)
        horizon = min(horizon, len(L) - 2)
    dt = abs(float(t) - t0f)
    if dt == 0:
        raise NotAdmissibleError("t equals t0")
    if eps is None:
        eps = 1e-2 * family.width
    if dt >= eps:
        raise NotAdmissibleError(f"|t - t0| = {dt} not below eps = {eps}")
    Ms = np.arange(1, horizon + 1)
    lhs = L[1 : horizon + 1] + math.log(dt)
    rhs = -math.log(Ca) - (alpha + beta) * np.log(Ms)
    ok = np.nonzero(lhs <= rhs)[0]
    if len(ok) == 0:
        raise NotAdmissibleError("pair not admissible: inequality fails at M = 1")
    M = int(Ms[ok[-1]])
    if M == horizon:
        raise NotAdmissibleError("maximal M not reached within horizon")
    return AdmissiblePair(t0=t0f, t=float(t), M=M, Ca=Ca, alpha=alpha, beta=beta)


@dataclass
class SequenceMember:
    mt: MTParameter
    pair: AdmissiblePair
    log_lambda_ratio_M: float
    expansion_log_C: float
    min_critical_distance: float

    @property
    def t(self):
        return self.mt.t

    @property
    def M(self):
        return self.pair.M

    def to_dict(self):
        return {
            "mt": self.mt.to_dict(),
            "pair": self.pair.to_dict(),
            "log_lambda_ratio_M": self.log_lambda_ratio_M,
            "expansion_log_C": self.expansion_log_C,
            "min_critical_distance": self.min_critical_distance,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            mt=MTParameter.from_dict(d["mt"]),
            pair=AdmissiblePair(**d["pair"]),
            log_lambda_ratio_M=d["log_lambda_ratio_M"],
            expansion_log_C=d["expansion_log_C"],
            min_critical_distance=d["min_critical_distance"],
        )


def orientation_side(family: MapFamily, t0: MTParameter, n_terms: int = 200) -> int:
    """Side on which spikes retract: f_t^k < f^k near local maxima of f^k.

    With d_t f^k(c) (f^{k-1})'(c_1) having the sign of the transversality sum
    J, moving t by -sign(J) pushes local maxima of f^k down and local minima up.
    """
    pts = t0.postcritical_orbit(family, 2 * n_terms + 8)
    J = transversality_sum(family, t0.t, n_terms, points=pts)
    if not math.isfinite(J.value) or J.value == 0:
        raise ValueError("transversality sum vanishes or is undefined")
    return -1 if J.value > 0 else 1


def _search_roots(family, t0: MTParameter, lo, hi, side, n_range, grid, dps, tol, max_refine=6):
    """MT roots of g_n on t0 + side*(lo, hi], smallest n first."""
    s = np.linspace(lo, hi, grid)[1:]
    ts = t0.t + side * s
    p = _np_periodic_point(family, ts, t0.period, t0.periodic_point)
    x = np.full_like(ts, family.c)
    nmin, nmax = n_range
    for n in range(1, nmax + 1):
        x = family.eval(ts, x)
        if n < nmin:
            continue
        g = x - p
        idx = np.nonzero(np.sign(g[:-1]) * np.sign(g[1:]) < 0)[0]
        if len(idx) == 0:
            continue
        # prefer brackets near the middle of the interval in log scale
        mid = math.sqrt(lo * hi)
        idx = sorted(idx, key=lambda i: abs(math.log(s[i] / mid)))[:max_refine]
        found = []
        for i in idx:
            a, b = sorted((ts[i], ts[i + 1]))
            try:
                t_mp, gv, pv = _mp_bisect(family, a, b, n, t0.period, t0.periodic_point, dps)
            except BracketError:
                continue
            mt = _make_mt(family, t_mp, n, t0.period, pv, gv, dps)
            if mt.residual >= tol or mt.multiplier_log <= 0:
                continue
            # minimal preperiod: c_{n-1} must not already be on the cycle
            pts = mt.postcritical_orbit(family, n + t0.period)
            if abs(pts[n - 1] - mt.periodic_point) < 1e-9 and n > 1:
                continue
            found.append((mt, float(np.min(np.abs(pts[1:n] - family.c))) if n > 1 else 0.0))
        if found:
            return n, found
    return None, []


def mt_sequence(
    family: MapFamily,
    t0: MTParameter,
    count: int,
    Ca: float = 10.0,
    dt_range=(1e-8, 1e-3),
    side="auto",
    extra: int = 24,
    grid: int = 4001,
    tol: float = 1e-11,
    dps: int = 50,
    horizon: int = 400,
) -> List[SequenceMember]:
    """One-sided sequence of MT parameters accumulating at ``t0``.

    Each member lands on the continuation of the cycle of ``t0`` and is
    paired with its admissible M (alpha = beta = 0).  Target truncation
    levels are spread over the range where the admissible interval meets
    ``dt_range``.  ``side='auto'`` uses the orientation side when it carries
    MT parameters and falls back to the other side otherwise (with a warning).
    """
    pts0 = t0.postcritical_orbit(family, horizon + 2)
    L0, _, _ = orbit_log_derivs(family, t0.t, pts0)
    lca = math.log(Ca)
    Ms = np.arange(1, horizon)
    t2 = np.exp(-lca - L0[1:horizon])
    t1 = np.exp(-lca - L0[2 : horizon + 1])
    # roots are searched only where the admissible interval meets dt_range
    w1 = np.maximum(t1, dt_range[0])
    w2 = np.minimum(t2, dt_range[1])
    eps = 1e-2 * family.width
    usable = (t1 < dt_range[1]) & (t2 > dt_range[0]) & (t2 < eps)
    cand_M = Ms[usable]
    if len(cand_M) == 0:
        raise ValueError("no admissible truncation level meets dt_range")
    picks = np.unique(np.round(np.linspace(cand_M[0], cand_M[-1], count)).astype(int))
    order = list(picks) + [int(m) for m in cand_M if m not in picks]

    if side == "auto":
        pref = orientation_side(family, t0)
        first = int(picks[0])
        n_range = (max(t0.preperiod + 1, first - 4), first + extra)
        n, found = _search_roots(family, t0, w1[first - 1], w2[first - 1], pref, n_range, grid, dps, tol, 2)
        if found:
            side_used = pref
        else:
            side_used = -pref
            warnings.warn(
                "no Misiurewicz-Thurston parameters on the orientation side of t0; using the opposite side",
                RuntimeWarning,
            )
    else:
        side_used = int(side)

    members: List[SequenceMember] = []
    used = set()
    for M in order:
        if len(members) >= count:
            break
        if M in used:
            continue
        used.add(M)
        n_range = (max(t0.preperiod + 1, M - 4), M + extra)
        n, found = _search_roots(family, t0, w1[M - 1], w2[M - 1], side_used, n_range, grid, dps, tol)
        if not found:
            warnings.warn(f"no MT root found for M={M}; skipped", RuntimeWarning)
            continue
        mt, dmin = max(found, key=lambda z: z[1])
        try:
            pair = admissible_M(family, t0, mt.t, Ca=Ca, log_derivs=L0, horizon=horizon)
        except NotAdmissibleError as err:
            warnings.warn(f"M={M}: {err}; skipped", RuntimeWarning)
            continue
        ptsn = mt.postcritical_orbit(family, max(2 * pair.M, mt.preperiod + 8) + 2)
        Ln, _, _ = orbit_log_derivs(family, mt.t, ptsn)
        ks = np.arange(2, len(Ln))
        dev = Ln[ks - 1] - ks * math.log(mt.Lambda)
        expansion_log_C = float(np.max(np.abs(dev[np.isfinite(dev)])))
        members.append(
            SequenceMember(
                mt=mt,
                pair=pair,
                log_lambda_ratio_M=pair.M * (math.log(mt.Lambda) - math.log(t0.Lambda)),
                expansion_log_C=expansion_log_C,
                min_critical_distance=dmin,
            )
        )
    members.sort(key=lambda m: -abs(m.t - t0.t))
    return members
