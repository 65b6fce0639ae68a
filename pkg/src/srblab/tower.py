"""Tower over a good parameter: levels B_k, nested intervals J_k, climb
intervals I_j, cutoff functions and the bound/free decomposition.

Level k is stored in offsets u = x - c from the critical point.  Points of
J_k are followed through their deviation d_k(u) = f^k(c + u) - c_k from the
critical orbit, which keeps full relative precision for |u| far below the
spacing of doubles near c.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.optimize import brentq

from .map_family import DomainError, MapFamily, check_param, critical_orbit, orbit_log_derivs


class TowerError(ValueError):
    pass


class GoodnessViolation(TowerError):
    pass


class ComparabilityError(TowerError):
    pass


def _deviation(family, t, points, k, u):
    """d_k(u) = f^k(c + u) - c_k for k >= 0 (vectorized in u)."""
    d = np.asarray(u, dtype=float)
    for i in range(k):
        d = family.step_diff(t, points[i], d)
    return d


@dataclass
class Tower:
    family: MapFamily
    t: float
    delta: float
    L: float
    beta: float
    K_max: int
    H0: int
    H_delta: int
    points: np.ndarray
    b: np.ndarray
    um: np.ndarray
    up: np.ndarray
    identified_horizon: Optional[int] = None
    fold_levels: List[int] = field(default_factory=list)
    flags: List[str] = field(default_factory=list)

    # geometry ------------------------------------------------------------
    @property
    def c(self):
        return self.family.c

    def deviation(self, k, u):
        return _deviation(self.family, self.t, self.points, k, u)

    def image(self, k, u):
        """f^k(c + u)."""
        return self.points[k] + self.deviation(k, u)

    def J(self, k) -> Tuple[float, float]:
        """J_k as offsets (-um_k, up_k) from c."""
        return (-float(self.um[k]), float(self.up[k]))

    def J_length(self, k):
        return float(self.um[k] + self.up[k])

    def B(self, k) -> Tuple[float, float]:
        return (float(self.points[k] - self.b[k]), float(self.points[k] + self.b[k]))

    def I(self, j):
        """Climb interval I_j = J_{j-1} minus J_j as offset pairs per side, or None when empty."""
        out = []
        if self.um[j] < self.um[j - 1]:
            out.append((-float(self.um[j - 1]), -float(self.um[j])))
        if self.up[j] < self.up[j - 1]:
            out.append((float(self.up[j]), float(self.up[j - 1])))
        return out or None

    def I_length(self, j):
        return float(self.um[j - 1] - self.um[j] + self.up[j - 1] - self.up[j])

    def climb_height(self, u):
        """Number of levels climbed from c + u: max k <= K_max with u in J_k (0 if outside J_0)."""
        u = np.asarray(u, dtype=float)
        h = np.zeros(u.shape, dtype=int)
        for k in range(1, self.K_max + 1):
            inside = (u >= -self.um[k]) & (u <= self.up[k])
            h = np.where(inside & (h == k - 1), k, h)
        h = np.where((u >= -self.um[0]) & (u <= self.up[0]), h, -1)
        return h

    @property
    def log_derivs(self):
        cum, _, _ = orbit_log_derivs(self.family, self.t, self.points)
        return cum

    def to_dict(self):
        levels = []
        for k in range(1, self.K_max + 1):
            Ik = self.I(k)
            levels.append(
                {
                    "k": k,
                    "center": float(self.points[k]),
                    "radius": float(self.b[k]),
                    "J": [float(self.c - self.um[k]), float(self.c + self.up[k])],
                    "I": [[float(self.c + a), float(self.c + b)] for a, b in Ik] if Ik else [],
                }
            )
        return {
            "t": self.t,
            "delta": self.delta,
            "L": self.L,
            "beta": self.beta,
            "K_max": self.K_max,
            "H0": self.H0,
            "H_delta": self.H_delta,
            "identified_horizon": self.identified_horizon,
            "fold_levels": self.fold_levels,
            "flags": self.flags,
            "levels": levels,
        }

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def _radius(k, beta, L, s):
    r = k ** (-beta) / L
    if r <= s <= 2 * r:
        return 0.5 * r
    return r


def _side_root(dev, sign, u_prev, b):
    """Largest u in [0, u_prev] with |d(sign*u)| <= b, assuming monotone |d| on the side."""
    if abs(float(dev(sign * u_prev))) <= b:
        return u_prev
    g = lambda u: abs(float(dev(sign * u))) - b
    return brentq(g, 0.0, u_prev, xtol=max(u_prev * 1e-15, 1e-300), rtol=4 * np.finfo(float).eps, maxiter=400)


def _H_of(um, up, K):
    for j in range(1, K + 2):
        if um[j] < um[j - 1] or up[j] < up[j - 1]:
            return j - 1
    return K + 1


def _construct(family, t, delta, L, beta, K_max, H0, points, base=None, horizon=None):
    um = np.zeros(K_max + 2)
    up = np.zeros(K_max + 2)
    b = np.full(K_max + 2, np.nan)
    um[0] = up[0] = delta
    flags = []
    folds = []
    top = K_max
    for k in range(1, K_max + 2):
        dev = lambda u, k=k: _deviation(family, t, points, k, u)
        if base is not None and k <= horizon + 1 and k <= base.K_max + 1:
            um[k] = base.um[k]
            up[k] = base.up[k]
            b[k] = max(abs(float(dev(-um[k]))), abs(float(dev(up[k]))))
            dist = abs(points[k] - family.c)
            if k <= K_max and k >= H0 and dist <= b[k]:
                folds.append(k)
            continue
        s = max(abs(float(dev(-um[k - 1]))), abs(float(dev(up[k - 1]))))
        b[k] = _radius(k, beta, L, s)
        if H0 <= k <= K_max and abs(points[k] - family.c) <= b[k]:
            if base is not None:
                flags.append(f"height capped at {k - 1}: critical point in B_{k}")
                top = k - 1
                um[k:] = um[k - 1]
                up[k:] = up[k - 1]
                b[k:] = b[k]
                break
            raise GoodnessViolation(f"c lies in B_{k}: |c_{k} - c| = {abs(points[k] - family.c):.3g} <= b_{k} = {b[k]:.3g}")
        um[k] = _side_root(dev, -1.0, um[k - 1], b[k])
        up[k] = _side_root(dev, 1.0, up[k - 1], b[k])
    if folds:
        flags.append(f"identified levels where B_k contains c: {folds}")
    return um, up, b, top, flags, folds


def build_tower(
    family: MapFamily,
    t,
    delta: Optional[float] = None,
    L: float = 8.0,
    beta: float = 0.0,
    K_max: int = 60,
    H0: int = 1,
    points=None,
    identify_with: Optional[Tower] = None,
    horizon: Optional[int] = None,
    margin: int = 2,
) -> Tower:
    """Tower over f_t.

    Radii follow b_k = r_k / 2 if r_k <= |f^k(J_{k-1})| <= 2 r_k and b_k = r_k
    otherwise, with r_k = k^{-beta} / L, which keeps |f^k(I_k)| >= |f^k(J_{k-1})| / 2
    whenever I_k is nonempty.  ``points`` may supply the critical orbit
    (at least K_max + 2 points).  With ``identify_with`` the levels J_k,
    k <= horizon + 1, are copied from that tower and B_{k,t} is the smallest
    ball around c_{k,t} containing f_t^k(J_k).  When ``delta`` is None it is
    decreased geometrically from 1/4 until H(delta) >= max(2, H0) + margin.
    """
    check_param(family, t)
    if K_max < 2:
        raise DomainError("K_max must be >= 2")
    if points is None:
        points = critical_orbit(family, t, K_max + 2).points
    points = np.asarray(points, dtype=float)
    if len(points) < K_max + 2:
        raise DomainError("critical orbit shorter than K_max + 2")
    if identify_with is not None:
        delta = identify_with.delta
        L = identify_with.L
        beta = identify_with.beta
        if horizon is None:
            horizon = identify_with.K_max
    need = max(2, H0)
    if delta is None:
        last = None
        for i in range(200):
            d = 0.25 * 2.0 ** (-i / 4)
            try:
                tw = build_tower(family, t, d, L, beta, K_max, H0, points, identify_with, horizon)
            except TowerError as err:
                last = err
                continue
            if tw.H_delta >= need + margin:
                return tw
        raise TowerError(f"no delta found with H(delta) >= {need + margin}") from last
    if not 0 < delta < 0.5:
        raise DomainError("delta must lie in (0, 1/2)")
    um, up, b, top, flags, folds = _construct(family, t, delta, L, beta, K_max, H0, points, identify_with, horizon)
    H = _H_of(um, up, K_max)
    if H < need:
        raise TowerError(f"delta too large: H(delta) = {H} < {need}")
    return Tower(
        family=family,
        t=float(t),
        delta=float(delta),
        L=L,
        beta=beta,
        K_max=int(top),
        H0=H0,
        H_delta=int(H),
        points=points[: K_max + 3],
        b=b,
        um=um,
        up=up,
        identified_horizon=horizon if identify_with is not None else None,
        fold_levels=folds,
        flags=flags,
    )


def decay_constant(tower: Tower) -> np.ndarray:
    """C_j = |J_{j-1}| j^{beta/2} |(f^{j-2})'(c_1)|^{1/2} for j = 2..K_max+1."""
    L = tower.log_derivs
    js = np.arange(2, tower.K_max + 2)
    lens = np.array([tower.J_length(j - 1) for j in js])
    return lens * js ** (tower.beta / 2) * np.exp(0.5 * L[js - 2])


# ---------------------------------------------------------------- cutoffs


def smoothstep7(s):
    s = np.clip(s, 0.0, 1.0)
    return s**4 * (35 - 84 * s + 70 * s**2 - 20 * s**3)


def smoothstep7_d(s, r=1):
    s = np.asarray(s, dtype=float)
    inside = (s > 0) & (s < 1)
    if r == 1:
        v = 140 * s**3 * (1 - s) ** 3
    elif r == 2:
        v = 420 * s**2 * (1 - s) ** 2 * (1 - 2 * s)
    elif r == 3:
        v = 840 * s * (1 - s) * (1 - 5 * s + 5 * s**2)
    else:
        raise ValueError("r must be 1, 2 or 3")
    return np.where(inside, v, 0.0)


# max |S7^{(r)}| on [0, 1]
_S7_SUP = {1: 35.0 / 16.0, 2: 7.513188402473212, 3: 52.5}


@dataclass
class CutoffLevel:
    mode: str  # "bump", "indicator", "zero"
    inner_m: float = 0.0
    outer_m: float = 0.0
    inner_p: float = 0.0
    outer_p: float = 0.0


@dataclass
class CutoffFamily:
    tower: Tower
    levels: List[CutoffLevel]

    def xi(self, k, u):
        """xi_k at offsets u from c."""
        u = np.asarray(u, dtype=float)
        lv = self.levels[k]
        if lv.mode == "zero":
            return np.zeros_like(u)
        if lv.mode == "indicator":
            return ((u >= -lv.outer_m) & (u <= lv.outer_p)).astype(float)
        neg = u < 0
        inner = np.where(neg, lv.inner_m, lv.inner_p)
        outer = np.where(neg, lv.outer_m, lv.outer_p)
        a = np.abs(u)
        with np.errstate(invalid="ignore", divide="ignore"):
            s = np.where(outer > inner, (a - inner) / (outer - inner), np.where(a <= inner, 0.0, 1.0))
        return np.where(a > outer, 0.0, 1.0 - smoothstep7(s))

    def dxi(self, k, u, r=1):
        u = np.asarray(u, dtype=float)
        lv = self.levels[k]
        if lv.mode != "bump":
            return np.zeros_like(u)
        neg = u < 0
        inner = np.where(neg, lv.inner_m, lv.inner_p)
        outer = np.where(neg, lv.outer_m, lv.outer_p)
        w = outer - inner
        with np.errstate(invalid="ignore", divide="ignore"):
            s = (np.abs(u) - inner) / w
            v = -smoothstep7_d(s, r) / w**r
        sgn = np.where(neg, -1.0, 1.0) ** r
        return np.where(w > 0, v * sgn, 0.0)

    def partial_zone(self, k):
        """{0 < xi_k < 1} as a list of open offset intervals."""
        lv = self.levels[k]
        if lv.mode != "bump":
            return []
        out = []
        if lv.outer_m > lv.inner_m:
            out.append((-lv.outer_m, -lv.inner_m))
        if lv.outer_p > lv.inner_p:
            out.append((lv.inner_p, lv.outer_p))
        return out

    def derivative_constants(self, r=1):
        """sup|d^r xi_k| |J_{k+1}|^r for each k >= 1 with a smooth bump (0 otherwise)."""
        out = np.zeros(len(self.levels))
        for k, lv in enumerate(self.levels):
            if lv.mode != "bump" or k == 0:
                continue
            Jl = self.tower.J_length(k + 1)
            ws = [w for w in (lv.outer_m - lv.inner_m, lv.outer_p - lv.inner_p) if w > 0]
            if ws:
                out[k] = _S7_SUP[r] * (Jl / min(ws)) ** r
        return out


def _half_radius_offset(tower, k, sign, u_cap):
    """Offset where |d_k| reaches b_k / 2 on one side, capped at u_cap."""
    dev = lambda u: tower.deviation(k, u)
    return _side_root(dev, sign, u_cap, 0.5 * tower.b[k])


def cutoff_family(tower: Tower, base: Optional[CutoffFamily] = None, comparability: float = 2.0 ** -3.5) -> CutoffFamily:
    """Order-7 smoothstep cutoffs xi_0..xi_K.

    xi_0 is 1 on [c - delta/2, c + delta/2] and vanishes outside J_0.  For
    1 <= k < K it equals 1 up to the larger of J_{k+2} and the pullback of the
    inner half of B_{k+1}, and falls to 0 at the edge of J_{k+1}; when
    I_{k+2} is empty it is the indicator of J_{k+1}.  The top level has
    xi_K = 0, so mass leaving it falls to the ground.  With ``base`` the
    cutoffs of the identified levels are copied.
    """
    K = tower.K_max
    for k in range(tower.H_delta + 1, K + 1):
        if tower.I(k) is None:
            continue
        ratio = tower.I_length(k) / tower.J_length(k - 1)
        if ratio < comparability:
            raise ComparabilityError(
                f"|I_{k}|/|J_{k - 1}| = {ratio:.3g} below the comparability bound {comparability:.3g}"
            )
    d = tower.delta
    levels = [CutoffLevel("bump", d / 2, d, d / 2, d)]
    for k in range(1, K + 1):
        if base is not None and tower.identified_horizon is not None and k <= tower.identified_horizon - 1 and k < base.tower.K_max:
            levels.append(base.levels[k])
            continue
        if k == K:
            levels.append(CutoffLevel("zero"))
            continue
        if tower.I(k + 2) is None:
            levels.append(CutoffLevel("indicator", outer_m=tower.um[k + 1], outer_p=tower.up[k + 1]))
            continue
        vals = []
        for sign, uk1, uk2 in ((-1.0, tower.um[k + 1], tower.um[k + 2]), (1.0, tower.up[k + 1], tower.up[k + 2])):
            uh = _half_radius_offset(tower, k + 1, sign, uk1)
            vals += [max(uk2, uh), uk1]
        levels.append(CutoffLevel("bump", vals[0], vals[1], vals[2], vals[3]))
    return CutoffFamily(tower, levels)


def partial_zones_disjoint(cf: CutoffFamily, k_min: int = 1) -> bool:
    zones = []
    for k in range(k_min, len(cf.levels)):
        zones += cf.partial_zone(k)
    zones.sort()
    return all(zones[i][1] <= zones[i + 1][0] for i in range(len(zones) - 1))


def partial_zone_in_climb_interval(cf: CutoffFamily, k: int) -> bool:
    tw = cf.tower
    for a, b in cf.partial_zone(k):
        Ik = tw.I(k + 2)
        if Ik is None or not any(lo <= a and b <= hi for lo, hi in Ik):
            return False
    return True


# ---------------------------------------------------------------- bound / free times


@dataclass
class BoundFreeTimes:
    x: float
    T: List[int]
    S: List[float]
    horizon: int
    log_derivs_at_S: List[float]
    flags: List[str] = field(default_factory=list)


def bound_free_times(tower: Tower, x: float, horizon: int) -> BoundFreeTimes:
    """Alternating bound/free decomposition of the orbit of x up to ``horizon``."""
    if not 0.0 <= x <= 1.0:
        raise DomainError("x outside [0, 1]")
    fam, t, c = tower.family, tower.t, tower.c
    T, S, LS, flags = [], [], [], []
    y = float(x)
    logd = 0.0
    n = 0
    while n < horizon:
        u = y - c
        if abs(u) <= tower.delta:
            if u == 0.0:
                T.append(n)
                S.append(math.inf)
                flags.append(f"orbit hits c at time {n}")
                break
            h = int(tower.climb_height(u))
            j = h + 1
            if h >= tower.K_max:
                flags.append(f"climb beyond K_max at time {n}")
            T.append(n)
            S.append(n + j)
            for _ in range(j):
                logd += math.log(abs(float(fam.dx(t, y))))
                y = float(fam.eval(t, y))
            n += j
            LS.append(logd)
            continue
        logd += math.log(abs(float(fam.dx(t, y))))
        y = float(fam.eval(t, y))
        n += 1
    # drop bound periods that end past the horizon
    while S and S[-1] != math.inf and S[-1] > horizon:
        S.pop()
        T.pop()
        LS.pop()
    return BoundFreeTimes(float(x), T, S, horizon, LS, flags)


# ---------------------------------------------------------------- checks


@dataclass
class DistortionResult:
    j: int
    max_log_ratio: float
    predicted_log_bound: float


def verify_distortion(tower: Tower, j: int, n_samples: int = 1000, seed: int = 0) -> DistortionResult:
    """max over sampled x, y in f(J_j) and k <= j of |log (f^k)'(x) / (f^k)'(y)|.

    The comparison value is the bound sum_l log(1 + sup|f''| |f^l(J_j)| / min|f'| on f^l(J_j))
    from the standard distortion argument.
    """
    if j < 1 or j > tower.K_max:
        raise DomainError("need 1 <= j <= K_max")
    fam, t = tower.family, tower.t
    rng = np.random.default_rng(seed)
    lo, hi = tower.J(j)
    ux = rng.uniform(lo, hi, n_samples)
    uy = rng.uniform(lo, hi, n_samples)
    lx = np.zeros(n_samples)
    ly = np.zeros(n_samples)
    worst = 0.0
    pred = 0.0
    grid = np.linspace(lo, hi, 257)
    dx_, dy_, dg = ux.copy(), uy.copy(), grid.copy()
    pts = tower.points
    for ell in range(1, j + 1):
        dx_ = fam.step_diff(t, pts[ell - 1], dx_)
        dy_ = fam.step_diff(t, pts[ell - 1], dy_)
        dg = fam.step_diff(t, pts[ell - 1], dg)
        lx += np.log(np.abs(fam.dx(t, pts[ell] + dx_)))
        ly += np.log(np.abs(fam.dx(t, pts[ell] + dy_)))
        worst = max(worst, float(np.max(np.abs(lx - ly))))
        seg = float(np.max(dg) - np.min(dg))
        dmin = float(np.min(np.abs(fam.dx(t, pts[ell] + dg))))
        dd = float(np.max(np.abs(fam.dxx(t, pts[ell] + dg))))
        pred += math.log1p(dd * seg / dmin) if dmin > 0 else math.inf
    return DistortionResult(j, worst, pred)


@dataclass
class KeyEstimate:
    j: int
    partial: float
    tail: float
    total: float
    bound: float
    margin: float
    flag: Optional[str] = None


def key_estimate_check(family: MapFamily, t, j: int, K_tail: int, C: float = 1.0, alpha: float = 0.0, points=None) -> KeyEstimate:
    """sum_{m >= 1} 1 / |(f^m)'(f^j(c_1))| against C max(1, j^alpha).

    The first ``K_tail`` terms are summed with ``math.fsum``; the rest is
    bounded by a geometric series at the growth rate of the second half.
    """
    if j < 0 or K_tail < 2:
        raise DomainError("need j >= 0 and K_tail >= 2")
    N = j + K_tail + 1
    orb = critical_orbit(family, t, N, points=points)
    L = orb.log_derivs
    base = L[j]
    ms = np.arange(1, K_tail + 1)
    logs = L[j + ms] - base
    if not np.all(np.isfinite(logs)):
        return KeyEstimate(j, math.inf, math.inf, math.inf, C * max(1.0, j**alpha), -math.inf, "vanishing derivative")
    partial = math.fsum(np.exp(-logs))
    half = K_tail // 2
    rate = (logs[-1] - logs[half - 1]) / (K_tail - half)
    flag = None
    if rate <= 0:
        tail = math.inf
        flag = "divergence: tail terms do not shrink"
    else:
        q = math.exp(-rate)
        tail = math.exp(-logs[-1]) * q / (1 - q)
    total = partial + tail
    bound = C * max(1.0, float(j) ** alpha)
    return KeyEstimate(j, partial, tail, total, bound, bound - total, flag)
