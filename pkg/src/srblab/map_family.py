"""One-parameter families of unimodal maps and orbitwise evaluations.

All derivative products along orbits are kept as (log-magnitude, sign)
pairs.  Sums that suffer from cancellation go through ``math.fsum``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np


class DomainError(ValueError):
    """Parameter or point outside the admissible range."""


@dataclass(frozen=True)
class MapFamily:
    """A smooth one-parameter family f_t of unimodal maps of [0, 1].

    Parameters
    ----------
    c : float
        Critical point, independent of t.
    eval, dx, dxx, dt : callable
        ``(t, x) -> f_t(x)``, ``f_t'(x)``, ``f_t''(x)`` and ``d/dt f_t(x)``.
        They must accept numpy arrays for ``x``.
    param_range : tuple
        Closed interval of admissible parameters.
    diff : callable, optional
        ``(t, y, d) -> f_t(y + d) - f_t(y)`` evaluated without cancellation.
        Used to follow orbits that stay extremely close to the critical orbit.
    vector_field : callable, optional
        ``(t, x) -> X_t(x)`` with ``dt(t, x) == X_t(f_t(x))``.
    """

    c: float
    eval: Callable
    dx: Callable
    dxx: Callable
    dt: Callable
    param_range: tuple = (0.0, 4.0)
    name: str = "custom"
    diff: Optional[Callable] = field(default=None, compare=False)
    vector_field: Optional[Callable] = field(default=None, compare=False)

    def step_diff(self, t, y, d):
        if self.diff is not None:
            return self.diff(t, y, d)
        return self.eval(t, y + d) - self.eval(t, y)

    @property
    def width(self):
        return self.param_range[1] - self.param_range[0]


def _logistic_eval(t, x):
    return t * x * (1.0 - x)


def _logistic_dx(t, x):
    return t * (1.0 - 2.0 * x)


def _logistic_dxx(t, x):
    return -2.0 * t + 0.0 * x


def _logistic_dt(t, x):
    return x * (1.0 - x)


def _logistic_diff(t, y, d):
    return t * d * (1.0 - 2.0 * y - d)


def _logistic_field(t, x):
    return x / t


def logistic() -> MapFamily:
    """The logistic family f_t(x) = t x (1 - x), t in [0, 4]."""
    return MapFamily(
        c=0.5,
        eval=_logistic_eval,
        dx=_logistic_dx,
        dxx=_logistic_dxx,
        dt=_logistic_dt,
        param_range=(0.0, 4.0),
        name="logistic",
        diff=_logistic_diff,
        vector_field=_logistic_field,
    )


def family_from_name(name: str) -> MapFamily:
    if name == "logistic":
        return logistic()
    raise DomainError(f"unknown family {name!r}")


def check_param(family: MapFamily, t) -> None:
    lo, hi = family.param_range
    if not (lo <= t <= hi):
        raise DomainError(f"parameter t={t!r} outside {family.param_range}")


def eval_map(family: MapFamily, t, x):
    """f_t(x), with domain checks on t and x."""
    check_param(family, t)
    xa = np.asarray(x, dtype=float)
    if np.any(xa < 0.0) or np.any(xa > 1.0) or np.any(np.isnan(xa)):
        raise DomainError("x outside [0, 1]")
    out = family.eval(t, xa)
    return float(out) if np.ndim(out) == 0 else out


def kahan_cumsum(values) -> np.ndarray:
    """Cumulative sum with Kahan compensation."""
    vals = np.asarray(values, dtype=float)
    out = np.empty_like(vals)
    s = 0.0
    comp = 0.0
    for i, v in enumerate(vals):
        if math.isinf(v) or math.isinf(s):
            s = s + v
            out[i] = s
            continue
        y = v - comp
        tmp = s + y
        comp = (tmp - s) - y
        s = tmp
        out[i] = s
    return out


class LogDeriv(NamedTuple):
    mag: float
    sign: int
    zero_hit: bool = False


@dataclass(frozen=True)
class CriticalOrbit:
    """Orbit c_k = f_t^k(c), k = 0..N, and log|(f_t^k)'(c_1)|, k = 0..N.

    ``log_derivs[0]`` is 0 (empty product).  ``zero_index`` is the first k
    with a vanishing factor (log-derivative -inf), or None.
    """

    t: float
    points: np.ndarray
    log_derivs: np.ndarray
    signs: np.ndarray
    zero_index: Optional[int] = None

    @property
    def N(self):
        return len(self.points) - 1

    @property
    def flagged(self):
        return self.zero_index is not None


def orbit_log_derivs(family: MapFamily, t, points) -> tuple:
    """Cumulative log|(f^k)'(points[1])| and signs for k = 0..len-1."""
    pts = np.asarray(points, dtype=float)
    d = np.asarray(family.dx(t, pts[1:]), dtype=float)
    with np.errstate(divide="ignore"):
        logs = np.log(np.abs(d))
    cum = np.concatenate([[0.0], kahan_cumsum(logs)])
    sg = np.concatenate([[1], np.cumprod(np.sign(d)).astype(int)])
    zero = np.nonzero(d == 0.0)[0]
    zero_index = int(zero[0]) + 1 if len(zero) else None
    if zero_index is not None:
        cum[zero_index:] = -np.inf
        sg[zero_index:] = 0
    return cum, sg, zero_index


def critical_orbit(family: MapFamily, t, N: int, points=None) -> CriticalOrbit:
    """Critical orbit and derivative data along the orbit of c_1.

    ``points`` may supply a precomputed orbit (for instance the exact
    postcritical orbit of a Misiurewicz-Thurston parameter).
    """
    check_param(family, t)
    if N < 1:
        raise DomainError("N must be >= 1")
    if points is None:
        pts = np.empty(N + 1)
        pts[0] = family.c
        x = family.c
        for k in range(1, N + 1):
            x = float(family.eval(t, x))
            pts[k] = x
    else:
        pts = np.asarray(points, dtype=float)[: N + 1].copy()
        if len(pts) < N + 1:
            raise DomainError("supplied orbit shorter than N + 1")
    cum, sg, zero_index = orbit_log_derivs(family, t, pts)
    return CriticalOrbit(t=t, points=pts, log_derivs=cum, signs=sg, zero_index=zero_index)


def log_deriv_along(family: MapFamily, t, x, n: int) -> LogDeriv:
    """(log|(f_t^n)'(x)|, sign); an exactly vanishing factor gives -inf."""
    if n < 0:
        raise DomainError("n must be >= 0")
    if n == 0:
        return LogDeriv(0.0, 1, False)
    logs = []
    sign = 1
    y = float(x)
    for _ in range(n):
        d = float(family.dx(t, y))
        if d == 0.0:
            return LogDeriv(-math.inf, 0, True)
        logs.append(math.log(abs(d)))
        sign *= 1 if d > 0 else -1
        y = float(family.eval(t, y))
    return LogDeriv(math.fsum(logs), sign, False)


def dt_iterate(family: MapFamily, t, x, k: int, cap: float = 1e300):
    """d/dt f_t^k(x).

    Uses the expansion of the recursion
    d_t f^k = f'(f^{k-1} x) d_t f^{k-1} + (d_t f)(f^{k-1} x) into a sum of
    products, accumulated with ``math.fsum``.  Values whose magnitude
    exceeds ``cap`` are returned as a ``LogDeriv`` instead of a float.
    """
    if k < 1:
        raise DomainError("k must be >= 1")
    ys = [float(x)]
    for _ in range(k - 1):
        ys.append(float(family.eval(t, ys[-1])))
    ys = np.array(ys)
    der = np.asarray(family.dx(t, ys), dtype=float)
    vt = np.asarray(family.dt(t, ys), dtype=float)
    # term j (1-based): prod_{i=j}^{k-1} f'(y_i) * dt(y_{j-1})
    with np.errstate(divide="ignore"):
        logabs = np.log(np.abs(der))
    suffix = np.zeros(k)
    sgn = np.ones(k)
    for j in range(k - 1, 0, -1):
        suffix[j - 1] = suffix[j] + logabs[j]
        sgn[j - 1] = sgn[j] * np.sign(der[j])
    with np.errstate(divide="ignore"):
        tlog = suffix + np.log(np.abs(vt))
    tsign = sgn * np.sign(vt)
    finite = np.isfinite(tlog) & (tsign != 0)
    if not np.any(finite):
        return 0.0
    m = float(np.max(tlog[finite]))
    s = math.fsum(tsign[finite] * np.exp(tlog[finite] - m))
    if s == 0.0:
        return 0.0
    mag = m + math.log(abs(s))
    if mag > math.log(cap):
        return LogDeriv(mag, 1 if s > 0 else -1, False)
    return math.copysign(math.exp(mag), s)


class TransversalitySum(NamedTuple):
    value: float
    tail: float
    flag: Optional[str] = None


def _exact_cycle(points: np.ndarray, start: int):
    """First (i0, period) with points[i0 + period] == points[i0], i0 >= start."""
    seen = {}
    for i in range(start, len(points)):
        key = float(points[i])
        if key in seen:
            return seen[key], i - seen[key]
        seen[key] = i
    return None


def transversality_sum(family: MapFamily, t1, n_terms: int, points=None) -> TransversalitySum:
    """Partial sum of sum_j d_t f(c_j) / (f^j)'(c_1), j < n_terms, and a tail bound."""
    check_param(family, t1)
    if n_terms < 1:
        raise DomainError("n_terms must be >= 1")
    horizon = max(2 * n_terms + 8, n_terms + 64)
    orb = critical_orbit(family, t1, horizon, points=points)
    if orb.zero_index is not None and orb.zero_index < n_terms:
        return TransversalitySum(math.nan, math.nan, "non-CE: vanishing derivative on critical orbit")
    vt = np.asarray(family.dt(t1, orb.points), dtype=float)

    def term(j):
        if vt[j] == 0.0:
            return 0.0
        return float(vt[j] * orb.signs[j] * math.exp(-orb.log_derivs[j]))

    value = math.fsum(term(j) for j in range(n_terms))
    cyc = _exact_cycle(orb.points, 0)
    if cyc is not None and cyc[0] + cyc[1] < horizon - 1:
        i0, per = cyc
        # beyond i0 the terms repeat with ratio 1/(f^per)'(cycle) per block
        lo = max(n_terms, i0)
        block = [term(j) for j in range(lo, lo + per)]
        ratio_log = orb.log_derivs[i0 + per] - orb.log_derivs[i0]
        ratio_sign = orb.signs[i0 + per] * orb.signs[i0]
        head = math.fsum(term(j) for j in range(n_terms, lo))
        bsum = math.fsum(block)
        if bsum == 0.0:
            return TransversalitySum(value, abs(head))
        if ratio_log <= 0:
            return TransversalitySum(value, math.inf, "tail does not contract")
        q = ratio_sign * math.exp(-ratio_log)
        return TransversalitySum(value, abs(head + bsum / (1.0 - q)))
    # geometric tail from observed growth rate
    lo = max(1, n_terms // 2)
    hi = horizon - 1
    rate = (orb.log_derivs[hi] - orb.log_derivs[lo]) / (hi - lo)
    if not math.isfinite(rate) or rate <= 0:
        return TransversalitySum(value, math.inf, "tail does not contract")
    vmax = float(np.max(np.abs(vt)))
    tail = vmax * math.exp(-orb.log_derivs[n_terms - 1]) * math.exp(-rate) / (1.0 - math.exp(-rate))
    return TransversalitySum(value, tail)
