"""Birkhoff and Ulam estimators of the SRB measure, and the Lyapunov exponent."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, NamedTuple, Optional, Tuple

import numpy as np
import scipy.sparse as sp

from .map_family import DomainError, MapFamily, check_param


class ConvergenceError(RuntimeError):
    def __init__(self, msg, residual, history=None):
        super().__init__(msg)
        self.residual = residual
        self.history = history or []


class BirkhoffResult(NamedTuple):
    mean: float
    stderr: float
    flags: tuple = ()


def _default_chains(n_iters):
    return int(min(8192, max(1, n_iters // 10_000)))


def _run_chains(family, t, n_iters, burn_in, x0, seed, chains, fn):
    """Iterate independent chains; return per-chain sums and counts of finite fn values.

    Chains whose state lands exactly on c, or on a repelling fixed point at
    0, are nudged by a tiny random amount and flagged.
    """
    check_param(family, t)
    if n_iters < 1:
        raise DomainError("n_iters must be positive")
    rng = np.random.default_rng(seed)
    chains = _default_chains(n_iters) if chains is None else int(chains)
    chains = max(1, min(chains, n_iters))
    steps = n_iters // chains
    if x0 is None:
        x0 = float(rng.uniform(0.1, 0.9))
    if not 0.0 < x0 < 1.0:
        raise DomainError("x0 must lie in (0, 1)")
    y = np.full(chains, float(x0))
    if chains > 1:
        y = np.clip(y + rng.uniform(-1e-6, 1e-6, chains), 1e-12, 1 - 1e-12)
    flags = []
    zero_repels = abs(float(family.dx(t, 0.0))) > 1.0
    sums = np.zeros(chains)
    counts = np.zeros(chains, dtype=np.int64)

    def nudge(y):
        bad = y == family.c
        if zero_repels:
            bad |= (y == 0.0) | (y == 1.0)
        if np.any(bad):
            if "perturbed" not in flags:
                flags.append("perturbed")
            y = y.copy()
            y[bad] = np.clip(np.abs(y[bad] + rng.uniform(-1e-9, 1e-9, int(bad.sum()))), 1e-12, 1 - 1e-12)
        return y

    for _ in range(burn_in):
        y = nudge(family.eval(t, y))
    for _ in range(steps):
        v = fn(y)
        ok = np.isfinite(v)
        if ok.all():
            sums += v
            counts += 1
        else:
            if "skipped" not in flags:
                flags.append("skipped")
            sums += np.where(ok, v, 0.0)
            counts += ok
        y = nudge(family.eval(t, y))
    return sums, counts, steps, flags


def _batch_stats(sums, counts, steps, n_batches=100):
    total = math.fsum(sums)
    n = int(counts.sum())
    if n == 0:
        return math.nan, math.nan
    mean = total / n
    chains = len(sums)
    if chains >= n_batches:
        groups = np.array_split(np.arange(chains), n_batches)
        bm = np.array([sums[g].sum() / max(counts[g].sum(), 1) for g in groups])
        stderr = float(np.std(bm, ddof=1) / math.sqrt(n_batches))
    else:
        per = sums / np.maximum(counts, 1)
        stderr = float(np.std(per, ddof=1) / math.sqrt(chains)) if chains > 1 else math.nan
    return mean, stderr


def birkhoff_average(
    family: MapFamily,
    t,
    A: Callable,
    n_iters: int,
    burn_in: int = 10_000,
    x0: Optional[float] = None,
    seed: int = 0,
    chains: Optional[int] = None,
    n_batches: int = 100,
) -> BirkhoffResult:
    """Time average of A along orbits of f_t.

    The ``n_iters`` iterates are shared among independent chains started
    near ``x0``, each after its own burn-in; the standard error comes from
    batch means over chain groups (or over chains when there are few).
    With a single chain the standard error uses time blocks.
    """
    if n_iters < 10_000:
        raise DomainError("n_iters must be >= 1e4")
    chains = _default_chains(n_iters) if chains is None else chains
    if chains == 1:
        # time blocks on a single chain
        steps = n_iters
        block = steps // n_batches
        check_param(family, t)
        y = float(x0 if x0 is not None else np.random.default_rng(seed).uniform(0.1, 0.9))
        for _ in range(burn_in):
            y = float(family.eval(t, y))
        buf = np.empty(steps)
        for i in range(steps):
            buf[i] = y
            y = float(family.eval(t, y))
            if y == family.c:
                y = y + 1e-12
        vals = np.asarray(A(buf), dtype=float)
        mean = math.fsum(vals) / steps
        bm = vals[: block * n_batches].reshape(n_batches, block).mean(axis=1)
        return BirkhoffResult(mean, float(np.std(bm, ddof=1) / math.sqrt(n_batches)), ())
    sums, counts, steps, flags = _run_chains(
        family, t, n_iters, burn_in, x0, seed, chains, lambda y: np.asarray(A(y), dtype=float)
    )
    mean, stderr = _batch_stats(sums, counts, steps, n_batches)
    return BirkhoffResult(mean, stderr, tuple(flags))


def lyapunov(
    family: MapFamily,
    t,
    n_iters: int,
    burn_in: int = 10_000,
    x0: Optional[float] = None,
    seed: int = 0,
    chains: Optional[int] = None,
) -> BirkhoffResult:
    """(1/n) sum log|f_t'(f^k x)|; exactly vanishing derivatives are skipped and flagged."""

    def fn(y):
        with np.errstate(divide="ignore"):
            return np.log(np.abs(family.dx(t, y)))

    sums, counts, steps, flags = _run_chains(family, t, n_iters, burn_in, x0, seed, chains, fn)
    mean, stderr = _batch_stats(sums, counts, steps)
    if int(counts.sum()) == 0:
        return BirkhoffResult(-math.inf, math.nan, tuple(flags))
    return BirkhoffResult(mean, stderr, tuple(flags))


# ---------------------------------------------------------------- Ulam


@dataclass
class UlamMatrix:
    n: int
    P: sp.csr_matrix
    t: float = math.nan

    def row_sums(self):
        return np.asarray(self.P.sum(axis=1)).ravel()


@dataclass
class BinnedDensity:
    bins: int
    masses: np.ndarray
    support_hint: Tuple[float, float] = (0.0, 1.0)
    iterations: int = 0
    residual: float = 0.0

    @property
    def edges(self):
        return np.linspace(0.0, 1.0, self.bins + 1)

    @property
    def midpoints(self):
        e = self.edges
        return 0.5 * (e[:-1] + e[1:])

    @property
    def density(self):
        return self.masses * self.bins

    def to_csv(self, path):
        e = self.edges
        with open(path, "w") as fh:
            fh.write("bin_left,bin_right,mass\n")
            for a, b, m in zip(e[:-1], e[1:], self.masses):
                fh.write(f"{a:.17g},{b:.17g},{m:.17g}\n")


def _bisect_preimage(family, t, a, b, y, increasing, iters=64):
    lo = a.copy()
    hi = b.copy()
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        fm = family.eval(t, mid)
        go_right = (fm < y) if increasing is None else np.where(increasing, fm < y, fm > y)
        lo = np.where(go_right, mid, lo)
        hi = np.where(go_right, hi, mid)
    return 0.5 * (lo + hi)


def interval_push(family, t, a, b, owner, weight, n_out, lo_out=0.0, hi_out=1.0):
    """Exact pushforward of uniform mass on monotone pieces [a, b] into bins.

    Piece i carries mass ``weight[i]`` spread uniformly in x on [a_i, b_i];
    the mass falling into output bin j is found from preimages of the bin
    edges.  Returns COO triplets (owner, bin, mass).
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    ya = family.eval(t, a)
    yb = family.eval(t, b)
    inc = yb >= ya
    lo = np.minimum(ya, yb)
    hi = np.maximum(ya, yb)
    scale = n_out / (hi_out - lo_out)
    jlo = np.clip(np.floor((lo - lo_out) * scale).astype(np.int64), 0, n_out - 1)
    jhi = np.clip(np.ceil((hi - lo_out) * scale).astype(np.int64), 1, n_out)
    nint = np.maximum(jhi - jlo - 1, 0)
    npc = len(a)
    # breakpoints per piece: lo, interior edges, hi
    nb = nint + 2
    off = np.concatenate([[0], np.cumsum(nb)])
    tot = int(off[-1])
    pid = np.repeat(np.arange(npc), nb)
    pos = np.arange(tot) - off[pid]
    yb_all = lo_out + (jlo[pid] + pos) / scale
    first = pos == 0
    last = pos == nb[pid] - 1
    yb_all = np.where(first, lo[pid], yb_all)
    yb_all = np.where(last, hi[pid], yb_all)
    xb = np.empty(tot)
    xb[first] = np.where(inc, a, b)
    xb[last] = np.where(inc, b, a)
    mid = ~(first | last)
    if np.any(mid):
        pm = pid[mid]
        xb[mid] = _bisect_preimage(family, t, a[pm], b[pm], yb_all[mid], inc[pm])
    seg = ~last
    dx = np.abs(xb[1:] - xb[:-1])[seg[:-1]]
    spid = pid[:-1][seg[:-1]]
    spos = pos[:-1][seg[:-1]]
    width = b[spid] - a[spid]
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = np.where(width > 0, dx / width, 0.0)
    # degenerate pieces carry their full mass to one bin
    degen = width <= 0
    frac[degen & (spos == 0)] = 1.0
    target = np.clip(jlo[spid] + spos, 0, n_out - 1)
    return owner[spid], target, frac * weight[spid]


def _split_at_c(family, a, b):
    straddle = (a < family.c) & (b > family.c)
    A = np.concatenate([np.where(straddle, a, a), a[straddle] * 0 + family.c])
    B = np.concatenate([np.where(straddle, family.c, b), b[straddle]])
    idx = np.concatenate([np.arange(len(a)), np.nonzero(straddle)[0]])
    return A, B, idx


def build_ulam(family: MapFamily, t, n_bins: int, samples_per_bin: Optional[int] = None, seed: int = 0) -> UlamMatrix:
    """Ulam matrix P[i, j] = |bin_i ∩ f^{-1} bin_j| / |bin_i|.

    Exact interval preimages are used by default; ``samples_per_bin``
    switches to stratified sampling.
    """
    if n_bins < 2:
        raise DomainError("n_bins must be >= 2")
    check_param(family, t)
    e = np.linspace(0.0, 1.0, n_bins + 1)
    if samples_per_bin:
        rng = np.random.default_rng(seed)
        s = samples_per_bin
        u = (np.arange(s) + rng.uniform(0, 1, (n_bins, s))) / s
        x = e[:-1, None] + u / n_bins
        j = np.clip(np.floor(family.eval(t, x) * n_bins).astype(np.int64), 0, n_bins - 1)
        rows = np.repeat(np.arange(n_bins), s)
        P = sp.coo_matrix((np.full(rows.size, 1.0 / s), (rows, j.ravel())), shape=(n_bins, n_bins)).tocsr()
        return UlamMatrix(n_bins, P, t)
    a, b, owner = _split_at_c(family, e[:-1], e[1:])
    w = (b - a) * n_bins
    r, c, v = interval_push(family, t, a, b, owner, w, n_bins)
    P = sp.coo_matrix((v, (r, c)), shape=(n_bins, n_bins)).tocsr()
    P.sum_duplicates()
    rs = np.asarray(P.sum(axis=1)).ravel()
    P = sp.diags(1.0 / rs) @ P
    return UlamMatrix(n_bins, P.tocsr(), t)


def stationary_density(U, tol: float = 1e-12, max_iter: int = 200_000, start=None, support_hint=(0.0, 1.0)) -> BinnedDensity:
    """Left fixed vector of a row-stochastic matrix.

    Iterates the lazy chain rho <- (rho + rho P) / 2, an averaging that damps
    eigenvalues on the unit circle other than 1 (periodic band rotation).
    Stops when successive iterates differ by less than ``tol`` in L1.
    """
    P = U.P if isinstance(U, UlamMatrix) else sp.csr_matrix(U)
    n = P.shape[0]
    PT = P.T.tocsr()
    rho = np.full(n, 1.0 / n) if start is None else np.asarray(start, dtype=float) / np.sum(start)
    res = math.inf
    for it in range(1, max_iter + 1):
        new = 0.5 * (rho + PT @ rho)
        new /= new.sum()
        res = float(np.abs(new - rho).sum())
        rho = new
        if res < tol:
            return BinnedDensity(n, np.maximum(rho, 0.0), tuple(support_hint), it, res)
    raise ConvergenceError(f"stationary density did not converge (residual {res:.3g})", res)


def integrate_observable(density: BinnedDensity, A: Callable) -> float:
    """sum_i masses[i] A(midpoint_i)."""
    return math.fsum(density.masses * np.asarray(A(density.midpoints), dtype=float))


def ulam_density(family: MapFamily, t, n_bins: int, tol: float = 1e-13) -> BinnedDensity:
    c1 = float(family.eval(t, family.c))
    c2 = float(family.eval(t, c1))
    return stationary_density(build_ulam(family, t, n_bins), tol=tol, support_hint=(c2, c1))


def arcsine_bin_masses(n_bins: int) -> np.ndarray:
    """Bin masses of the t=4 invariant density 1/(pi sqrt(x(1-x)))."""
    e = np.linspace(0.0, 1.0, n_bins + 1)
    F = (2.0 / math.pi) * np.arcsin(np.sqrt(e))
    return np.diff(F)
