"""Tower transfer operator, projection, truncation, norms and the truncated
leading eigenpair.

Tower functions are stored as cell masses (integrals over grid cells), one
uniform grid per level: level 0 on [0, 1] in x, level k >= 1 on J_k in
offsets u = x - c.  The operator is assembled once as a sparse matrix acting
on the concatenated masses.  Climbing is a conservative remap of
xi_k psi_k / lambda onto the grid of J_{k+1}; falling pushes
lambda^j (1 - xi_j) psi_j forward under f^{j+1}, spreading each monotone
piece of a cell uniformly over the image interval.  Every column of the
matrix therefore carries exactly the nu-weight it removes, and nu is
preserved to roundoff.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, List, Optional

import numpy as np
import scipy.sparse as sp

from .map_family import DomainError
from .tower import CutoffFamily, Tower

_GL_X, _GL_W = np.polynomial.legendre.leggauss(4)


class EigenpairError(RuntimeError):
    def __init__(self, msg, history):
        super().__init__(msg)
        self.history = history


def default_lambda(lambda_c: float, rho: float, shrink: float = 0.95) -> float:
    """lambda = min(lambda_c^{1/4}, sqrt(rho))^shrink, inside (1, min(lambda_c^{1/2}, sqrt(rho)))."""
    return min(lambda_c ** 0.25, math.sqrt(rho)) ** shrink


def theta0(lambda_c: float, lam: float) -> float:
    return 0.5 * (1.0 + min(math.sqrt(lambda_c) / lam, lam))


def tau_M(tower: Tower, lam: float, M: int, alpha: float = 0.0) -> float:
    """M^{(alpha - beta)/2} lambda^M |(f^M)'(c_1)|^{-1/2}."""
    L = tower.log_derivs
    return M ** ((alpha - tower.beta) / 2) * lam**M * math.exp(-0.5 * L[M])


@dataclass
class TowerGrid:
    tower: Tower
    lam: float
    n0: int = 2**14
    n_level: int = 2**12
    K: Optional[int] = None

    def __post_init__(self):
        if self.K is None:
            self.K = self.tower.K_max
        if not self.lam > 1:
            raise DomainError("lambda must exceed 1")
        sizes = [self.n0] + [self.n_level] * self.K
        self.offsets = np.concatenate([[0], np.cumsum(sizes)])

    @property
    def size(self):
        return int(self.offsets[-1])

    def n(self, k):
        return self.n0 if k == 0 else self.n_level

    def edges(self, k):
        """Cell edges of level k: x for k = 0, offsets u for k >= 1."""
        if k == 0:
            return np.linspace(0.0, 1.0, self.n0 + 1)
        lo, hi = self.tower.J(k)
        return np.linspace(lo, hi, self.n_level + 1)

    def u_edges(self, k):
        e = self.edges(k)
        return e - self.tower.c if k == 0 else e

    def width(self, k):
        e = self.edges(k)
        return (e[-1] - e[0]) / self.n(k)

    def sl(self, k):
        return slice(int(self.offsets[k]), int(self.offsets[k + 1]))

    def weights(self):
        """nu-weight lambda^k of every cell."""
        w = np.empty(self.size)
        for k in range(self.K + 1):
            w[self.sl(k)] = self.lam**k
        return w


@dataclass
class TowerFunction:
    grid: TowerGrid
    m: np.ndarray

    def level(self, k):
        return self.m[self.grid.sl(k)]

    def values(self, k):
        """Cell averages of psi_k."""
        return self.level(k) / self.grid.width(k)

    def copy(self):
        return TowerFunction(self.grid, self.m.copy())

    def to_dict(self):
        out = []
        for k in range(self.grid.K + 1):
            e = self.grid.edges(k)
            mid = 0.5 * (e[:-1] + e[1:])
            if k > 0:
                mid = mid + self.grid.tower.c
            out.append({"k": k, "grid": mid.tolist(), "values": self.values(k).tolist()})
        return {"lambda": self.grid.lam, "levels": out}

    @classmethod
    def from_levels(cls, grid: TowerGrid, fns: List[Optional[Callable]]):
        """Cell averages of level functions given in offsets u (x for level 0)."""
        m = np.zeros(grid.size)
        for k, fn in enumerate(fns):
            if fn is None or k > grid.K:
                continue
            e = grid.edges(k)
            h = grid.width(k)
            mid = 0.5 * (e[:-1] + e[1:])
            acc = np.zeros(len(mid))
            for xg, wg in zip(_GL_X, _GL_W):
                acc += 0.5 * wg * np.asarray(fn(mid + 0.5 * h * xg), dtype=float)
            m[grid.sl(k)] = acc * h
        return cls(grid, m)


def _cell_average(fn, e):
    h = e[1:] - e[:-1]
    mid = 0.5 * (e[:-1] + e[1:])
    acc = np.zeros(len(mid))
    for xg, wg in zip(_GL_X, _GL_W):
        acc += 0.5 * wg * np.asarray(fn(mid + 0.5 * h * xg), dtype=float)
    return acc


def spread(lo, hi, w, src, n_out, out_lo=0.0, out_hi=1.0):
    """Uniform spreading of mass w on [lo, hi] over n_out bins of [out_lo, out_hi].

    Returns COO triplets (src, bin, mass); mass is preserved exactly up to
    roundoff, including for pieces poking out of the output range.
    """
    lo = np.clip(np.asarray(lo, dtype=float), out_lo, out_hi)
    hi = np.clip(np.asarray(hi, dtype=float), out_lo, out_hi)
    scale = n_out / (out_hi - out_lo)
    jlo = np.clip(np.floor((lo - out_lo) * scale).astype(np.int64), 0, n_out - 1)
    jhi = np.clip(np.floor((hi - out_lo) * scale).astype(np.int64), 0, n_out - 1)
    cnt = jhi - jlo + 1
    rep = np.repeat(np.arange(len(lo)), cnt)
    off = np.concatenate([[0], np.cumsum(cnt)])
    j = jlo[rep] + (np.arange(int(off[-1])) - off[rep])
    e0 = out_lo + j / scale
    e1 = out_lo + (j + 1) / scale
    ov = np.minimum(hi[rep], e1) - np.maximum(lo[rep], e0)
    width = hi - lo
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = np.where(width[rep] > 0, np.maximum(ov, 0.0) / width[rep], (j == jlo[rep]).astype(float))
    # renormalize per piece against roundoff
    tot = np.bincount(rep, weights=frac, minlength=len(lo))
    frac = frac / np.where(tot[rep] > 0, tot[rep], 1.0)
    return np.asarray(src)[rep], j, frac * np.asarray(w)[rep]


def _pieces(grid: TowerGrid, k: int):
    """Cells of level k split at the critical point: (u_lo, u_hi, cell index, fraction)."""
    e = grid.u_edges(k)
    a, b = e[:-1], e[1:]
    idx = np.arange(len(a))
    st = (a < 0) & (b > 0)
    A = np.concatenate([np.where(st, a, a), np.zeros(int(st.sum()))])
    B = np.concatenate([np.where(st, 0.0, b), b[st]])
    I = np.concatenate([idx, idx[st]])
    F = (B - A) / (b - a)[I]
    return A, B, I, F


def push_triplets(tower: Tower, grid: TowerGrid, k: int, n_iter: int, n_out: int, weight=None):
    """Push the cells of level k forward under f^{n_iter} onto n_out bins of [0, 1].

    ``weight`` multiplies the cell masses (e.g. 1 - xi).  Image intervals
    are hulls of the images of the piece endpoints and midpoint, so a fold
    inside one cell only smears that cell's mass.
    """
    A, B, I, F = _pieces(grid, k)
    w = F if weight is None else F * np.asarray(weight)[I]
    keep = w != 0
    A, B, I, w = A[keep], B[keep], I[keep], w[keep]
    ims = [tower.image(n_iter, v) for v in (A, 0.5 * (A + B), B)]
    lo = np.minimum(np.minimum(ims[0], ims[1]), ims[2])
    hi = np.maximum(np.maximum(ims[0], ims[1]), ims[2])
    return spread(lo, hi, w, I, n_out)


def remap_triplets(src_e, dst_e, weight):
    """Conservative remap of cell masses from edges src_e onto edges dst_e.

    Parts of a source cell outside the destination range are clamped onto
    it, so each column sums to its weight.
    """
    a, b = src_e[:-1], src_e[1:]
    lo0, hi0 = dst_e[0], dst_e[-1]
    lo = np.clip(a, lo0, hi0)
    hi = np.clip(b, lo0, hi0)
    src = np.arange(len(a))
    keep = np.asarray(weight) != 0
    return spread(lo[keep], hi[keep], np.asarray(weight)[keep], src[keep], len(dst_e) - 1, lo0, hi0)


class TransferOperator:
    """Sparse assembly of L-hat, the projection Pi and the ground-level Ulam operator."""

    def __init__(self, tower: Tower, cutoffs: CutoffFamily, grid: TowerGrid):
        self.tower = tower
        self.cutoffs = cutoffs
        self.grid = grid
        self._pi = {}
        K = grid.K
        lam = grid.lam
        rows, cols, vals = [], [], []
        self.xi_avg = []
        for k in range(K + 1):
            xi = _cell_average(lambda u: cutoffs.xi(k, u), grid.u_edges(k)) if k < K else np.zeros(grid.n(k))
            # quadrature rounding must not leak mass off the plateaus
            xi = np.clip(xi, 0.0, 1.0)
            xi[xi > 1.0 - 1e-14] = 1.0
            xi[xi < 1e-14] = 0.0
            self.xi_avg.append(xi)
            o = grid.offsets[k]
            if k < K and np.any(xi > 0):
                s, d, v = remap_triplets(grid.u_edges(k), grid.u_edges(k + 1), xi / lam)
                rows.append(d + grid.offsets[k + 1])
                cols.append(s + o)
                vals.append(v)
            s, d, v = push_triplets(tower, grid, k, k + 1, grid.n0, (1.0 - xi) * lam**k)
            rows.append(d)
            cols.append(s + o)
            vals.append(v)
        N = grid.size
        self.matrix = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(N, N)
        ).tocsr()

    def apply(self, psi: TowerFunction) -> TowerFunction:
        return TowerFunction(self.grid, self.matrix @ psi.m)

    def truncated_matrix(self, M: int):
        n = int(self.grid.offsets[min(M, self.grid.K) + 1])
        return self.matrix[:n, :n].tocsr()

    def pi_matrix(self, n_out: Optional[int] = None):
        n_out = self.grid.n0 if n_out is None else n_out
        if n_out not in self._pi:
            g = self.grid
            rows, cols, vals = [], [], []
            for k in range(g.K + 1):
                if k == 0 and n_out == g.n0:
                    idx = np.arange(g.n0)
                    rows.append(idx)
                    cols.append(idx)
                    vals.append(np.ones(g.n0))
                    continue
                if k == 0:
                    s, d, v = remap_triplets(g.edges(0), np.linspace(0, 1, n_out + 1), np.ones(g.n0))
                else:
                    s, d, v = push_triplets(self.tower, g, k, k, n_out, np.full(g.n(k), g.lam**k))
                rows.append(d)
                cols.append(s + g.offsets[k])
                vals.append(v)
            self._pi[n_out] = sp.coo_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n_out, g.size)
            ).tocsr()
        return self._pi[n_out]

    @cached_property
    def ground_ulam(self):
        """Transfer operator of f_t on level-0 masses with the same push machinery."""
        g = self.grid
        s, d, v = push_triplets(self.tower, g, 0, 1, g.n0)
        return sp.coo_matrix((v, (d, s)), shape=(g.n0, g.n0)).tocsr()


def apply_transfer(op: TransferOperator, psi: TowerFunction) -> TowerFunction:
    return op.apply(psi)


def project(op: TransferOperator, psi: TowerFunction, n_out: Optional[int] = None) -> np.ndarray:
    """Cell masses of Pi psi on n_out uniform bins of [0, 1]."""
    return op.pi_matrix(n_out) @ psi.m


def truncate(psi: TowerFunction, M: int) -> TowerFunction:
    out = psi.copy()
    g = psi.grid
    if M < g.K:
        out.m[int(g.offsets[M + 1]) :] = 0.0
    return out


def dual_mass(psi: TowerFunction) -> float:
    """nu(psi) = sum_k lambda^k int psi_k."""
    g = psi.grid
    return math.fsum(g.lam**k * math.fsum(psi.level(k)) for k in range(g.K + 1))


def lp_exponent(lam: float, Lambda: float, p: float) -> float:
    """r with lambda^{1-r} = Lambda^{(1 - 1/p)/2}."""
    return 1.0 - (1.0 - 1.0 / p) * math.log(Lambda) / (2.0 * math.log(lam))


def norm(psi: TowerFunction, kind: str = "L1", p: Optional[float] = None, Lambda: Optional[float] = None) -> float:
    """Tower norms: 'W11' (sum of W^1_1 norms), 'L1' (lambda-weighted), 'Lp'."""
    g = psi.grid
    total = []
    if kind == "Lp":
        if Lambda is None or p is None or p <= 1:
            raise DomainError("Lp norm needs p > 1 and the postcritical expansion Lambda")
        r = lp_exponent(g.lam, Lambda, p)
    for k in range(g.K + 1):
        m = psi.level(k)
        h = g.width(k)
        if kind == "L1":
            total.append(g.lam**k * float(np.sum(np.abs(m))))
        elif kind == "W11":
            v = m / h
            tv = float(np.sum(np.abs(np.diff(v)))) + abs(v[0]) + abs(v[-1])
            total.append(float(np.sum(np.abs(m))) + tv)
        elif kind == "Lp":
            v = m / h
            total.append(g.lam ** (k * r) * float(np.sum(h * np.abs(v) ** p)) ** (1.0 / p))
        else:
            raise DomainError(f"unknown norm kind {kind!r}")
    return math.fsum(total)


@dataclass
class Eigenpair:
    M: int
    kappa: float
    phi: TowerFunction
    residual: float
    tau_M: float
    iterations: int
    history: List[float] = field(default_factory=list)

    @property
    def one_minus_kappa(self):
        return 1.0 - self.kappa

    def to_dict(self):
        d = {"M": self.M, "kappa": self.kappa, "residual": self.residual, "tau_M": self.tau_M, "iterations": self.iterations}
        d["phi"] = self.phi.to_dict()
        return d


def leading_eigenpair(
    op: TransferOperator,
    M: int,
    tol: float = 1e-10,
    max_iter: int = 20_000,
    alpha: float = 0.0,
    start: Optional[TowerFunction] = None,
) -> Eigenpair:
    """Leading eigenpair of T_M L-hat T_M by averaged power iteration.

    Iterates phi <- (phi + A phi / kappa) / 2, which damps eigenvalues on the
    circle |z| = kappa other than kappa itself.  kappa is the nu-quotient
    nu(A phi) / nu(phi), evaluated as 1 - (nu-mass climbing out of level M) / nu(phi),
    an identity that holds because the untruncated operator preserves nu.
    """
    g = op.grid
    M = min(M, g.K)
    A = op.truncated_matrix(M)
    n = A.shape[0]
    w = g.weights()[:n]
    lam = g.lam
    top = g.sl(M)
    leak_w = lam**M * (op.xi_avg[M] if M < g.K else np.zeros(g.n(M)))
    phi = np.zeros(n)
    if start is not None:
        phi[:] = start.m[:n]
    else:
        phi[: g.n0] = 1.0 / g.n0
    phi /= w @ phi
    hist = []
    kappa = 1.0
    res = math.inf
    for it in range(1, max_iter + 1):
        Aphi = A @ phi
        nu = w @ phi
        kappa = 1.0 - float(leak_w @ phi[top]) / nu
        r = Aphi - kappa * phi
        res = float(w @ np.abs(r)) / nu
        hist.append(res)
        if res < tol:
            break
        phi = 0.5 * (phi + Aphi / kappa)
        phi = np.maximum(phi, 0.0)
        phi /= w @ phi
    else:
        raise EigenpairError(f"eigenpair residual {res:.3g} above tol {tol:.3g} after {max_iter} iterations", hist)
    full = np.zeros(g.size)
    full[:n] = phi
    return Eigenpair(M, kappa, TowerFunction(g, full), res, tau_M(op.tower, lam, M, alpha), it, hist[-50:])


def pair_observable(tower: Tower, psi: TowerFunction, A: Callable, levels=None) -> np.ndarray:
    """Per-level pairings lambda^k int A(f^k(x)) psi_k(x) dx, with f and the orbit of ``tower``.

    psi is taken piecewise constant on cells; the integral uses Gauss points.
    """
    g = psi.grid
    out = np.zeros(g.K + 1)
    ks = range(g.K + 1) if levels is None else levels
    for k in ks:
        m = psi.level(k)
        if not np.any(m):
            continue
        e = g.u_edges(k)
        h = e[1] - e[0]
        mid = 0.5 * (e[:-1] + e[1:])
        acc = np.zeros(len(mid))
        for xg, wg in zip(_GL_X, _GL_W):
            acc += 0.5 * wg * np.asarray(A(tower.image(k, mid + 0.5 * h * xg)), dtype=float)
        out[k] = g.lam**k * math.fsum(acc * m)
    return out


def spectral_gap_estimate(history: List[float]) -> float:
    """Geometric decay rate of the residual history (diagnostic only)."""
    h = np.asarray([x for x in history if x > 0])
    if len(h) < 10:
        return math.nan
    y = np.log(h[-min(len(h), 40) :])
    return float(math.exp(np.polyfit(np.arange(len(y)), y, 1)[0]))
