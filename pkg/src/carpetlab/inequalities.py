"""Cutoff functions and empirical cutoff-Sobolev, Faber-Krahn, Cacciopoli and stability checks.

Integrals over an annulus ``U`` are sums over the vertex set returned by
:meth:`CutoffFn.annulus`: the transition region of the cutoff together with
every vertex incident to an edge across which the cutoff changes, so that
``sum_U Gamma(phi, phi)`` is the full energy of ``phi``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.integrate import simpson

from . import form as fm
from .carpet import Graph, ball
from .scaling import ScalingFunction, psi

log = logging.getLogger(__name__)

GRADIENT_COEFF = 1.0 / 8.0
DEFAULT_SLACK = 2.0


@dataclass
class CutoffFn:
    values: np.ndarray
    inner: np.ndarray
    outer: np.ndarray
    kind: str
    meta: dict = field(default_factory=dict)

    def check(self, atol: float = 1e-12) -> None:
        """Raise if the boundary values or the range [0, 1] are violated."""
        v = self.values
        if np.any(v < -atol) or np.any(v > 1 + atol):
            raise AssertionError(f"{self.kind} cutoff leaves [0, 1]")
        if not np.allclose(v[self.inner], 1.0, atol=atol):
            raise AssertionError(f"{self.kind} cutoff is not 1 on the inner set")
        off = np.ones(len(v), dtype=bool)
        off[self.outer] = False
        if np.any(np.abs(v[off]) > atol):
            raise AssertionError(f"{self.kind} cutoff is not 0 off the outer set")

    def annulus(self, graph: Graph) -> np.ndarray:
        n = len(self.values)
        mask = np.zeros(n, dtype=bool)
        mask[self.outer] = True
        mask[self.inner] = False
        i, j = graph.edges[:, 0], graph.edges[:, 1]
        jump = self.values[i] != self.values[j]
        mask[i[jump]] = True
        mask[j[jump]] = True
        return np.flatnonzero(mask)


@dataclass
class CsdReport:
    theta_star: float
    r: float
    R: float
    family_size: int
    worst_member: str = ""
    per_member: dict = field(default_factory=dict)


@dataclass
class FkReport:
    c_f_estimate: float
    nu: float
    samples: int
    radii: list = field(default_factory=list)


# cutoff builders -------------------------------------------------------------
def _dist(g: Graph, x0: int, limit: float = np.inf, metric: str = "graph") -> np.ndarray:
    return g.distances_from(x0, limit=limit, metric=metric)


def cutoff_linear(g: Graph, x0: int, R: float, r: float, metric: str = "graph") -> CutoffFn:
    """``clamp((R + r - d(x0, x)) / r, 0, 1)``."""
    if R < 0 or r < 1:
        raise ValueError("linear cutoff needs R >= 0 and r >= 1")
    d = _dist(g, x0, limit=R + r + 1, metric=metric)
    vals = np.clip((R + r - d) / r, 0.0, 1.0)
    vals[~np.isfinite(d)] = 0.0
    return CutoffFn(vals, np.flatnonzero(d <= R), np.flatnonzero(d < R + r), "linear",
                    {"x0": x0, "R": R, "r": r})


def resolvent_annuli(d: np.ndarray, R: float, r: float):
    """The three nested annuli used by the resolvent cutoff (as vertex arrays)."""
    def shell(a, b):
        return np.flatnonzero((d > R + a * r) & (d < R + b * r))
    return shell(0.1, 0.9), shell(0.2, 0.8), shell(0.4, 0.6)


def cutoff_resolvent(df: fm.DirichletForm, sf: ScalingFunction, x0: int, R: float, r: float,
                     c1: float | None = None, metric: str = "graph") -> CutoffFn:
    """Cutoff built from the killed resolvent ``h = G^{D0}_lam 1_{D1}``, ``lam = 1/Psi(r)``.

    ``phi = 1`` on ``B(x0, R + r/2)`` and ``min(1, c1 h / Psi(r))`` outside.
    When ``c1`` is None it is calibrated to ``Psi(r) / min_{D2} h``, the
    smallest value for which ``phi`` is continuous across ``R + r/2``.
    """
    if r < 10:
        raise ValueError(f"r={r} too small for the resolvent annuli; use cutoff_linear")
    g = df.graph
    d = _dist(g, x0, limit=R + r + 1, metric=metric)
    D0, D1, D2 = resolvent_annuli(d, R, r)
    if min(D0.size, D1.size, D2.size) == 0:
        raise ValueError("degenerate annuli for resolvent cutoff")
    scale = psi(sf, r)
    rhs = np.zeros(df.n)
    rhs[D1] = 1.0
    h = fm.resolvent_solve(df, D0, 1.0 / scale, rhs)
    if c1 is None:
        c1 = scale / float(h[D2].min())
    vals = np.minimum(1.0, c1 * h / scale)
    vals[d < R + r / 2] = 1.0
    return CutoffFn(vals, np.flatnonzero(d <= R), np.flatnonzero(d < R + 0.9 * r), "resolvent",
                    {"x0": x0, "R": R, "r": r, "c1": c1, "h_max": float(h.max()),
                     "psi_r": scale, "h_min_D2": float(h[D2].min())})


def improve_schedule(r: float, lam: float, beta2: float, min_width: float = 1.0):
    """Shell widths ``s_n = c0 r exp(-n lam / beta2)`` truncated below ``min_width``.

    ``c0`` makes the infinite series sum to ``r``; the width left over after
    truncation is added to the last shell.
    """
    q = math.exp(-lam / beta2)
    c0 = (1.0 - q) / q
    widths = []
    n = 1
    while True:
        s = c0 * r * q**n
        if s < min_width:
            break
        widths.append(s)
        n += 1
    if not widths:
        return [float(r)]
    widths[-1] += r - sum(widths)
    return widths


def cutoff_improve(df: fm.DirichletForm, sf: ScalingFunction, x0: int, R: float, r: float,
                   weak_builder: Callable, c1: float, c2: float | None = None,
                   lam: float | None = None, min_width: float = 1.0) -> CutoffFn:
    """Blend of nested weak cutoffs with geometric weights ``b_n = exp(-n lam)``.

    ``lam`` solves ``c1 (e^lam - 1)^2 = 1/8`` unless given (``c1 = 0`` leaves it
    free; default 1).  ``weak_builder(x0, R_inner, width)`` returns a
    :class:`CutoffFn`; shells too thin for it fall back to linear cutoffs.
    """
    if lam is None:
        lam = 1.0 if c1 <= 0 else math.log1p(math.sqrt(GRADIENT_COEFF / c1))
    widths = improve_schedule(r, lam, sf.beta2, min_width)
    flags = {"lam": lam, "c1": c1, "c2": c2, "shells": len(widths), "fallback": []}
    if len(widths) < 2:
        flags["fallback"].append("single-shell")
        phi = weak_builder(x0, R, r)
        return CutoffFn(phi.values, phi.inner, phi.outer, "improved", {**phi.meta, **flags})
    b = np.exp(-lam * np.arange(len(widths) + 1))
    b[-1] = 0.0
    vals = np.zeros(df.n)
    radii = R + np.concatenate([[0.0], np.cumsum(widths)])
    for k, w in enumerate(widths):
        try:
            phik = weak_builder(x0, radii[k], w)
        except ValueError:
            phik = cutoff_linear(df.graph, x0, radii[k], w)
            flags["fallback"].append(k + 1)
        vals += (b[k] - b[k + 1]) * phik.values
    d = _dist(df.graph, x0, limit=R + r + 1)
    flags["radii"] = radii.tolist()
    flags["b"] = b.tolist()
    return CutoffFn(np.clip(vals, 0.0, 1.0), np.flatnonzero(d <= R), np.flatnonzero(d < R + r),
                    "improved", flags)


def greedy_packing(g: Graph, x0: int, R: float, r0: float) -> np.ndarray:
    """Maximal set of centres in ``B(x0, R)`` with pairwise distance ``>= r0``."""
    inner, _ = ball(g, x0, R)
    d0 = _dist(g, x0, limit=R + 1)
    order = inner[np.argsort(d0[inner], kind="stable")]
    covered = np.zeros(g.num_vertices, dtype=bool)
    centers = []
    for v in order:
        if covered[v]:
            continue
        centers.append(int(v))
        dv = _dist(g, int(v), limit=r0)
        covered[dv < r0] = True
    return np.array(centers, dtype=np.int64)


def cutoff_cover_max(df: fm.DirichletForm, x0: int, R: float, r: float,
                     ball_cutoff_builder: Callable | None = None) -> CutoffFn:
    """Pointwise max of per-ball cutoffs over a packing cover of ``B(x0, R)`` by radius ``r/3`` balls.

    ``ball_cutoff_builder(z, r0)`` must return a cutoff for ``B(z, r0) ⊂ B(z, 2 r0)``;
    default is linear.  ``meta`` records the overlap count ``M`` and the
    largest pointwise excess of ``Gamma(phi)`` over ``sum_j Gamma(phi_j)``.
    """
    g = df.graph
    r0 = r / 3.0
    if ball_cutoff_builder is None:
        def ball_cutoff_builder(z, rad):
            return cutoff_linear(g, z, rad, rad)
    centers = greedy_packing(g, x0, R, r0)
    parts = [ball_cutoff_builder(int(z), r0) for z in centers]
    stack = np.array([p.values for p in parts])
    vals = stack.max(axis=0)
    gsum = sum(df.gamma(p.values) for p in parts)
    excess = float(np.max(df.gamma(vals) - gsum))
    support = np.zeros(df.n, dtype=int)
    for p in parts:
        support[p.outer] += 1
    d = _dist(g, x0, limit=R + r + 1)
    return CutoffFn(vals, np.flatnonzero(d <= R), np.flatnonzero(d < R + r), "covermax",
                    {"centers": centers.tolist(), "overlap_M": int(support.max()),
                     "gamma_excess": excess, "r0": r0})


# test-function family ----------------------------------------------------------
def _neighbourhood(g: Graph, verts: np.ndarray) -> np.ndarray:
    mask = np.zeros(g.num_vertices, dtype=bool)
    mask[verts] = True
    a = g.adjacency
    mask |= (a @ mask.astype(float)) > 0
    return np.flatnonzero(mask)


def _induced_laplacian(df: fm.DirichletForm, verts: np.ndarray) -> sp.csr_matrix:
    pos = -np.ones(df.n, dtype=np.int64)
    pos[verts] = np.arange(len(verts))
    i, j = df.edges[:, 0], df.edges[:, 1]
    keep = (pos[i] >= 0) & (pos[j] >= 0)
    a, b, c = pos[i[keep]], pos[j[keep]], df.c[keep]
    n = len(verts)
    w = sp.csr_matrix((np.concatenate([c, c]), (np.concatenate([a, b]), np.concatenate([b, a]))),
                      shape=(n, n))
    return (sp.diags(np.asarray(w.sum(axis=1)).ravel()) - w).tocsr()


def test_family(df: fm.DirichletForm, phi: CutoffFn, smoothing_time: float, seed: int = 0,
                n_random: int = 50, n_eig: int = 8, n_harmonic: int = 5) -> dict:
    """Seeded test functions for the cutoff-Sobolev inequality on ``phi``'s annulus.

    Members: the constant, centred coordinates (when the graph has them), low
    Dirichlet eigenvectors of the annulus neighbourhood, harmonic extensions of
    boundary noise, and heat-smoothed white noise (Neumann heat flow on the
    neighbourhood run for ``smoothing_time``).
    """
    g = df.graph
    U = phi.annulus(g)
    if U.size == 0:
        raise ValueError("empty annulus")
    W = _neighbourhood(g, U)
    rng = np.random.default_rng(seed)
    fam: dict = {"const": np.ones(df.n)}
    if g.coords is not None:
        for k in range(g.coords.shape[1]):
            x = g.coords[:, k].astype(float)
            x = x - x[U].mean()
            if np.any(x[U]):
                fam[f"coord{k}"] = x
    if U.size < df.n:
        eig = fm.dirichlet_eigenvectors(df, U, min(n_eig, U.size))
        for k, v in enumerate(eig):
            fam[f"eig{k}"] = v
    boundary = np.setdiff1d(W, U)
    if boundary.size and U.size:
        dom, K, _ = df.restricted(U)
        coupling = df.K[U][:, boundary]
        lu = None
        for k in range(n_harmonic):
            gb = rng.standard_normal(boundary.size)
            rhs = -(coupling @ gb)
            if lu is None:
                lu = fm.spla.splu(K.tocsc())
            f = np.zeros(df.n)
            f[boundary] = gb
            f[U] = lu.solve(rhs)
            fam[f"harm{k}"] = f
    if n_random:
        KW = _induced_laplacian(df, W)
        noise = rng.standard_normal((W.size, n_random))
        smooth = fm._uniformized(KW, df.m[W], np.asarray(KW.diagonal()) / df.m[W],
                                 smoothing_time, noise, 1e-8)
        for k in range(n_random):
            f = np.zeros(df.n)
            f[W] = smooth[:, k]
            fam[f"noise{k}"] = f
    return fam


def csd_terms(df: fm.DirichletForm, phi: CutoffFn, f: np.ndarray, U: np.ndarray | None = None):
    """``(int_U f^2 dGamma(phi), int_U phi^2 dGamma(f), int_U f^2 dm)``."""
    if U is None:
        U = phi.annulus(df.graph)
    gphi = df.gamma(phi.values)
    gf = df.gamma(f)
    return (float(np.sum(f[U] ** 2 * gphi[U])),
            float(np.sum(phi.values[U] ** 2 * gf[U])),
            float(np.sum(f[U] ** 2 * df.m[U])))


def csd_theta(df: fm.DirichletForm, phi: CutoffFn, family: dict,
              coeff: float = GRADIENT_COEFF) -> CsdReport:
    """Smallest ``theta`` making the cutoff-Sobolev inequality hold across ``family``."""
    if not family:
        raise ValueError("family must be non-empty")
    U = phi.annulus(df.graph)
    if U.size == 0:
        raise ValueError("empty annulus")
    gphi = df.gamma(phi.values)
    best, worst = 0.0, ""
    per = {}
    for name, f in family.items():
        a = float(np.sum(f[U] ** 2 * gphi[U]))
        b = float(np.sum(phi.values[U] ** 2 * df.gamma(f)[U]))
        c = float(np.sum(f[U] ** 2 * df.m[U]))
        if c == 0:
            continue
        val = max(a - coeff * b, 0.0) / c
        per[name] = val
        if not worst or val > best:
            best, worst = val, name
    return CsdReport(theta_star=best, r=float(phi.meta.get("r", np.nan)),
                     R=float(phi.meta.get("R", np.nan)), family_size=len(per),
                     worst_member=worst, per_member=per)


def weak_c2(df: fm.DirichletForm, phi: CutoffFn, family: dict, c1: float, psi_r: float) -> float:
    """Smallest ``c2`` with ``int f^2 dGamma(phi) <= c1 int dGamma(f) + c2/Psi(r) int f^2 dm`` on ``family``."""
    U = phi.annulus(df.graph)
    gphi = df.gamma(phi.values)
    worst = 0.0
    for f in family.values():
        a = float(np.sum(f[U] ** 2 * gphi[U]))
        b = float(np.sum(df.gamma(f)[U]))
        c = float(np.sum(f[U] ** 2 * df.m[U]))
        if c > 0:
            worst = max(worst, max(a - c1 * b, 0.0) * psi_r / c)
    return worst


# scans ---------------------------------------------------------------------------
def fit_loglog(x, y):
    """Least-squares slope, intercept and r^2 of ``log y`` on ``log x``."""
    lx, ly = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    if len(lx) < 2 or np.ptp(lx) == 0:
        raise ValueError("need at least two distinct abscissae")
    slope, icpt = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + icpt)
    ss = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss if ss > 0 else 1.0
    return float(slope), float(icpt), r2


def csa_scan(df: fm.DirichletForm, sf: ScalingFunction, centers, radii, builder: Callable,
             seed: int = 0, n_random: int = 50) -> dict:
    """``csd_theta`` over a grid of ``(x0, R, r)``; ``builder(x0, R, r)`` returns a cutoff.

    ``radii`` is a list of ``(R, r)`` pairs.  The fit is of the largest
    ``theta_star`` per ``r`` against ``r``.
    """
    reports = []
    for x0 in centers:
        for R, r in radii:
            phi = builder(int(x0), R, r)
            fam = test_family(df, phi, psi(sf, r) / 10.0, seed=seed, n_random=n_random)
            rep = csd_theta(df, phi, fam)
            reports.append(rep)
    rs = sorted({rep.r for rep in reports})
    tmax = [max(rep.theta_star for rep in reports if rep.r == r) for r in rs]
    out = {"reports": reports, "r": rs, "theta_max": tmax,
           "C_S": max(t * psi(sf, r) for r, t in zip(rs, tmax)),
           "C_S_by_r": [t * psi(sf, r) for r, t in zip(rs, tmax)]}
    if len(rs) >= 2 and all(t > 0 for t in tmax):
        out["exponent"], out["intercept"], out["r_squared"] = fit_loglog(rs, tmax)
    return out


def sample_connected_subset(g: Graph, verts: np.ndarray, size: int, rng) -> np.ndarray:
    """Random connected subset of ``verts`` grown from a random seed vertex."""
    allowed = np.zeros(g.num_vertices, dtype=bool)
    allowed[verts] = True
    start = int(rng.choice(verts))
    chosen = {start}
    frontier = [start]
    while len(chosen) < size and frontier:
        k = int(rng.integers(len(frontier)))
        v = frontier[k]
        nbrs = [int(u) for u in g.neighbors(v) if allowed[u] and u not in chosen]
        if not nbrs:
            frontier.pop(k)
            continue
        u = nbrs[int(rng.integers(len(nbrs)))]
        chosen.add(u)
        frontier.append(u)
    return np.array(sorted(chosen), dtype=np.int64)


def fk_scan(df: fm.DirichletForm, sf: ScalingFunction, nu: float, samples: int, seed: int = 0,
            radii=(3, 9, 27)) -> FkReport:
    """Minimum of ``lambda_1(D) Psi(r) (m(D)/m(B))^nu`` over random balls and sub-domains.

    A third of the domains are the balls themselves, a third concentric
    sub-balls, the rest random connected subsets.
    """
    if nu <= 0:
        raise ValueError("nu must be positive")
    g = df.graph
    rng = np.random.default_rng(seed)
    best = np.inf
    records = []
    for k in range(samples):
        r = float(radii[k % len(radii)])
        x = int(rng.integers(g.num_vertices))
        B, mB = ball(g, x, r)
        if B.size >= df.n:
            continue
        kind = k % 3
        if kind == 0:
            D = B
        elif kind == 1:
            D, _ = ball(g, x, max(0.0, math.floor(r * rng.uniform(0.2, 0.9))))
        else:
            D = sample_connected_subset(g, B, max(1, int(B.size * rng.uniform(0.1, 0.9))), rng)
        lam = fm.lambda1_dirichlet(df, D)
        mD = float(df.m[D].sum())
        val = lam * psi(sf, r) * (mD / mB) ** nu
        records.append(val)
        best = min(best, val)
    rep = FkReport(c_f_estimate=float(best), nu=nu, samples=len(records), radii=list(radii))
    return rep


# Cacciopoli ------------------------------------------------------------------------
def cacciopoli_check(df: fm.DirichletForm, phi: CutoffFn, theta: float, T: float, level: float,
                     trials: int, seed: int = 0, n_times: int = 65) -> dict:
    """Evaluate both sides of the Cacciopoli inequality for killed caloric functions.

    ``phi`` is a cutoff for ``B' ⊂ B`` with CSD constant ``theta``; ``B`` is
    ``phi.outer``.  Time weight ``k(t) = min(1, t/T1)`` with ``T1 = T/2``.
    Initial data are nonnegative smoothed noise on ``B``; the caloric
    function is the heat flow killed outside ``B``.  Time integrals use
    Simpson's rule on ``n_times`` points.
    """
    B = phi.outer
    rng = np.random.default_rng(seed)
    T1 = T / 2.0
    K_rate = 1.0 / T1
    ts = np.linspace(0.0, T, n_times)
    kt = np.minimum(1.0, ts / T1)
    dom, KB, mB = df.restricted(B)
    rates = df.rates[dom]
    ratios = []
    for _ in range(trials):
        u0 = np.zeros(df.n)
        raw = rng.exponential(1.0, B.size) * rng.uniform(0.5, 2.0)
        u0[B] = fm._uniformized(KB, mB, rates, 2.0, raw, 1e-10)
        us = [u0[B]]
        for a, b in zip(ts[:-1], ts[1:]):
            us.append(fm._uniformized(KB, mB, rates, b - a, us[-1], 1e-11))
        gam_int, v2_int = [], []
        for u, k in zip(us, kt):
            v = np.zeros(df.n)
            v[B] = np.maximum(u - level, 0.0)
            eta_v = phi.values * k * v
            gam_int.append(float(df.gamma(eta_v)[B].sum()))
            v2_int.append(float(np.sum(v[B] ** 2 * mB)))
        vT = np.maximum(us[-1] - level, 0.0)
        lhs = float(np.sum(vT**2 * (phi.values[B] * kt[-1]) ** 2 * mB)) \
            + (2.0 / 9.0) * simpson(gam_int, x=ts)
        rhs = 2.0 * ((20.0 / 9.0) * theta + K_rate) * simpson(v2_int, x=ts)
        if rhs == 0:
            ratios.append(0.0 if lhs == 0 else np.inf)
        else:
            ratios.append(lhs / rhs)
    return {"max_ratio": float(max(ratios)), "ratios": ratios, "theta": theta, "K": K_rate,
            "T": T, "level": level, "slack": DEFAULT_SLACK}


# stability -----------------------------------------------------------------------
def stability_check(df: fm.DirichletForm, factors, C: float, phi: CutoffFn, family: dict,
                    psi_r: float, c1: float = GRADIENT_COEFF) -> dict:
    """Compare weak cutoff-Sobolev constants before and after a conductance perturbation.

    ``c1`` is held at the given value for the base form and raised to
    ``C**2 c1`` for the perturbed one; the measured ``c2`` values are
    reported so that ``c2' <= C c2`` can be checked.
    """
    factors = np.asarray(factors, float)
    if C < 1:
        raise ValueError("C must be >= 1")
    if np.any(factors < 1.0 / C - 1e-12) or np.any(factors > C + 1e-12):
        raise ValueError("perturbation factors must lie in [1/C, C]")
    df2 = df.with_conductances(df.c * factors)
    sandwich_ok = True
    for f in family.values():
        g1, g2 = df.gamma(f), df2.gamma(f)
        if np.any(g2 > C * g1 + 1e-12 * (1 + np.abs(g1))) or np.any(g1 > C * g2 + 1e-12 * (1 + np.abs(g2))):
            sandwich_ok = False
            break
    c2 = weak_c2(df, phi, family, c1, psi_r)
    c1p = C**2 * c1
    c2p = weak_c2(df2, phi, family, c1p, psi_r)
    th1 = csd_theta(df, phi, family).theta_star
    th2 = csd_theta(df2, phi, family).theta_star
    return {"C": C, "c1": c1, "c2": c2, "c1_perturbed": c1p, "c2_perturbed": c2p,
            "gamma_sandwich": sandwich_ok, "theta_star": th1, "theta_star_perturbed": th2}
