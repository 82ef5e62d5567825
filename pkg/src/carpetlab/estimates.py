"""Heat-kernel analytics: walk dimension, on-diagonal decay, Davies-Gaffney and UHK envelopes."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from . import form as fm
from .carpet import ball
from .scaling import ScalingFunction, phi, psi, psi_inv

#: Kernel fits only use times where ``p_t(x0, x0)`` is at least this multiple of ``1/m(X)``.
SATURATION_FACTOR = 10.0


@dataclass
class FitReport:
    exponent: float
    intercept: float
    r_squared: float
    grid: list

    def residuals(self) -> np.ndarray:
        x, y = np.log(np.array(self.grid, float)).T
        return y - (self.exponent * x + self.intercept)

    def rows(self):
        """``(abscissa, ordinate, residual)`` rows for plotting."""
        return [(a, b, float(e)) for (a, b), e in zip(self.grid, self.residuals())]


@dataclass
class DgReport:
    """Davies-Gaffney regression.

    ``pairs`` holds one ``(R, t, overlap, Phi)`` row per centre pair and
    ``points`` one ``(Phi, mean -log normalised overlap, R, t)`` row per
    distinct ``(R, t)``; the regression runs over ``points``.
    """

    pairs: list
    slope: float
    r_squared: float
    points: list = field(default_factory=list)


@dataclass
class UhkReport:
    c1: float
    c2: float
    max_violation: float
    dominated: bool
    mean_log_gap: float
    samples: int


@dataclass
class EscapeReport:
    r: float
    psi_r: float
    eps_grid: list
    escape_probs: list
    eps_admissible: float | None
    extra: dict = field(default_factory=dict)


def _linfit(x, y):
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss if ss > 0 else 1.0
    return float(slope), float(intercept), float(min(max(r2, 0.0), 1.0))


def loglog_fit(x, y) -> FitReport:
    """Least-squares line through ``(log x, log y)``."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    if len(x) < 2 or np.ptp(x) == 0:
        raise ValueError("need at least two distinct abscissae")
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValueError("log-log fit needs positive data")
    s, c, r2 = _linfit(np.log(x), np.log(y))
    return FitReport(exponent=s, intercept=c, r_squared=r2,
                     grid=[(float(a), float(b)) for a, b in zip(x, y)])


def exit_times(df: fm.DirichletForm, x0: int, radii, metric: str = "sup") -> np.ndarray:
    """``E^{x0} tau_{B(x0, r)}`` for each radius by an absorbing linear solve."""
    g = df.graph
    d = g.distances_from(x0, metric=metric)
    out = []
    for r in radii:
        dom = np.flatnonzero(d <= np.floor(r))
        if not df.has_boundary(dom):
            raise ValueError(f"ball of radius {r} covers the whole graph")
        out.append(fm.exit_time_solve(df, dom)[x0])
    return np.array(out)


#: Mean exit times from Euclidean boxes scale with this exponent.
EUCLIDEAN_WALK_EXPONENT = 2.0


def _check_radii(df: fm.DirichletForm, x0: int, radii) -> np.ndarray:
    radii = np.asarray(radii, float)
    if len(radii) < 3:
        raise ValueError("need at least three radii")
    if len(np.unique(radii)) < 3:
        raise ValueError("radii must contain at least three distinct values")
    if np.any(radii < 1):
        raise ValueError("radii must be >= 1")
    ecc = float(np.max(df.graph.distances_from(x0)))
    if radii.max() > ecc / 3 + 1e-9:
        raise ValueError(f"largest radius {radii.max()} exceeds a third of the diameter ({ecc:.0f})")
    return radii


def fit_walk_dimension(df: fm.DirichletForm, x0: int, radii, metric: str = "sup",
                       reference: fm.DirichletForm | None = None) -> FitReport:
    """Slope of ``log E tau_B(x0, r)`` against ``log(r + 1)``.

    A ball of cell radius ``r`` around a corner cell covers the solid box of
    side ``r + 1``, so that is the length scale on the abscissa.  Balls
    default to the sup-norm metric on cell coordinates, which is equivalent
    to graph distance on the carpet and makes balls around the corner exact
    self-similar blocks when ``r + 1`` is a power of 3.

    With ``reference`` (a hole-free box of the same dimension, walked from
    its own ``origin``) the exponent is ``2 + slope of log(E tau / E tau_ref)``.
    The ratio cancels the lattice discretisation bias that both graphs
    share at small radii.
    """
    radii = _check_radii(df, x0, radii)
    scale = radii + 1.0
    tau = exit_times(df, x0, radii, metric=metric)
    if reference is None:
        return loglog_fit(scale, tau)
    tau_ref = exit_times(reference, reference.graph.origin, radii, metric=metric)
    rel = loglog_fit(scale, tau / tau_ref)
    return FitReport(exponent=EUCLIDEAN_WALK_EXPONENT + rel.exponent, intercept=rel.intercept,
                     r_squared=rel.r_squared,
                     grid=[(float(a), float(b)) for a, b in zip(scale, tau)])


def saturation_window(df: fm.DirichletForm, x0: int, times, diag=None):
    """Times where the return probability density is still >= 10x the uniform value."""
    times = np.asarray(times, float)
    if diag is None:
        diag = fm.heat_diagonal(df, x0, times)
    uniform = 1.0 / df.m.sum()
    keep = diag >= SATURATION_FACTOR * uniform
    return times[keep], np.asarray(diag)[keep]


def ondiag_fit(df: fm.DirichletForm, x0: int, times) -> FitReport:
    """Slope of ``log p_t(x0, x0)`` against ``log t`` inside the pre-saturation window."""
    times = np.asarray(times, float)
    if np.any(times <= 0):
        raise ValueError("times must be positive")
    t, p = saturation_window(df, x0, times)
    if len(t) < 3:
        raise ValueError("fewer than three requested times lie in the pre-saturation window")
    return loglog_fit(t, p)


def _indicator(n, verts):
    f = np.zeros(n)
    f[verts] = 1.0
    return f


def dg_check(df: fm.DirichletForm, sf: ScalingFunction, pairs) -> DgReport:
    """Regress ``-log`` of the normalised ball overlap ``<P_t 1_B1, 1_B2>`` on ``Phi(R, t)``.

    Each pair is ``(x1, x2, t)``; ``R`` is the graph distance between the
    centres and the balls have radius ``R/4``.  The overlap is divided by
    ``sqrt(m(B1) m(B2))`` so that it never exceeds one.  Pairs sharing the
    same ``(R, t)`` are averaged in log space before the fit, which removes
    most of the dependence on where the second ball sits relative to holes.
    """
    g = df.graph
    rows = []
    cache: dict = {}
    for x1, x2, t in pairs:
        R = float(g.distances_from(int(x1))[int(x2)])
        if not np.isfinite(R) or R <= 0:
            raise ValueError(f"pair ({x1}, {x2}) is not at positive distance")
        b1, v1 = ball(g, int(x1), R / 4)
        b2, v2 = ball(g, int(x2), R / 4)
        if np.intersect1d(b1, b2).size:
            raise ValueError(f"support balls around {x1} and {x2} overlap")
        key = (int(x1), R, float(t))
        if key not in cache:
            cache[key] = fm.heat_apply(df, None, float(t), _indicator(g.num_vertices, b1))
        u = cache[key]
        overlap = float(np.sum(u[b2] * df.m[b2]))
        bound = float(np.sqrt(df.m[b1].sum() * df.m[b2].sum()))
        overlap = min(max(overlap, 0.0), bound)
        rows.append((R, float(t), overlap, phi(sf, R, float(t)), bound))
    groups: dict = {}
    for R, t, ov, ph, bound in rows:
        if ov > 0:
            groups.setdefault((R, t), (ph, []))[1].append(-np.log(ov / bound))
    points = [(ph, float(np.mean(ys)), R, t) for (R, t), (ph, ys) in sorted(groups.items())]
    if len(points) < 2:
        raise ValueError("fewer than two (R, t) values with a positive overlap")
    slope, _, r2 = _linfit([p[0] for p in points], [p[1] for p in points])
    return DgReport(pairs=[r[:4] for r in rows], slope=slope, r_squared=r2, points=points)


def time_for_phi(sf: ScalingFunction, R: float, target: float) -> float:
    """Solve ``Phi(R, t) = target`` for ``t`` (``Phi`` is decreasing in ``t``)."""
    if target <= 0 or R <= 0:
        raise ValueError("need R > 0 and a positive target")
    f = lambda lt: phi(sf, R, np.exp(lt)) - target  # noqa: E731
    lo, hi = -30.0, 30.0
    while f(lo) < 0:
        lo -= 10
    while f(hi) > 0:
        hi += 10
    return float(np.exp(brentq(f, lo, hi, xtol=1e-12)))


def dg_pairs(g, x1: int, radii, phi_targets, sf: ScalingFunction, per_radius: int = 8):
    """Grid of ``(x1, x2, t)`` with ``Phi(R, t)`` on each target.

    For every radius ``R`` up to ``per_radius`` second centres are spread
    evenly over the sphere of graph radius ``R`` around ``x1``.
    """
    d = g.distances_from(x1)
    out = []
    for R in radii:
        cand = np.flatnonzero(d == R)
        if cand.size == 0:
            continue
        chosen = np.unique(cand[np.linspace(0, cand.size - 1, per_radius).astype(int)])
        for target in phi_targets:
            t = time_for_phi(sf, float(R), float(target))
            out.extend((int(x1), int(x2), t) for x2 in chosen)
    return out


def _envelope_log(sf, vol_at, d, t, c1, c2):
    radius = psi_inv(sf, c1 * t)
    v = vol_at(radius)
    return -np.log(v) - np.array([phi(sf, c2 * di, ti) for di, ti in zip(d, t)])


def uhk_check(df: fm.DirichletForm, sf: ScalingFunction, x0: int, sample, grid_points: int = 17,
              c_range=(1e-2, 1e2)) -> UhkReport:
    """Fit the tightest UHK envelope ``V(x0, Psi^-1(c1 t))^-1 exp(-Phi(c2 d, t))``.

    ``sample`` is a list of ``(y, t)``.  Among log-spaced ``(c1, c2)`` the
    envelope that dominates every sampled kernel value with the smallest
    mean log gap is returned; if none dominates, the pair with the smallest
    worst-case violation is returned instead.
    """
    sample = list(sample)
    if not sample:
        raise ValueError("empty sample")
    g = df.graph
    dist = g.distances_from(x0)
    ys = np.array([int(y) for y, _ in sample])
    ts = np.array([float(t) for _, t in sample])
    logp = np.empty(len(sample))
    for t in np.unique(ts):
        col = fm.heat_kernel_column(df, x0, float(t))
        sel = ts == t
        logp[sel] = np.log(np.maximum(col[ys[sel]], 1e-300))
    d = dist[ys]
    order = np.argsort(dist)
    dsorted = dist[order]
    cum = np.cumsum(df.m[order])

    def vol_at(radius):
        idx = np.searchsorted(dsorted, np.floor(np.asarray(radius, float)), side="right")
        return np.where(idx > 0, cum[np.maximum(idx - 1, 0)], df.m[x0])

    cs = np.logspace(np.log10(c_range[0]), np.log10(c_range[1]), grid_points)
    best = None
    for c1 in cs:
        for c2 in cs:
            gap = _envelope_log(sf, vol_at, d, ts, c1, c2) - logp
            with np.errstate(over="ignore"):
                viol = float(np.max(np.expm1(-gap)))
            dominated = bool(np.all(gap >= -1e-12))
            key = (not dominated, viol if not dominated else float(np.mean(gap)))
            if best is None or key < best[0]:
                best = (key, c1, c2, viol, dominated, float(np.mean(gap)))
    _, c1, c2, viol, dominated, gap = best
    return UhkReport(c1=float(c1), c2=float(c2), max_violation=viol, dominated=dominated,
                     mean_log_gap=gap, samples=len(sample))


def uhk_violations(df: fm.DirichletForm, sf: ScalingFunction, x0: int, sample, c1: float, c2: float) -> float:
    """Fraction of ``sample`` where the kernel exceeds the envelope with constants ``(c1, c2)``."""
    rep_logp = []
    dist = df.graph.distances_from(x0)
    order = np.argsort(dist)
    dsorted, cum = dist[order], np.cumsum(df.m[order])

    def vol_at(radius):
        idx = np.searchsorted(dsorted, np.floor(np.asarray(radius, float)), side="right")
        return np.where(idx > 0, cum[np.maximum(idx - 1, 0)], df.m[x0])

    ys = np.array([int(y) for y, _ in sample])
    ts = np.array([float(t) for _, t in sample])
    for y, t in zip(ys, ts):
        rep_logp.append(np.log(max(fm.heat_kernel_column(df, x0, t)[y], 1e-300)))
    gap = _envelope_log(sf, vol_at, dist[ys], ts, c1, c2) - np.array(rep_logp)
    return float(np.mean(gap < -1e-12))


def escape_probability(df: fm.DirichletForm, x0: int, r: float, s: float) -> float:
    """``P^{x0}(tau_{B(x0, r)} <= s)`` from the killed semigroup applied to ``1``."""
    dom, _ = ball(df.graph, x0, r)
    if not df.has_boundary(dom):
        raise ValueError("ball covers the whole graph")
    if s == 0:
        return 0.0
    survive = fm.heat_apply(df, dom, s, np.ones(df.n))[x0]
    return float(min(max(1.0 - survive, 0.0), 1.0))


def escape_prob_check(df: fm.DirichletForm, x0: int, r: float, eps_grid, sf: ScalingFunction) -> EscapeReport:
    """Escape probabilities ``P(tau_B <= eps Psi(r))`` on a grid of ``eps``.

    Small ``eps`` always satisfy ``P <= eps`` because early escape is
    exponentially unlikely, so the informative number is the largest grid
    value up to which the bound holds without interruption
    (``eps_admissible``; ``None`` if it already fails at the smallest).
    """
    eps_grid = sorted(float(e) for e in eps_grid)
    if not eps_grid or eps_grid[0] <= 0:
        raise ValueError("eps grid must be non-empty and positive")
    pr = psi(sf, r)
    probs = [escape_probability(df, x0, r, e * pr) for e in eps_grid]
    admissible = None
    for e, p in zip(eps_grid, probs):
        if p > e:
            break
        admissible = e
    return EscapeReport(r=float(r), psi_r=float(pr), eps_grid=eps_grid, escape_probs=probs,
                        eps_admissible=admissible)
