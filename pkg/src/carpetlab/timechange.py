"""Time change ``a(x) = max(1, d(0, x)**p)`` on the carpet graph: metric, measure, completeness.

Truncations of the unbounded carpet are the corner blocks of side ``3**k``:
the block of a generation-n carpet with ``k <= n`` is exactly the
generation-k carpet, so one built graph carries a whole sweep of nested
truncations.  Sweeps are judged by the per-generation exponent
``kappa_k = log_3(I_{k+1} / I_k)`` of their increments ``I_k``: clearly
negative means geometric convergence, non-negative means no convergence.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse import csgraph

from . import form as fm
from . import inequalities as iq
from .carpet import Graph
from .estimates import FitReport, loglog_fit
from .scaling import ScalingFunction, psi

log = logging.getLogger(__name__)

#: Deterministic sweeps (metric, measure) are exact sums; only a small margin is needed.
EXACT_MARGIN = 2e-3
#: Solves and Monte Carlo carry finite-size bias; demand a clear per-generation exponent.
SWEEP_MARGIN = 0.1


@dataclass(frozen=True)
class TimeChangeSpec:
    p: float
    origin: int | None = None

    def __post_init__(self):
        if self.p < 0 or not math.isfinite(self.p):
            raise ValueError("p must be a finite number >= 0")

    def origin_of(self, g: Graph) -> int:
        return g.origin if self.origin is None else int(self.origin)


@dataclass
class SweepTrend:
    values: list
    increments: list
    kappas: list
    label: str  # "shrinking", "non-shrinking" or "inconclusive"


@dataclass
class VgcReport:
    classification: str  # "holds", "fails" or "inconclusive"
    rho: SweepTrend
    mass: SweepTrend
    integrand: list = field(default_factory=list)


@dataclass
class ScomReport:
    classification: str  # "complete", "incomplete" or "inconclusive"
    evidence: dict = field(default_factory=dict)


def weight(g: Graph, spec: TimeChangeSpec) -> np.ndarray:
    """``a(x) = max(1, d(origin, x)**p)`` with graph distance."""
    d = g.distances_from(spec.origin_of(g))
    with np.errstate(divide="ignore"):
        a = np.maximum(1.0, d ** spec.p)
    return a


def time_changed_measure(g: Graph, spec: TimeChangeSpec, measure=None) -> np.ndarray:
    m = g.measure if measure is None else np.asarray(measure, float)
    return m / weight(g, spec)


def _rho_graph(g: Graph, a: np.ndarray) -> sp.csr_matrix:
    i, j = g.edges[:, 0], g.edges[:, 1]
    w = 0.5 * (a[i] ** -0.5 + a[j] ** -0.5)
    return sp.csr_matrix((np.concatenate([w, w]), (np.concatenate([i, j]), np.concatenate([j, i]))),
                         shape=(g.num_vertices, g.num_vertices))


def rho_a_metric(g: Graph, spec: TimeChangeSpec, targets=None, sources=None) -> np.ndarray:
    """Intrinsic distance: shortest paths with edge weight ``(a(x)^-1/2 + a(y)^-1/2) / 2``.

    Distances are from the origin (or from the nearest of ``sources``),
    returned for ``targets`` or for every vertex.
    """
    W = _rho_graph(g, weight(g, spec))
    src = spec.origin_of(g) if sources is None else np.asarray(sources)
    d = csgraph.dijkstra(W, directed=False, indices=src, min_only=True)
    return d if targets is None else d[np.asarray(targets)]


def rho_shell_fit(g: Graph, spec: TimeChangeSpec, radii) -> FitReport:
    """Fit ``rho_a(shell R, shell 2R)`` against ``R`` (shells are graph-distance level sets)."""
    d = g.distances_from(spec.origin_of(g))
    vals = []
    for R in radii:
        inner = np.flatnonzero(d == R)
        outer = np.flatnonzero(d == 2 * R)
        if inner.size == 0 or outer.size == 0:
            raise ValueError(f"shells at {R} and {2 * R} must both be non-empty")
        vals.append(float(np.min(rho_a_metric(g, spec, targets=outer, sources=inner))))
    return loglog_fit(radii, vals)


def _block_levels(g: Graph) -> int:
    side = int(g.coords.max()) + 1
    k = int(round(math.log(side, 3)))
    if 3**k != side:
        raise ValueError("graph is not a 3^n block")
    return k


def _block_masks(g: Graph, k: int):
    """``(inside, shell)`` masks of the corner block of side ``3**k``."""
    top = g.coords.max(axis=1)
    return top <= 3**k - 1, top == 3**k - 1


def increment_exponents(values) -> list:
    """``log_3`` of the ratio of consecutive increments of a sweep."""
    inc = np.diff(np.asarray(values, float))
    return [math.log(b / a) / math.log(3) if a > 0 and b > 0 else float("nan")
            for a, b in zip(inc[:-1], inc[1:])]


def sweep_trend(values, margin: float, bias=None) -> SweepTrend:
    """Classify a sweep by the exponents of its consecutive increments.

    ``bias`` (one entry per exponent) is subtracted before judging.
    Geometric convergence needs the last exponent below ``-margin`` and
    every exponent to stay negative.  Non-convergence needs the last
    exponent to be ``>= 0``.  Anything else is inconclusive.
    """
    v = np.asarray(values, float)
    inc = np.diff(v)
    kap = increment_exponents(v)
    if bias is not None:
        kap = [k - b for k, b in zip(kap, bias)]
    label = "inconclusive"
    if kap and all(np.isfinite(kap)):
        if kap[-1] < -margin and all(k < 0 for k in kap):
            label = "shrinking"
        elif kap[-1] >= 0:
            label = "non-shrinking"
    return SweepTrend(values=v.tolist(), increments=inc.tolist(), kappas=kap, label=label)


def rho_truncation_sweep(g: Graph, spec: TimeChangeSpec, levels=None) -> SweepTrend:
    """``rho_a(0, outer shell of the side-3^k block)`` for each block level ``k``."""
    n = _block_levels(g)
    levels = list(range(1, n + 1)) if levels is None else list(levels)
    rho = rho_a_metric(g, spec)
    vals = [float(np.min(rho[_block_masks(g, k)[1]])) for k in levels]
    return sweep_trend(vals, EXACT_MARGIN)


def ma_profile(g: Graph, spec: TimeChangeSpec, rho_radii=()) -> dict:
    """Block totals of ``m_a`` for every level and ``m_a`` volumes of intrinsic balls."""
    n = _block_levels(g)
    ma = time_changed_measure(g, spec)
    totals = [float(ma[_block_masks(g, k)[0]].sum()) for k in range(n + 1)]
    rho = rho_a_metric(g, spec)
    vols = [float(ma[rho <= r].sum()) for r in rho_radii]
    return {"levels": list(range(n + 1)), "totals": totals,
            "trend": sweep_trend(totals[1:], EXACT_MARGIN),
            "rho_radii": [float(r) for r in rho_radii], "ball_volumes": vols}


def vgc_classify(g: Graph, spec: TimeChangeSpec, integrand_points: int = 32) -> VgcReport:
    """Decide the volume-growth criterion on the block sweep of ``g``.

    If ``rho_a(0, .)`` keeps growing across blocks the intrinsic balls never
    exhaust the space and the criterion holds.  If the intrinsic radius
    converges, the criterion holds exactly when the total ``m_a`` mass also
    converges: otherwise one ball of finite radius has infinite mass and the
    integrand vanishes beyond it.
    """
    rho = rho_truncation_sweep(g, spec)
    prof = ma_profile(g, spec)
    mass = prof["trend"]
    if rho.label == "non-shrinking":
        cls = "holds"
    elif rho.label == "shrinking" and mass.label == "shrinking":
        cls = "holds"
    elif rho.label == "shrinking" and mass.label == "non-shrinking":
        cls = "fails"
    else:
        cls = "inconclusive"
    ma = time_changed_measure(g, spec)
    dist = rho_a_metric(g, spec)
    order = np.argsort(dist)
    cum = np.cumsum(ma[order])
    rmax = float(dist.max())
    integrand = []
    for r in np.linspace(rmax / integrand_points, rmax, integrand_points):
        vol = cum[np.searchsorted(dist[order], r, side="right") - 1]
        if vol > math.e:
            integrand.append((float(r), float(r / math.log(vol))))
    return VgcReport(classification=cls, rho=rho, mass=mass, integrand=integrand)


def _sweep_label_to_completeness(label: str) -> str:
    return {"shrinking": "incomplete", "non-shrinking": "complete"}.get(label, "inconclusive")


def _green_sums(df: fm.DirichletForm, spec: TimeChangeSpec, gens) -> list:
    g = df.graph
    x0 = spec.origin_of(g)
    ainv = 1.0 / weight(g, spec)
    sums = []
    for n in gens:
        inside, shell = _block_masks(g, n)
        dom = np.flatnonzero(inside & ~shell)
        sums.append(float(fm.resolvent_solve(df, dom, 0.0, ainv)[x0]))
    return sums


def a_infty_green(df: fm.DirichletForm, spec: TimeChangeSpec, generations_sweep,
                  reference: fm.DirichletForm | None = None) -> dict:
    """``sum_x g_D(0, x) a(x)^-1 m(x)`` on the blocks ``D`` of side ``3**n`` (outer shell absorbing).

    A single solve per block: the sum is ``u(0)`` where ``K_DD u = M a^-1``.

    ``reference`` is a hole-free box of the same dimension.  Its sweep has the
    known increment exponent ``2 - p``; its deviation from that value at each
    step is the finite-size bias of the block geometry, and is subtracted
    from the carpet exponents before classifying.
    """
    g = df.graph
    if g.coords is None or g.coords.shape[1] < 3:
        raise ValueError("Green sweep needs dim >= 3: in two dimensions the walk is recurrent "
                         "and the truncated Green sums diverge for every p")
    n_max = _block_levels(g)
    gens = sorted(int(n) for n in generations_sweep)
    if not gens or gens[0] < 1 or gens[-1] > n_max:
        raise ValueError(f"generations must lie in 1..{n_max}")
    if len(set(gens)) != len(gens) or np.any(np.diff(gens) != 1):
        raise ValueError("generations must be consecutive")
    sums = _green_sums(df, spec, gens)
    out = {"p": spec.p, "generations": gens, "partial_sums": sums}
    bias = None
    if reference is not None:
        if _block_levels(reference.graph) < gens[-1]:
            raise ValueError("reference box is smaller than the sweep")
        ref = _green_sums(reference, TimeChangeSpec(spec.p, reference.graph.origin), gens)
        bias = [k - (2.0 - spec.p) for k in increment_exponents(ref)]
        out.update({"reference_sums": ref, "bias": bias})
    trend = sweep_trend(sums, SWEEP_MARGIN, bias=bias)
    out.update({"trend": trend, "classification": _sweep_label_to_completeness(trend.label)})
    return out


def _neighbour_sampler(df: fm.DirichletForm):
    W = (sp.diags(df.weighted_degree) - df.K).tocsr()
    W.eliminate_zeros()
    cum = np.cumsum(W.data)
    start = np.concatenate([[0.0], cum])[W.indptr[:-1]]
    return W, cum, start


def a_infty_mc(df: fm.DirichletForm, spec: TimeChangeSpec, walkers: int, shells, seed: int = 0,
               max_steps: int = 10_000_000) -> dict:
    """Monte Carlo of ``A`` at the first hitting of each graph-distance shell.

    The base walk holds an exponential time of rate ``sum_y c_xy / m(x)`` at
    ``x`` and jumps to ``y`` with probability proportional to ``c_xy``; ``A``
    accumulates the holding time divided by ``a(x)``.  One seeded generator
    drives all walkers in lockstep, so output depends only on the arguments.
    """
    if walkers < 1:
        raise ValueError("walkers must be >= 1")
    shells = sorted(int(s) for s in shells)
    g = df.graph
    x0 = spec.origin_of(g)
    dist = g.distances_from(x0)
    if shells[-1] > dist.max():
        raise ValueError("outermost shell lies beyond the graph")
    a = weight(g, spec)
    rate = df.weighted_degree / df.m
    W, cum, start = _neighbour_sampler(df)
    rng = np.random.default_rng(seed)
    pos = np.full(walkers, x0, dtype=np.int64)
    A = np.zeros(walkers)
    reached = np.zeros(walkers, dtype=np.int64)  # number of shells already hit
    hits = np.full((walkers, len(shells)), np.nan)
    shell_arr = np.array(shells)
    active = np.arange(walkers)
    steps = 0
    while active.size:
        steps += 1
        if steps > max_steps:
            raise RuntimeError("walkers failed to reach the outermost shell")
        x = pos[active]
        A[active] += rng.exponential(1.0 / rate[x]) / a[x]
        target = start[x] + rng.random(active.size) * df.weighted_degree[x]
        idx = np.searchsorted(cum, target, side="right")
        idx = np.minimum(idx, W.indptr[x + 1] - 1)
        y = W.indices[idx]
        pos[active] = y
        dy = dist[y]
        while True:
            k = reached[active]
            can = k < len(shells)
            newly = can & (dy >= shell_arr[np.minimum(k, len(shells) - 1)])
            if not newly.any():
                break
            w = active[newly]
            hits[w, reached[w]] = A[w]
            reached[w] += 1
        active = active[reached[active] < len(shells)]
    med = np.median(hits, axis=0)
    trend = sweep_trend(med, SWEEP_MARGIN)
    return {"p": spec.p, "shells": shells, "walkers": walkers, "seed": seed,
            "A_at_shell": hits, "median": med.tolist(),
            "quantiles": np.quantile(hits, [0.1, 0.25, 0.5, 0.75, 0.9], axis=0).tolist(),
            "trend": trend, "classification": _sweep_label_to_completeness(trend.label)}


def _ring_theta(df_base, df_a, sf, x0, R_in, r, seed, n_random):
    builders = [("linear", lambda: iq.cutoff_linear(df_base.graph, x0, R_in, r))]
    if r >= 10:
        builders.append(("resolvent", lambda: iq.cutoff_resolvent(df_base, sf, x0, R_in, r)))
    best = None
    for name, build in builders:
        phi = build()
        # Test functions come from the base form: smoothing under m_a would run at rates ~ a(x).
        fam = iq.test_family(df_base, phi, psi(sf, r) / 10, seed=seed, n_random=n_random)
        th = iq.csd_theta(df_a, phi, fam).theta_star
        if best is None or th < best[0]:
            best = (th, name, phi)
    return best


def scom_check(df: fm.DirichletForm, sf: ScalingFunction, spec: TimeChangeSpec, ring_ratio: float,
               rings: int, gamma: float | None = None, seed: int = 0, n_random: int = 10) -> ScomReport:
    """Ring criteria for stochastic completeness of the time-changed form.

    ``D_n`` is the graph ball of radius ``ring_ratio**n`` (``n = 1 .. rings+1``)
    and ``U_n = D_{n+1} - D_n``.  ``theta_n`` is the empirical cutoff-Sobolev
    constant on ``U_n`` in the measure ``m_a``, using the better of a linear
    and (when the ring is wide enough) a resolvent cutoff.

    A finite list of rings is always bounded, so each criterion is judged by
    its trend over the rings.  Criterion (a): the per-ring growth exponent
    ``log_R(theta_n / theta_{n-1})`` of the last step is at most 0.1 and
    ``theta_n m_a(U_n) / 4**n`` decreases.  Criterion (b): ``theta_n / n^2``
    does not increase (one ``c0`` serves every ring) and the increments of
    ``log m_a(U_n)`` shrink at least as fast as those of ``(log n)^2``; it
    needs three rings with ``n >= 2``.
    ``gamma`` adds the ``n^(2 gamma)`` schedule with volume scale
    ``n^min(1, 2 - 2 gamma)`` judged the same way.
    The criteria are sufficient only, so this never reports ``incomplete``.
    """
    if ring_ratio <= 1:
        raise ValueError("ring_ratio must exceed 1")
    g = df.graph
    x0 = spec.origin_of(g)
    dist = g.distances_from(x0)
    radii = [ring_ratio**n for n in range(1, rings + 2)]
    usable = [R for R in radii if R <= dist.max()]
    a = weight(g, spec)
    df_a = df.with_measure(df.m / a)
    ns, thetas, masses, kinds = [], [], [], []
    for n, (R_in, R_out) in enumerate(zip(usable[:-1], usable[1:]), start=1):
        r = R_out - R_in
        if r < 1:
            continue
        th, kind, _ = _ring_theta(df, df_a, sf, x0, R_in, r, seed + n, n_random)
        U = np.flatnonzero((dist > np.floor(R_in)) & (dist <= np.floor(R_out)))
        ns.append(n)
        thetas.append(float(th))
        masses.append(float(df_a.m[U].sum()))
        kinds.append(kind)
    evidence: dict = {"p": spec.p, "ring_ratio": ring_ratio, "radii": usable, "cutoff": kinds}
    d_f = math.log(3**g.coords.shape[1] - 1, 3) if g.coords is not None else float("nan")
    evidence["criterion_a_predicted_base"] = ring_ratio ** (d_f - sf.beta) / 4.0
    cls, ev = ring_criteria(ns, thetas, masses, ring_ratio, gamma=gamma)
    evidence.update(ev)
    return ScomReport(cls, evidence)


def ring_criteria(ns, thetas, masses, ring_ratio: float, gamma: float | None = None):
    """Judge the ring criteria on measured ``theta_n`` and ``m(U_n)``; see :func:`scom_check`."""
    evidence: dict = {"n": list(ns), "theta": list(thetas), "m_a_U": list(masses)}
    if len(ns) < 3:
        evidence["reason"] = "fewer than three usable rings"
        return "inconclusive", evidence
    ns_a = np.array(ns, float)
    th = np.array(thetas, float)
    ms = np.array(masses, float)
    ratio = th * ms / 4.0**ns_a
    evidence["criterion_a_sequence"] = ratio.tolist()
    growth = np.diff(np.log(th)) / math.log(ring_ratio) if np.all(th > 0) else np.array([np.nan])
    evidence["theta_growth_per_ring"] = growth.tolist()
    a_ok = bool(np.all(np.diff(ratio) < 0) and np.isfinite(growth[-1]) and growth[-1] <= SWEEP_MARGIN)
    evidence["criterion_a"] = a_ok

    late = ns_a >= 2  # the schedules compare against log n, which vanishes at n = 1

    def schedule_ok(theta_scale, volume_scale):
        if late.sum() < 3:
            return False
        q = (th / theta_scale)[late]
        theta_fits = bool(np.all(np.diff(q) <= 1e-9 * q[1:]))
        dv = np.diff(np.log(np.maximum(ms[late], 1e-300)))
        per = dv / np.diff(volume_scale[late])
        volume_fits = bool(np.all(dv <= 0) or np.all(np.diff(per) <= 1e-9 * np.abs(per[1:])))
        return theta_fits and volume_fits

    evidence["criterion_b_c0_squared"] = float(np.max(th / ns_a**2))
    evidence["criterion_b"] = b_ok = schedule_ok(ns_a**2, np.log(ns_a) ** 2)
    if gamma is not None:
        if not 0 < gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        expo = min(1.0, 2.0 - 2.0 * gamma)
        evidence.update({"gamma": gamma, "gamma_c0_squared": float(np.max(th / ns_a ** (2 * gamma))),
                         "criterion_gamma": schedule_ok(ns_a ** (2 * gamma), ns_a**expo)})
    ok = a_ok or b_ok or bool(evidence.get("criterion_gamma", False))
    return ("complete" if ok else "inconclusive"), evidence
