"""Graph Dirichlet forms: energy measure, Dirichlet spectrum, resolvents, heat semigroup.

The generator is ``Lf(x) = m(x)^-1 sum_y c_xy (f(y) - f(x))`` so that
``E(f, g) = -<Lf, g>_m``.  A *domain* is an array of vertex ids; functions
are implicitly zero off the domain (Dirichlet boundary).
"""
from __future__ import annotations

import logging

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.stats import poisson

from .carpet import Graph

log = logging.getLogger(__name__)

DENSE_LIMIT = 2000
DIRECT_SOLVE_LIMIT = 150_000
# Sparse LU fill-in grows quickly for 3D stencils; past this size AMG wins.
DIRECT_SOLVE_LIMIT_3D = 20_000
HEAT_DIAGONAL_MAX_STEPS = 1500


class SingularSystem(ValueError):
    """Linear system has no boundary to absorb the walk."""


def _as_domain(df: "DirichletForm", domain) -> np.ndarray:
    if domain is None:
        return np.arange(df.n)
    dom = np.unique(np.asarray(domain, dtype=np.int64))
    if dom.size == 0:
        raise ValueError("domain is empty")
    if dom[0] < 0 or dom[-1] >= df.n:
        raise IndexError("domain contains invalid vertex ids")
    return dom


class DirichletForm:
    """Conductance-weighted Dirichlet form on a :class:`Graph`."""

    def __init__(self, graph: Graph, conductances=None, measure=None):
        self.graph = graph
        self.n = graph.num_vertices
        self.edges = graph.edges
        ne = len(self.edges)
        self.c = np.ones(ne) if conductances is None else np.asarray(conductances, float)
        self.m = (graph.measure if measure is None else np.asarray(measure, float)).astype(float)
        if self.c.shape != (ne,) or np.any(self.c <= 0):
            raise ValueError("conductances must be positive, one per edge")
        if self.m.shape != (self.n,) or np.any(self.m <= 0):
            raise ValueError("measure must be positive, one per vertex")
        i, j = self.edges[:, 0], self.edges[:, 1]
        w = sp.csr_matrix(
            (np.concatenate([self.c, self.c]), (np.concatenate([i, j]), np.concatenate([j, i]))),
            shape=(self.n, self.n),
        )
        self.weighted_degree = np.asarray(w.sum(axis=1)).ravel()
        self.K = (sp.diags(self.weighted_degree) - w).tocsr()
        self.rates = self.weighted_degree / self.m

    def with_conductances(self, conductances) -> "DirichletForm":
        return DirichletForm(self.graph, conductances, self.m)

    def with_measure(self, measure) -> "DirichletForm":
        return DirichletForm(self.graph, self.c, measure)

    # energy --------------------------------------------------------------
    def gamma(self, u, v=None) -> np.ndarray:
        """Energy measure density ``Gamma(u, v)(x) = 1/2 sum_y c_xy du dv`` per vertex."""
        u = np.asarray(u, float)
        i, j = self.edges[:, 0], self.edges[:, 1]
        du = u[i] - u[j]
        dv = du if v is None else np.asarray(v, float)[i] - np.asarray(v, float)[j]
        half = 0.5 * self.c * du * dv
        out = np.bincount(i, weights=half, minlength=self.n)
        out += np.bincount(j, weights=half, minlength=self.n)
        return out

    def energy(self, u, v=None) -> float:
        return float(self.gamma(u, v).sum())

    def inner(self, f, g) -> float:
        return float(np.sum(np.asarray(f) * np.asarray(g) * self.m))

    def apply_generator(self, f) -> np.ndarray:
        return -(self.K @ np.asarray(f, float)) / self.m

    # restricted operators ------------------------------------------------
    def restricted(self, domain):
        dom = _as_domain(self, domain)
        K = self.K[dom][:, dom].tocsr()
        return dom, K, self.m[dom]

    def has_boundary(self, dom: np.ndarray) -> bool:
        return dom.size < self.n


def energy_and_measure(df: DirichletForm, f):
    """Total energy and per-vertex energy measure of ``f``."""
    gamma = df.gamma(f)
    return float(gamma.sum()), gamma


# linear algebra ------------------------------------------------------------
def _spd_solve(A: sp.csr_matrix, b: np.ndarray, rtol: float = 1e-10) -> np.ndarray:
    n = A.shape[0]
    dense_stencil = A.nnz > 5.5 * n
    if n <= (DIRECT_SOLVE_LIMIT_3D if dense_stencil else DIRECT_SOLVE_LIMIT):
        return spla.splu(A.tocsc()).solve(b)
    import pyamg

    ml = pyamg.smoothed_aggregation_solver(A.tocsr(), symmetry="symmetric", max_coarse=500)
    residuals: list = []
    x = ml.solve(b, tol=rtol, accel="cg", maxiter=500, residuals=residuals)
    rel = np.linalg.norm(b - A @ x) / max(np.linalg.norm(b), 1e-300)
    if rel > 10 * rtol:
        raise RuntimeError(f"AMG-CG did not converge: relative residual {rel:.2e}")
    log.debug("AMG-CG converged in %d iterations", len(residuals))
    return x


def _lanczos_smallest(K: sp.csr_matrix, m: np.ndarray, tol: float = 1e-10, maxiter: int = 300):
    """Smallest eigenpair of ``K x = lam M x`` by Lanczos on the inverse, full reorthogonalisation."""
    n = K.shape[0]
    lu = spla.splu(K.tocsc())
    sq = np.sqrt(m)

    def op(v):
        return sq * lu.solve(sq * v)

    rng = np.random.default_rng(12345)
    q = rng.standard_normal(n) + 1.0
    q /= np.linalg.norm(q)
    Q = [q]
    alpha, beta = [], []
    mu, y = None, None
    for k in range(min(maxiter, n)):
        w = op(Q[k])
        a = float(Q[k] @ w)
        w -= a * Q[k]
        if k > 0:
            w -= beta[-1] * Q[k - 1]
        basis = np.array(Q)
        w -= basis.T @ (basis @ w)
        w -= basis.T @ (basis @ w)
        b = float(np.linalg.norm(w))
        alpha.append(a)
        evals, evecs = sla.eigh_tridiagonal(np.array(alpha), np.array(beta)) if k > 0 else (
            np.array([a]), np.ones((1, 1)))
        mu, y = evals[-1], evecs[:, -1]
        if b * abs(y[-1]) <= tol * abs(mu) or b < 1e-14 or k + 1 == n:
            break
        beta.append(b)
        Q.append(w / b)
    vec = np.array(Q[: len(y)]).T @ y
    return 1.0 / mu, vec / sq


def lambda1_dirichlet(df: DirichletForm, domain, method: str = "auto") -> float:
    """Smallest Dirichlet eigenvalue of ``-L`` on ``domain``."""
    dom, K, m = df.restricted(domain)
    if not df.has_boundary(dom):
        raise SingularSystem("domain covers every vertex: no Dirichlet boundary")
    if method == "dense" or (method == "auto" and dom.size <= DENSE_LIMIT):
        return float(sla.eigh(K.toarray(), np.diag(m), eigvals_only=True, subset_by_index=[0, 0])[0])
    lam, _ = _lanczos_smallest(K, m)
    return float(lam)


def dirichlet_eigenvectors(df: DirichletForm, domain, k: int) -> np.ndarray:
    """Lowest ``k`` Dirichlet eigenvectors (as full-length fields, zero off domain)."""
    dom, K, m = df.restricted(domain)
    k = min(k, dom.size)
    if dom.size <= DENSE_LIMIT:
        _, vecs = sla.eigh(K.toarray(), np.diag(m), subset_by_index=[0, k - 1])
    else:
        _, vecs = spla.eigsh(K.tocsc(), k=k, M=sp.diags(m).tocsc(), sigma=0, which="LM")
    out = np.zeros((k, df.n))
    out[:, dom] = vecs.T
    return out


def resolvent_solve(df: DirichletForm, domain, lam: float, rhs) -> np.ndarray:
    """Solve ``(lam - L_D) u = rhs`` on ``domain`` with ``u = 0`` elsewhere."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    dom, K, m = df.restricted(domain)
    if lam == 0 and not df.has_boundary(dom):
        raise SingularSystem("lambda = 0 on a domain without boundary")
    rhs = np.asarray(rhs, float)
    u = np.zeros(df.n)
    b = m * rhs[dom]
    if not np.any(b):
        return u
    A = (K + sp.diags(lam * m)).tocsr()
    u[dom] = _spd_solve(A, b)
    return u


def green_column(df: DirichletForm, domain, x0: int) -> np.ndarray:
    """Killed Green function ``g_D(x0, .)``."""
    dom = _as_domain(df, domain)
    if x0 not in set(dom.tolist()):
        raise ValueError("x0 must lie in the domain")
    rhs = np.zeros(df.n)
    rhs[x0] = 1.0 / df.m[x0]
    return resolvent_solve(df, dom, 0.0, rhs)


def exit_time_solve(df: DirichletForm, domain) -> np.ndarray:
    """Mean exit time ``E^x tau_D`` from ``L_D u = -1``."""
    return resolvent_solve(df, domain, 0.0, np.ones(df.n))


# heat semigroup --------------------------------------------------------------
def _uniformized(K, m, rates, t, f, tol):
    """Poisson-weighted power series of ``I + L/lam``; ``f`` may hold one field per column."""
    lam = float(rates.max())
    fmax = float(np.max(np.abs(f))) if f.size else 0.0
    if t == 0 or fmax == 0 or lam == 0:
        return f.copy()
    mu = lam * t
    kmax = int(poisson.isf(tol / fmax, mu)) + 2
    kmin = int(poisson.ppf(tol / fmax * 1e-3, mu)) if mu > 50 else 0
    ks = np.arange(kmin, kmax + 1)
    weights = poisson.pmf(ks, mu)
    scale = (m * lam) if f.ndim == 1 else (m * lam)[:, None]
    v = f.copy()
    out = np.zeros_like(f)
    for k in range(kmax + 1):
        if k >= kmin:
            out += weights[k - kmin] * v
        v = v - (K @ v) / scale
    return out


def _lanczos_tridiag(S_apply, v0, k):
    """Plain three-term Lanczos; returns (alpha, beta) of length k and k-1."""
    q_prev = np.zeros_like(v0)
    q = v0 / np.linalg.norm(v0)
    alpha, beta = [], []
    b = 0.0
    for _ in range(k):
        w = S_apply(q) - b * q_prev
        a = float(q @ w)
        w -= a * q
        alpha.append(a)
        b = float(np.linalg.norm(w))
        if b < 1e-13:
            break
        beta.append(b)
        q_prev, q = q, w / b
    return np.array(alpha), np.array(beta[: len(alpha) - 1])


def _krylov_exp(K, m, t, f, tol, max_steps=400):
    """``exp(-t M^-1 K) f`` via Lanczos on the symmetrised operator, full reorthogonalisation."""
    sq = np.sqrt(m)
    v = sq * f
    nv = np.linalg.norm(v)
    if nv == 0:
        return np.zeros_like(f)
    n = len(v)
    kmax = min(max_steps, n)
    Q = np.zeros((kmax + 1, n))
    Q[0] = v / nv
    alpha, beta = [], []
    prev = None
    for k in range(kmax):
        w = (K @ (Q[k] / sq)) / sq
        a = float(Q[k] @ w)
        w -= Q[: k + 1].T @ (Q[: k + 1] @ w)
        w -= Q[: k + 1].T @ (Q[: k + 1] @ w)
        alpha.append(a)
        b = float(np.linalg.norm(w))
        done = b < 1e-12 or k + 1 == kmax
        if done or (k + 1) % 5 == 0:
            T = np.diag(alpha) + np.diag(beta, 1) + np.diag(beta, -1)
            coeff = sla.expm(-t * T)[:, 0] * nv
            if prev is not None:
                diff = np.max(np.abs(Q[: k + 1].T @ coeff - Q[: len(prev)].T @ prev) / sq)
                done = done or diff < tol * 0.1
            prev = coeff
        if done:
            return (Q[: k + 1].T @ coeff) / sq
        beta.append(b)
        Q[k + 1] = w / b
    raise RuntimeError("Krylov exponential did not converge")


def heat_apply(df: DirichletForm, domain, t: float, f, tol: float = 1e-9, method: str = "auto"):
    """``P_t f`` (``domain=None``) or the killed semigroup ``P^D_t f``.

    ``method`` is ``"uniformization"``, ``"krylov"`` or ``"auto"`` (Krylov
    once the Poisson series would need more than 20000 terms).
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if t < 0:
        raise ValueError("t must be >= 0")
    dom, K, m = df.restricted(domain)
    f = np.asarray(f, float)
    fd = f[dom]
    rates = df.rates[dom]
    if method == "auto":
        method = "krylov" if rates.max() * t > 20000 else "uniformization"
    if method == "uniformization":
        ud = _uniformized(K, m, rates, t, fd, tol)
    elif method == "krylov":
        ud = _krylov_exp(K, m, t, fd, tol)
    else:
        raise ValueError(f"unknown method {method!r}")
    out = np.zeros(df.n)
    out[dom] = ud
    return out


def heat_kernel_column(df: DirichletForm, x0: int, t: float, domain=None, tol: float = 1e-9):
    """``p_t(x0, .)`` (reflecting, or killed outside ``domain``)."""
    if t <= 0:
        raise ValueError("heat kernel needs t > 0")
    delta = np.zeros(df.n)
    delta[x0] = 1.0 / df.m[x0]
    return heat_apply(df, domain, t, delta, tol=tol)


def heat_diagonal(df: DirichletForm, x0: int, times, steps: int | None = None, domain=None):
    """On-diagonal kernel ``p_t(x0, x0)`` for many ``t`` by Gauss-Lanczos quadrature.

    Only the tridiagonal matrix is kept, so this runs on large graphs; the
    step count defaults to ``4 sqrt(max rate * max t) + 50`` (capped at
    ``HEAT_DIAGONAL_MAX_STEPS`` and the domain size).
    """
    times = np.asarray(times, float)
    dom, K, m = df.restricted(domain)
    pos = int(np.searchsorted(dom, x0))
    sq = np.sqrt(m)
    e = np.zeros(dom.size)
    e[pos] = 1.0
    if steps is None:
        # Long times only see the bottom of the spectrum, which converges first.
        steps = min(int(4 * np.sqrt(df.rates[dom].max() * times.max())) + 50, HEAT_DIAGONAL_MAX_STEPS)
    steps = min(steps, dom.size)
    alpha, beta = _lanczos_tridiag(lambda v: (K @ (v / sq)) / sq, e, steps)
    try:
        evals, evecs = sla.eigh_tridiagonal(alpha, beta)
    except np.linalg.LinAlgError:
        # MRRR can fail on the clustered ghost eigenvalues of long runs; QR iteration does not.
        evals, evecs = sla.eigh_tridiagonal(alpha, beta, lapack_driver="stev")
    w0 = evecs[0] ** 2
    vals = np.exp(-np.outer(times, evals)) @ w0
    return vals / df.m[x0]
