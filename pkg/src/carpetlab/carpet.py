"""Unit-cell graphs of the pre-Sierpinski carpet and their ball geometry."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse import csgraph

DEFAULT_CELL_BUDGET = 2_000_000


class BudgetExceeded(ValueError):
    """Requested graph would exceed the configured cell budget."""


@dataclass(frozen=True)
class CarpetSpec:
    dim: int
    generations: int

    def __post_init__(self):
        if self.dim < 2:
            raise ValueError("carpet dimension must be >= 2")
        if self.generations < 0:
            raise ValueError("generations must be >= 0")

    @property
    def m_d(self) -> int:
        return 3**self.dim - 1

    @property
    def cell_count(self) -> int:
        return self.m_d**self.generations

    @property
    def side(self) -> int:
        return 3**self.generations

    @property
    def d_f(self) -> float:
        return math.log(self.m_d) / math.log(3)


@dataclass
class Graph:
    """Undirected graph with vertex measure.

    ``edges`` is an ``(E, 2)`` integer array with ``i < j`` in each row;
    ``coords`` is optional geometry used by the carpet helpers.
    """

    num_vertices: int
    edges: np.ndarray
    measure: np.ndarray
    coords: np.ndarray | None = None
    origin: int = 0
    _adj: sp.csr_matrix | None = field(default=None, repr=False)

    @property
    def adjacency(self) -> sp.csr_matrix:
        if self._adj is None:
            n = self.num_vertices
            i, j = self.edges[:, 0], self.edges[:, 1]
            data = np.ones(2 * len(i))
            self._adj = sp.csr_matrix(
                (data, (np.concatenate([i, j]), np.concatenate([j, i]))), shape=(n, n)
            )
        return self._adj

    def neighbors(self, v: int) -> np.ndarray:
        a = self.adjacency
        return a.indices[a.indptr[v] : a.indptr[v + 1]]

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.adjacency.indptr)

    def distances_from(self, sources, limit: float = np.inf, metric: str = "graph") -> np.ndarray:
        """Distance from a vertex (or the nearest of several).

        ``metric="graph"`` is unweighted path length; ``metric="sup"`` is the
        sup-norm distance between cell coordinates.
        """
        if metric == "sup":
            src = np.atleast_1d(sources)
            d = np.full(self.num_vertices, np.inf)
            for s in src:
                d = np.minimum(d, np.max(np.abs(self.coords - self.coords[int(s)]), axis=1))
            d = d.astype(float)
            d[d > limit] = np.inf
            return d
        if metric != "graph":
            raise ValueError(f"unknown metric {metric!r}")
        return csgraph.dijkstra(
            self.adjacency, directed=False, indices=sources, unweighted=True,
            limit=limit, min_only=True,
        )

    def is_connected(self) -> bool:
        if self.num_vertices <= 1:
            return True
        ncomp, _ = csgraph.connected_components(self.adjacency, directed=False)
        return ncomp == 1

    def to_csv(self, path) -> None:
        """Write one row per vertex: id, coordinates, measure, neighbour ids."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            ndim = 0 if self.coords is None else self.coords.shape[1]
            w.writerow(["id"] + [f"x{k}" for k in range(ndim)] + ["measure", "neighbors"])
            for v in range(self.num_vertices):
                c = [] if self.coords is None else [int(x) for x in self.coords[v]]
                nb = " ".join(str(int(u)) for u in self.neighbors(v))
                w.writerow([v] + c + [float(self.measure[v]), nb])


@dataclass
class CarpetGraph(Graph):
    spec: CarpetSpec | None = None

    @property
    def cells(self) -> np.ndarray:
        return self.coords

    def vertex_at(self, coords) -> int:
        hits = np.flatnonzero(np.all(self.coords == np.asarray(coords), axis=1))
        if len(hits) == 0:
            raise KeyError(f"no cell at {tuple(coords)}")
        return int(hits[0])


@dataclass
class VdReport:
    c_d_estimate: float
    samples: int
    radii: list


def _removed_mask(coords: np.ndarray, generations: int) -> np.ndarray:
    removed = np.zeros(coords.shape[0], dtype=bool)
    c = coords.copy()
    for _ in range(generations):
        removed |= np.all(c % 3 == 1, axis=1)
        c //= 3
    return removed


def cell_in_carpet(dim: int, coords, generations: int) -> bool:
    """True iff no base-3 digit level has every coordinate digit equal to 1."""
    coords = np.asarray(coords, dtype=np.int64)
    if coords.shape != (dim,):
        raise ValueError(f"expected {dim} coordinates, got {coords.shape}")
    if np.any(coords < 0) or np.any(coords >= 3**generations):
        raise ValueError(f"coordinates {tuple(coords)} outside [0, 3^{generations})")
    return not bool(_removed_mask(coords[None, :], generations)[0])


def _face_edges(index: np.ndarray) -> np.ndarray:
    """Face-adjacent pairs of an index grid where -1 marks absent cells."""
    out = []
    for axis in range(index.ndim):
        lo = [slice(None)] * index.ndim
        hi = [slice(None)] * index.ndim
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        a, b = index[tuple(lo)].ravel(), index[tuple(hi)].ravel()
        keep = (a >= 0) & (b >= 0)
        out.append(np.stack([a[keep], b[keep]], axis=1))
    e = np.concatenate(out) if out else np.zeros((0, 2), dtype=np.int64)
    return np.sort(e, axis=1)


def _graph_from_mask(present: np.ndarray, cls=Graph, **kw) -> Graph:
    index = -np.ones(present.shape, dtype=np.int64)
    coords = np.argwhere(present)
    index[tuple(coords.T)] = np.arange(len(coords))
    edges = _face_edges(index) if len(coords) > 1 else np.zeros((0, 2), dtype=np.int64)
    origin = int(index[(0,) * present.ndim]) if present[(0,) * present.ndim] else 0
    return cls(
        num_vertices=len(coords), edges=edges, measure=np.ones(len(coords)),
        coords=coords.astype(np.int64), origin=origin, **kw,
    )


def build_precarpet(spec: CarpetSpec, budget: int = DEFAULT_CELL_BUDGET) -> CarpetGraph:
    """Face-adjacency graph on the ``M_d**n`` unit cells of the generation-n pre-carpet."""
    if spec.cell_count > budget:
        raise BudgetExceeded(
            f"d={spec.dim}, n={spec.generations} needs {spec.cell_count} cells (budget {budget})"
        )
    side = spec.side
    grid = np.indices((side,) * spec.dim).reshape(spec.dim, -1).T
    present = ~_removed_mask(grid, spec.generations)
    g = _graph_from_mask(present.reshape((side,) * spec.dim), cls=CarpetGraph, spec=spec)
    assert g.num_vertices == spec.cell_count
    assert g.is_connected(), "pre-carpet graph must be connected"
    return g


def build_lattice(dim: int, side: int) -> Graph:
    """Full ``side**dim`` box of unit cells with no holes (Euclidean reference graph)."""
    return _graph_from_mask(np.ones((side,) * dim, dtype=bool))


def path_graph(n: int) -> Graph:
    edges = np.stack([np.arange(n - 1), np.arange(1, n)], axis=1)
    return Graph(num_vertices=n, edges=edges, measure=np.ones(n),
                 coords=np.arange(n)[:, None])


def star_graph(k: int) -> Graph:
    """Vertex 0 joined to ``k`` leaves."""
    edges = np.stack([np.zeros(k, dtype=np.int64), np.arange(1, k + 1)], axis=1)
    return Graph(num_vertices=k + 1, edges=edges, measure=np.ones(k + 1))


def ball(g: Graph, center: int, r: float, metric: str = "graph"):
    """Vertices within distance ``floor(r)`` of ``center`` and their total measure."""
    if not 0 <= center < g.num_vertices:
        raise IndexError(f"vertex {center} out of range")
    radius = math.floor(r)
    d = g.distances_from(center, limit=radius + 0.5, metric=metric)
    verts = np.flatnonzero(d <= radius)
    return verts, float(g.measure[verts].sum())


def volume_profile(g: Graph, center: int, radii, metric: str = "graph") -> np.ndarray:
    """``V(center, r)`` for every radius in ``radii`` from a single distance sweep."""
    radii = np.asarray(radii, dtype=float)
    d = g.distances_from(center, limit=np.floor(radii.max()) + 0.5, metric=metric)
    finite = np.isfinite(d)
    order = np.argsort(d[finite])
    dist_sorted = d[finite][order]
    cum = np.cumsum(g.measure[finite][order])
    idx = np.searchsorted(dist_sorted, np.floor(radii), side="right")
    return np.where(idx > 0, cum[np.maximum(idx - 1, 0)], 0.0)


def vd_scan(g: Graph, sample_count: int, radii, seed: int = 0) -> VdReport:
    """Largest observed ``V(x, 2r) / V(x, r)`` over random centres and the given radii."""
    if sample_count <= 0 or len(radii) == 0:
        raise ValueError("vd_scan needs at least one sample and one radius")
    rng = np.random.default_rng(seed)
    n = g.num_vertices
    if sample_count >= n:
        centers = np.arange(n)
    else:
        centers = rng.choice(n, size=sample_count, replace=False)
    radii = list(radii)
    both = np.concatenate([np.asarray(radii, float), 2 * np.asarray(radii, float)])
    worst = 1.0
    for x in centers:
        v = volume_profile(g, int(x), both)
        k = len(radii)
        worst = max(worst, float(np.max(v[k:] / v[:k])))
    return VdReport(c_d_estimate=worst, samples=len(centers), radii=radii)


def max_metric_distortion(g: Graph, sources) -> float:
    """Empirical max of graph distance over sup-norm distance from the given sources."""
    worst = 1.0
    for s in sources:
        d = g.distances_from(int(s))
        sup = np.max(np.abs(g.coords - g.coords[int(s)]), axis=1)
        mask = sup > 0
        worst = max(worst, float(np.max(d[mask] / sup[mask])))
    return worst


def outer_shell(g: Graph) -> np.ndarray:
    """Cells touching the far faces of the bounding box (max coordinate equal to side-1)."""
    top = g.coords.max()
    return np.flatnonzero(np.any(g.coords == top, axis=1))
