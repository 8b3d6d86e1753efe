"""Variable-interaction graphs built from an individual's training segment."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

STATIC_METRICS = ("EUC", "KNN", "DTW", "CORR")
METRICS = STATIC_METRICS + ("RAND", "LEARNED", "PLANTED")


class UndefinedCorrelationError(ValueError):
    """Correlation is undefined because an input is constant."""


@dataclass
class Graph:
    """Weighted adjacency over ``V`` variables plus construction metadata."""

    weights: np.ndarray
    metric: str
    gdt: float = 1.0
    seed: int | None = None
    node_names: list[str] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2 or self.weights.shape[0] != self.weights.shape[1]:
            raise ValueError("graph weights must be a square matrix")
        if np.any(self.weights < 0):
            raise ValueError("graph weights must be non-negative")
        if self.node_names is None:
            self.node_names = [f"var_{j + 1}" for j in range(self.V)]

    @property
    def V(self) -> int:
        return self.weights.shape[0]

    def n_edges(self) -> int:
        """Undirected edges: pairs ``i < j`` with a nonzero weight in either direction."""
        w = self.weights
        iu = np.triu_indices(self.V, k=1)
        return int(np.count_nonzero((w[iu] > 0) | (w.T[iu] > 0)))

    def density(self) -> float:
        pairs = self.V * (self.V - 1) // 2
        return self.n_edges() / pairs if pairs else 0.0

    def is_symmetric(self) -> bool:
        return bool(np.array_equal(self.weights, self.weights.T))


def edge_budget(V: int, gdt: float) -> int:
    return int(round(gdt * V * (V - 1) / 2))


def _check_gdt(gdt: float) -> None:
    if not 0.0 < gdt <= 1.0:
        raise ValueError(f"gdt must lie in (0, 1], got {gdt}")


# ------------------------------------------------------------------- distances
def euclidean_distances(values: np.ndarray) -> np.ndarray:
    """Pairwise Euclidean distances between the rows of a ``V x T`` array."""
    # direct differences: exact zeros for identical rows and exact symmetry
    diff = values[:, None, :] - values[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=2))


def gaussian_affinity(dist: np.ndarray) -> np.ndarray:
    """``exp(-d^2 / sigma^2)`` with sigma the std of the off-diagonal distances."""
    V = dist.shape[0]
    off = dist[~np.eye(V, dtype=bool)]
    sigma = float(np.std(off)) if off.size else 0.0
    if sigma == 0.0:
        # all pairs equidistant: every pair is equally similar
        sigma = float(np.mean(off)) if off.size and np.mean(off) > 0 else 1.0
    w = np.exp(-(dist * dist) / (sigma * sigma))
    np.fill_diagonal(w, 0.0)
    return w


def dtw_distance(x: np.ndarray, y: np.ndarray) -> float:
    """DTW with absolute-difference cost and unit steps (down, right, diagonal)."""
    return float(dtw_distances_batch(np.asarray(x, float)[None], np.asarray(y, float)[None])[0])


def dtw_distances_batch(xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """DTW for many pairs at once; ``xs`` is ``P x n`` and ``ys`` is ``P x m``.

    The recursion is the textbook one; it runs over the ``n x m`` grid while
    each cell update is vectorised across the ``P`` pairs.
    """
    xs = np.atleast_2d(xs)
    ys = np.atleast_2d(ys)
    P, n = xs.shape
    m = ys.shape[1]
    cost = np.abs(xs[:, :, None] - ys[:, None, :])  # P x n x m
    acc = np.full((n + 1, m + 1, P), np.inf)
    acc[0, 0] = 0.0
    cost = np.moveaxis(cost, 0, -1)
    for i in range(1, n + 1):
        prev, row = acc[i - 1], acc[i]
        c = cost[i - 1]
        for j in range(1, m + 1):
            best = np.minimum(np.minimum(prev[j], row[j - 1]), prev[j - 1])
            row[j] = best + c[j - 1]
    return acc[n, m].copy()


def dtw_distance_matrix(values: np.ndarray) -> np.ndarray:
    V = values.shape[0]
    iu = np.triu_indices(V, k=1)
    d = np.zeros((V, V))
    if len(iu[0]):
        d[iu] = dtw_distances_batch(values[iu[0]], values[iu[1]])
    return d + d.T


# ---------------------------------------------------------------- constructors
def _values(series) -> np.ndarray:
    values = getattr(series, "values", series)
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError("expected a V x T array")
    return values


def _names(series, V: int) -> list[str]:
    names = getattr(series, "variable_names", None)
    return list(names) if names is not None else [f"var_{j + 1}" for j in range(V)]


def build_euclidean(series, gdt: float = 1.0) -> Graph:
    values = _values(series)
    if values.shape[0] < 2:
        raise ValueError("need at least 2 variables")
    w = gaussian_affinity(euclidean_distances(values))
    return sparsify(Graph(w, "EUC", 1.0, node_names=_names(series, values.shape[0])), gdt)


def knn_default_k(V: int, gdt: float) -> int:
    return max(1, int(round(gdt * (V - 1))))


def build_knn(series, k: int | None = None, gdt: float = 1.0) -> Graph:
    """Union-symmetrized k-nearest-neighbour graph carrying Euclidean affinities.

    Neighbour ties are broken by node index.  The result is then sparsified
    to ``gdt``; kNN already caps per-node degree, the global budget trims
    what the union added.
    """
    values = _values(series)
    V = values.shape[0]
    if V < 2:
        raise ValueError("need at least 2 variables")
    if k is None:
        k = knn_default_k(V, gdt)
    if not 1 <= k < V:
        raise ValueError(f"k must satisfy 1 <= k < V={V}, got {k}")
    dist = euclidean_distances(values)
    affinity = gaussian_affinity(dist)
    mask = np.zeros((V, V), dtype=bool)
    for i in range(V):
        order = [j for j in np.argsort(dist[i], kind="stable") if j != i]
        mask[i, order[:k]] = True
    mask |= mask.T
    g = Graph(np.where(mask, affinity, 0.0), "KNN", 1.0, node_names=_names(series, V), meta={"k": k})
    out = sparsify(g, gdt)
    out.meta["k"] = k
    return out


def build_dtw(series, gdt: float = 1.0) -> Graph:
    values = _values(series)
    if values.shape[1] < 2:
        raise ValueError("DTW needs at least 2 timepoints")
    w = gaussian_affinity(dtw_distance_matrix(values))
    return sparsify(Graph(w, "DTW", 1.0, node_names=_names(series, values.shape[0])), gdt)


def build_correlation(series, gdt: float = 1.0) -> Graph:
    """Absolute zero-lag Pearson correlation between variables."""
    values = _values(series)
    names = _names(series, values.shape[0])
    std = values.std(axis=1)
    flat = np.flatnonzero(std == 0)
    if flat.size:
        raise ValueError(f"variable {names[flat[0]]!r} has zero variance on the training segment")
    w = np.abs(np.corrcoef(values))
    w = (w + w.T) / 2.0  # corrcoef is symmetric only up to rounding
    np.fill_diagonal(w, 0.0)
    return sparsify(Graph(np.clip(w, 0.0, 1.0), "CORR", 1.0, node_names=names), gdt)


def build_random(V: int, gdt: float, seed: int, node_names: Sequence[str] | None = None) -> Graph:
    """Uniform random edge set of exactly ``round(gdt * V(V-1)/2)`` edges, weights in (0, 1]."""
    _check_gdt(gdt)
    rng = np.random.default_rng(seed)
    iu = np.triu_indices(V, k=1)
    n = edge_budget(V, gdt)
    chosen = rng.choice(len(iu[0]), size=n, replace=False)
    w = np.zeros((V, V))
    # 1 - U[0, 1) lies in (0, 1]
    w[iu[0][chosen], iu[1][chosen]] = 1.0 - rng.random(n)
    w = w + w.T
    return Graph(w, "RAND", gdt, seed=seed, node_names=list(node_names) if node_names else None)


def build_graph(metric: str, series, gdt: float, seed: int = 0, k: int | None = None) -> Graph:
    metric = metric.upper()
    if metric == "EUC":
        return build_euclidean(series, gdt)
    if metric == "KNN":
        return build_knn(series, k, gdt)
    if metric == "DTW":
        return build_dtw(series, gdt)
    if metric == "CORR":
        return build_correlation(series, gdt)
    if metric == "RAND":
        values = _values(series)
        return build_random(values.shape[0], gdt, seed, _names(series, values.shape[0]))
    raise ValueError(f"unknown metric {metric!r}")


def sparsify(graph: Graph, gdt: float) -> Graph:
    """Keep the ``round(gdt * V(V-1)/2)`` heaviest undirected edges.

    Ties go to the lexicographically smaller ``(i, j)``.  ``gdt == 1`` is the
    identity.
    """
    _check_gdt(gdt)
    if gdt == 1.0:
        return Graph(graph.weights.copy(), graph.metric, 1.0, graph.seed, list(graph.node_names), dict(graph.meta))
    V = graph.V
    sym = np.maximum(graph.weights, graph.weights.T)
    iu = np.triu_indices(V, k=1)
    # lexsort: last key is primary; triu order is already (i, j) lexicographic
    order = np.lexsort((np.arange(len(iu[0])), -sym[iu]))
    keep = order[:edge_budget(V, gdt)]
    mask = np.zeros((V, V), dtype=bool)
    mask[iu[0][keep], iu[1][keep]] = True
    mask |= mask.T
    return Graph(np.where(mask, graph.weights, 0.0), graph.metric, gdt, graph.seed,
                 list(graph.node_names), dict(graph.meta))


# --------------------------------------------------------------- normalization
@dataclass
class NormalizedGraph:
    adjacency: np.ndarray  # D^-1/2 (W + I) D^-1/2
    scaled_laplacian: np.ndarray | None = None
    chebyshev: list[np.ndarray] | None = None
    lambda_max: float | None = None


def gcn_normalize(weights: np.ndarray) -> np.ndarray:
    a = weights + np.eye(weights.shape[0])
    d = a.sum(axis=1)
    inv = 1.0 / np.sqrt(d)
    return a * inv[:, None] * inv[None, :]


def power_iteration(matrix: np.ndarray, iters: int = 100, tol: float = 1e-8) -> float:
    """Largest-magnitude eigenvalue estimate of a symmetric matrix."""
    n = matrix.shape[0]
    v = np.ones(n) + np.arange(n) / max(n, 1)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = matrix @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v_next = w / norm
        new = float(v_next @ matrix @ v_next)
        if abs(new - lam) < tol:
            return new
        lam, v = new, v_next
    return lam


def normalize(graph: Graph | np.ndarray, chebyshev_order: int | None = None) -> NormalizedGraph:
    """GCN adjacency and, on request, Chebyshev supports of the scaled Laplacian."""
    w = graph.weights if isinstance(graph, Graph) else np.asarray(graph, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    out = NormalizedGraph(gcn_normalize(w))
    if chebyshev_order is None:
        return out
    if chebyshev_order < 1:
        raise ValueError("Chebyshev order must be >= 1")
    V = w.shape[0]
    sym = (w + w.T) / 2.0
    d = sym.sum(axis=1)
    inv = np.where(d > 0, 1.0 / np.sqrt(np.where(d > 0, d, 1.0)), 0.0)
    lap = np.eye(V) - sym * inv[:, None] * inv[None, :]
    lam = power_iteration(lap)
    if lam <= 0:
        lam = 2.0
    scaled = 2.0 * lap / lam - np.eye(V)
    terms = [np.eye(V)]
    if chebyshev_order > 1:
        terms.append(scaled)
    for _ in range(2, chebyshev_order):
        terms.append(2.0 * scaled @ terms[-1] - terms[-2])
    out.scaled_laplacian = scaled
    out.chebyshev = terms
    out.lambda_max = lam
    return out


# ------------------------------------------------------------------ comparison
def graph_correlation(g1: Graph | np.ndarray, g2: Graph | np.ndarray) -> float:
    """Pearson correlation of the flattened off-diagonal weights."""
    a = g1.weights if isinstance(g1, Graph) else np.asarray(g1, float)
    b = g2.weights if isinstance(g2, Graph) else np.asarray(g2, float)
    if a.shape != b.shape:
        raise ValueError("graphs must have the same number of nodes")
    off = ~np.eye(a.shape[0], dtype=bool)
    x, y = a[off], b[off]
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise UndefinedCorrelationError("correlation undefined for a constant graph")
    x = x - x.mean()
    y = y - y.mean()
    return float(x @ y / math.sqrt((x @ x) * (y @ y)))


# ------------------------------------------------------------------------- I/O
def save_graph(graph: Graph, path) -> None:
    """V x V matrix CSV (header = node names) plus a JSON metadata sidecar."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(graph.node_names)
        for row in graph.weights:
            w.writerow([format(v, ".17g") for v in row])
    meta = {"metric": graph.metric, "gdt": graph.gdt, "seed": graph.seed,
            "node_names": graph.node_names, "meta": graph.meta}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, default=_json_default))


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def load_graph(path) -> Graph:
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty graph file")
    names, body = rows[0], rows[1:]
    if len(body) != len(names) or any(len(r) != len(names) for r in body):
        raise ValueError(f"{path}: expected a {len(names)} x {len(names)} matrix")
    weights = np.array([[float(c) for c in r] for r in body])
    side = path.with_suffix(".json")
    meta = json.loads(side.read_text()) if side.exists() else {}
    return Graph(weights, meta.get("metric", "EUC"), meta.get("gdt", 1.0), meta.get("seed"),
                 names, meta.get("meta", {}))
