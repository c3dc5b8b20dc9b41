"""Clustering evaluation: Hungarian-matched accuracy, NMI, ARI, k-means and friends."""

from __future__ import annotations

import itertools
import json
import warnings
from dataclasses import asdict, dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .dataio import STREAM_KMEANS, stream


# ---------------------------------------------------------------- assignment

def _hungarian_duals(cost: np.ndarray):
    """O(n^3) shortest augmenting path solver; returns (row->col, u, v)."""
    n = cost.shape[0]
    INF = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)  # p[j]: row matched to column j (1-based, 0 = free)
    way = np.zeros(n + 1, dtype=np.int64)
    a = np.zeros((n + 1, n + 1))
    a[1:, 1:] = cost
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, INF)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            cur = a[i0, 1:] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], INF)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    assign = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        assign[p[j] - 1] = j - 1
    return assign, u[1:], v[1:]


def _has_perfect_matching(adj: List[List[int]], rows: Sequence[int], cols_free: set) -> bool:
    match: dict = {}

    def augment(r, seen):
        for c in adj[r]:
            if c in cols_free and c not in seen:
                seen.add(c)
                if c not in match or augment(match[c], seen):
                    match[c] = r
                    return True
        return False

    return all(augment(r, set()) for r in rows)


def hungarian_match(cost) -> np.ndarray:
    """Minimum-cost assignment for a square matrix; ``perm[i]`` is row i's column.

    Among optimal assignments the lexicographically smallest is returned, i.e.
    ties go to the lowest column index, row by row.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"cost matrix must be square, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix must be finite")
    n = cost.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    assign, u, v = _hungarian_duals(cost)
    # With optimal duals, the optimal assignments are exactly the perfect
    # matchings on zero-reduced-cost edges.
    scale = max(1.0, float(np.abs(cost).max()))
    tight = (cost - u[:, None] - v[None, :]) <= 1e-9 * scale
    adj = [list(np.flatnonzero(tight[i])) for i in range(n)]
    if sum(len(a) for a in adj) == n:
        return assign
    perm = np.empty(n, dtype=np.int64)
    free = set(range(n))
    for i in range(n):
        for j in adj[i]:
            if j in free:
                free.discard(j)
                if _has_perfect_matching(adj, range(i + 1, n), free):
                    perm[i] = j
                    break
                free.add(j)
    return perm


def brute_force_assignment(cost) -> np.ndarray:
    """Exhaustive search in lexicographic permutation order; first strict optimum wins."""
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    best, best_perm = np.inf, None
    rows = np.arange(n)
    for perm in itertools.permutations(range(n)):
        c = cost[rows, list(perm)].sum()
        if c < best - 1e-12 * max(1.0, abs(best) if np.isfinite(best) else 1.0):
            best, best_perm = c, perm
    return np.array(best_perm, dtype=np.int64)


# ---------------------------------------------------------------- partitions

def _labels(x) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 1:
        raise ValueError("a partition is a 1-D label vector")
    return x.astype(np.int64)


def contingency(u, v) -> np.ndarray:
    """Counts table between two label vectors (rows: distinct u, cols: distinct v)."""
    u, v = _labels(u), _labels(v)
    if len(u) != len(v):
        raise ValueError(f"length mismatch: {len(u)} vs {len(v)}")
    _, ui = np.unique(u, return_inverse=True)
    _, vi = np.unique(v, return_inverse=True)
    table = np.zeros((ui.max() + 1, vi.max() + 1), dtype=np.int64)
    np.add.at(table, (ui, vi), 1)
    return table


@dataclass
class MetricReport:
    acc: float
    nmi: float
    ari: float
    matched_confusion: np.ndarray
    permutation: np.ndarray
    k: int

    def to_json(self) -> str:
        d = asdict(self)
        d["matched_confusion"] = self.matched_confusion.tolist()
        d["permutation"] = self.permutation.tolist()
        return json.dumps(d, indent=2)

    @classmethod
    def from_json(cls, s: str) -> "MetricReport":
        d = json.loads(s)
        d["matched_confusion"] = np.array(d["matched_confusion"], dtype=np.int64)
        d["permutation"] = np.array(d["permutation"], dtype=np.int64)
        return cls(**d)


def clustering_accuracy(y_true, y_pred) -> Tuple[float, np.ndarray, np.ndarray]:
    """Best accuracy over one-to-one maps from predicted clusters to classes.

    Returns (acc, permutation, matched_confusion) where ``permutation[c]`` is
    the class assigned to predicted cluster c and column j of the matched
    confusion matrix holds the cluster mapped to class j. Both sides are padded
    with empty clusters to a common size k.
    """
    y_true, y_pred = _labels(y_true), _labels(y_pred)
    if len(y_true) != len(y_pred):
        raise ValueError(f"length mismatch: {len(y_true)} vs {len(y_pred)}")
    if y_true.min(initial=0) < 0 or y_pred.min(initial=0) < 0:
        raise ValueError("labels must be non-negative")
    k = int(max(y_true.max(initial=-1), y_pred.max(initial=-1))) + 1
    conf = np.zeros((k, k), dtype=np.int64)  # rows: true class, cols: predicted cluster
    np.add.at(conf, (y_true, y_pred), 1)
    # Rows of the cost matrix are predicted clusters.
    perm = hungarian_match(-conf.T.astype(np.float64))
    matched = np.zeros_like(conf)
    matched[:, perm] = conf
    acc = float(np.trace(matched)) / len(y_true)
    return acc, perm, matched


def mutual_information(u, v) -> float:
    table = contingency(u, v).astype(np.float64)
    n = table.sum()
    a = table.sum(1, keepdims=True)
    b = table.sum(0, keepdims=True)
    nz = table > 0
    return float((table[nz] / n * np.log(n * table[nz] / (a @ b)[nz])).sum())


def nmi(u, v) -> float:
    """MI(U,V) / sqrt(MI(U,U) MI(V,V)); natural log; 0/0 -> 0 with a warning."""
    denom = np.sqrt(mutual_information(u, u) * mutual_information(v, v))
    if denom == 0:
        warnings.warn("NMI undefined for a single-cluster partition; returning 0", RuntimeWarning, stacklevel=2)
        return 0.0
    return float(min(1.0, mutual_information(u, v) / denom))


def _comb2(x):
    x = np.asarray(x, dtype=np.float64)
    return x * (x - 1) / 2


def ari(u, v) -> float:
    """Adjusted Rand index from the contingency table."""
    table = contingency(u, v)
    n = table.sum()
    if n < 2:
        raise ValueError("ARI needs at least 2 points")
    sum_ij = _comb2(table).sum()
    sum_a = _comb2(table.sum(1)).sum()
    sum_b = _comb2(table.sum(0)).sum()
    expected = sum_a * sum_b / _comb2(n)
    max_index = (sum_a + sum_b) / 2
    if max_index == expected:
        same = table.shape[0] == table.shape[1] and np.count_nonzero(table) == table.shape[0]
        warnings.warn("ARI denominator is zero (trivial partitions)", RuntimeWarning, stacklevel=2)
        return 1.0 if same else 0.0
    return float((sum_ij - expected) / (max_index - expected))


def rand_pairs(u, v) -> Tuple[int, int, int]:
    """Brute-force pair counts: (agree-same, agree-different, total pairs)."""
    u, v = _labels(u), _labels(v)
    same = diff = total = 0
    for i, j in itertools.combinations(range(len(u)), 2):
        su, sv = u[i] == u[j], v[i] == v[j]
        same += su and sv
        diff += (not su) and (not sv)
        total += 1
    return same, diff, total


# ---------------------------------------------------------------- k-means

@dataclass
class KMeansResult:
    labels: np.ndarray
    centers: np.ndarray
    inertia: float
    n_iter: int
    history: List[float]
    seed: int


def _sq_dists(x, centers):
    d = (x * x).sum(1)[:, None] - 2 * x @ centers.T + (centers * centers).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeans_pp(x, k, rng):
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = _sq_dists(x, centers[:1]).ravel()
    for c in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers[c] = x[idx]
        closest = np.minimum(closest, _sq_dists(x, centers[c:c + 1]).ravel())
    return centers


def lloyd(x, centers, max_iter=300) -> Tuple[np.ndarray, np.ndarray, float, int, List[float]]:
    """Lloyd iterations until assignments stop changing.

    Empty clusters are reseeded with the point farthest from its center.
    ``history`` records the inertia after every assignment step.
    """
    k = centers.shape[0]
    rows = np.arange(len(x))
    centers = centers.copy()
    history: List[float] = []
    labels = None
    it = 0
    for it in range(1, max_iter + 1):
        d = _sq_dists(x, centers)
        new = d.argmin(1)
        history.append(float(d[rows, new].sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        own = d[rows, labels]
        counts = np.bincount(labels, minlength=k)
        while np.any(counts == 0):
            c = int(np.flatnonzero(counts == 0)[0])
            far = int(np.where(counts[labels] > 1, own, -1.0).argmax())
            labels[far] = c
            own[far] = 0.0
            counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, x)
        centers = sums / counts[:, None]
    inertia = float(((x - centers[labels]) ** 2).sum())
    return labels, centers, inertia, it, history


def kmeans(features, k: int, n_init: int = 20, max_iter: int = 300, seed: int = 0) -> KMeansResult:
    """Full-batch k-means, best inertia over ``n_init`` k-means++ restarts.

    Restart r is seeded from ``(seed, r)``; ties on inertia go to the lower r.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.shape[0] < k:
        raise ValueError(f"need at least k={k} points, got {x.shape[0]}")
    if k < 1:
        raise ValueError("k must be >= 1")
    best = None
    for r in range(n_init):
        rng = stream(seed, STREAM_KMEANS, r)
        labels, centers, inertia, it, hist = lloyd(x, _kmeans_pp(x, k, rng), max_iter)
        if best is None or inertia < best.inertia:
            best = KMeansResult(labels, centers, inertia, it, hist, r)
    return best


def inertia_of(x, labels) -> float:
    x = np.asarray(x, dtype=np.float64)
    total = 0.0
    for c in np.unique(labels):
        pts = x[labels == c]
        total += float(((pts - pts.mean(0)) ** 2).sum())
    return total


# ---------------------------------------------------------------- misc

def argmax_assignment(q_rows) -> np.ndarray:
    q = np.asarray(q_rows, dtype=np.float64)
    if not np.all(np.isfinite(q)):
        raise ValueError("non-finite codes")
    return q.argmax(axis=1)


def pairwise_nmi_diversity(assignments: Sequence) -> Tuple[float, float]:
    """Mean and population std of NMI over all unordered pairs of partitions."""
    if len(assignments) < 2:
        raise ValueError("need at least 2 partitions")
    n = len(assignments[0])
    if any(len(a) != n for a in assignments):
        raise ValueError("partitions must have equal lengths")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        vals = [nmi(a, b) for a, b in itertools.combinations(assignments, 2)]
    return float(np.mean(vals)), float(np.std(vals))


def nearest_neighbors(features, query: int, k: int) -> np.ndarray:
    """k ids closest to ``query`` by cosine distance, ties to the lower id."""
    x = np.asarray(features, dtype=np.float64)
    n = x.shape[0]
    if not 0 < k < n:
        raise ValueError(f"k must be in [1, {n - 1}], got {k}")
    norms = np.linalg.norm(x, axis=1)
    norms[norms == 0] = 1.0
    unit = x / norms[:, None]
    dist = 1.0 - unit @ unit[query]
    ids = np.arange(n)
    order = np.lexsort((ids, dist))
    return order[order != query][:k]


def confusion_percentages(matched_confusion) -> np.ndarray:
    """Row-wise percentages rounded half away from zero (rows need not sum to 100)."""
    m = np.asarray(matched_confusion, dtype=np.float64)
    rs = m.sum(1, keepdims=True)
    if np.any(m < 0):
        raise ValueError("counts must be non-negative")
    if np.any(rs == 0):
        raise ValueError(f"zero row(s) {np.flatnonzero(rs.ravel() == 0).tolist()}")
    return np.floor(100.0 * m / rs + 0.5).astype(np.int64)


def evaluate(features, y_true, k: int | None = None, n_init: int = 20, seed: int = 0,
             normalize: bool = True) -> MetricReport:
    """k-means on (optionally L2-normalized) features, scored against labels."""
    x = np.asarray(features, dtype=np.float64)
    if normalize:
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        x = x / np.where(norms > 0, norms, 1.0)
    y_true = _labels(y_true)
    k = int(y_true.max()) + 1 if k is None else k
    pred = kmeans(x, k, n_init=n_init, seed=seed).labels
    acc, perm, matched = clustering_accuracy(y_true, pred)
    return MetricReport(acc, nmi(y_true, pred), ari(y_true, pred), matched, perm, k)
