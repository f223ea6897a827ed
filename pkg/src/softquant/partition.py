"""Input-space division: PCA projection followed by K-Means clustering."""

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class PcaProjection:
    mean: np.ndarray  # (F,)
    components: np.ndarray  # (F, d), orthonormal columns
    explained_variance: np.ndarray  # (d,), non-increasing
    spectrum: np.ndarray = None  # all F eigenvalues, descending

    @property
    def dims(self):
        return self.components.shape[1]

    def transform(self, features):
        X = np.asarray(features, dtype=float)
        if X.ndim != 2 or X.shape[1] != len(self.mean):
            raise ValueError(f"expected {len(self.mean)} features, got shape {X.shape}")
        return (X - self.mean) @ self.components


def fit_pca(features, d):
    """Top-``d`` principal components of the mean-centered covariance.

    Each component's largest-magnitude entry is made positive.  If ``d``
    exceeds the numerical rank it is reduced, with a warning.
    """
    X = np.asarray(features, dtype=float)
    n, F = X.shape
    if n < 2:
        raise ValueError("PCA needs at least two points")
    if not 1 <= d <= F:
        raise ValueError(f"d must lie in 1..{F}, got {d}")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / (n - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals = np.clip(vals[order], 0.0, None)
    vecs = vecs[:, order]
    rank = int(np.sum(vals > vals[0] * F * np.finfo(float).eps * 10)) if vals[0] > 0 else 0
    if d > max(rank, 1):
        warnings.warn(f"requested {d} components but data rank is {rank}; using {max(rank, 1)}", RuntimeWarning)
        d = max(rank, 1)
    comps = vecs[:, :d].copy()
    pivot = np.argmax(np.abs(comps), axis=0)
    signs = np.sign(comps[pivot, np.arange(d)])
    comps *= np.where(signs == 0, 1.0, signs)
    return PcaProjection(mean, comps, vals[:d].copy(), vals)


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    inertia: float
    n_iter: int
    inertia_history: list = field(default_factory=list)


def _sq_dist(points, centroids):
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _kmeans_pp(points, k, g):
    n = len(points)
    chosen = [int(g.integers(n))]
    d2 = _sq_dist(points, points[chosen])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(g.choice(n, p=d2 / total))
        else:
            # every point coincides with a chosen centroid
            rest = np.setdiff1d(np.arange(n), chosen)
            nxt = int(g.choice(rest))
        chosen.append(nxt)
        d2 = np.minimum(d2, _sq_dist(points, points[[nxt]])[:, 0])
    return points[chosen].copy()


def _lloyd(points, centroids, max_iters, tol):
    k = len(centroids)
    history = []
    d2 = _sq_dist(points, centroids)
    labels = np.argmin(d2, axis=1)
    inertia = float(d2[np.arange(len(points)), labels].sum())
    history.append(inertia)
    it = 0
    for it in range(1, max_iters + 1):
        new = centroids.copy()
        counts = np.bincount(labels, minlength=k)
        for j in range(k):
            if counts[j]:
                new[j] = points[labels == j].mean(axis=0)
        for j in np.flatnonzero(counts == 0):
            # re-seed an empty cluster at the point farthest from its centroid
            cur = _sq_dist(points, new)
            own = cur[np.arange(len(points)), labels]
            far = int(np.argmax(own))
            new[j] = points[far]
            labels = labels.copy()
            labels[far] = j
        shift = float(np.sqrt(((new - centroids) ** 2).sum(axis=1)).max())
        centroids = new
        d2 = _sq_dist(points, centroids)
        labels = np.argmin(d2, axis=1)
        inertia = float(d2[np.arange(len(points)), labels].sum())
        if inertia > history[-1] * (1 + 1e-12) + 1e-12:
            raise AssertionError(f"k-means inertia increased at iteration {it}: {history[-1]} -> {inertia}")
        history.append(inertia)
        if shift < tol:
            break
    return KMeansResult(centroids, labels, inertia, it, history)


def fit_kmeans(points, k, seed=0, max_iters=100, tol=1e-6, restarts=10):
    """Lloyd's algorithm from k-means++ seeds; the lowest-inertia restart wins."""
    P = np.asarray(points, dtype=float)
    if P.ndim == 1:
        P = P[:, None]
    n = len(P)
    if k < 1:
        raise ValueError("k must be >= 1")
    if n < k:
        raise ValueError(f"need at least k={k} points, got {n}")
    g = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        res = _lloyd(P, _kmeans_pp(P, k, g), max_iters, tol)
        if best is None or res.inertia < best.inertia:
            best = res
    return best


def nearest(points, centroids):
    """Nearest centroid per point (Euclidean); ties to the lowest index."""
    return np.argmin(_sq_dist(np.asarray(points, dtype=float), centroids), axis=1)


@dataclass
class PartitionConfig:
    dims: int = 6
    clusters: int = 5
    min_support: int = 5
    min_source: int = 50
    min_target: int = 20
    seed: int = 0
    restarts: int = 10
    max_iters: int = 100
    tol: float = 1e-6

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class SubspacePartition:
    pca: PcaProjection
    centroids: np.ndarray  # (clusters, d)
    cluster_map: np.ndarray  # cluster index -> subspace index (after merging)
    source_counts: np.ndarray = None  # (n_subspaces,)
    support_counts: np.ndarray = None  # (n_subspaces, K)
    support: np.ndarray = None  # (n_subspaces, K) bool
    min_support: int = 5
    merges: list = field(default_factory=list)

    @property
    def n_subspaces(self):
        return int(self.cluster_map.max()) + 1

    def assign(self, features):
        return self.cluster_map[nearest(self.pca.transform(features), self.centroids)]

    def to_dict(self):
        return {
            "mean": self.pca.mean.tolist(),
            "components": self.pca.components.tolist(),
            "explained_variance": self.pca.explained_variance.tolist(),
            "centroids": self.centroids.tolist(),
            "cluster_map": self.cluster_map.tolist(),
            "source_counts": None if self.source_counts is None else self.source_counts.tolist(),
            "support_counts": None if self.support_counts is None else self.support_counts.tolist(),
            "support": None if self.support is None else self.support.tolist(),
            "min_support": self.min_support,
            "merges": self.merges,
        }

    @classmethod
    def from_dict(cls, d):
        pca = PcaProjection(np.array(d["mean"]), np.array(d["components"]), np.array(d["explained_variance"]))
        arr = lambda k, dt=None: None if d.get(k) is None else np.array(d[k], dtype=dt)
        return cls(pca, np.array(d["centroids"]), np.array(d["cluster_map"]), arr("source_counts"),
                   arr("support_counts"), arr("support", bool), d.get("min_support", 5), d.get("merges", []))


def compute_support(assignments, labels, n_subspaces, K, min_support):
    """Per-(subspace, class) source counts and the ``count >= min_support`` mask."""
    counts = np.zeros((n_subspaces, K), dtype=np.int64)
    np.add.at(counts, (np.asarray(assignments), np.asarray(labels)), 1)
    empty = np.flatnonzero(counts.sum(axis=1) == 0)
    if len(empty):
        log.warning("subspaces without source points (unusable): %s", empty.tolist())
    return counts, counts >= min_support


def _merge_small(centroids, src_counts, tgt_counts, min_source, min_target):
    """Fold undersized clusters into their nearest surviving neighbour."""
    k = len(centroids)
    group = np.arange(k)
    merges = []
    while True:
        ids = np.unique(group)
        if len(ids) == 1:
            break
        src = np.array([src_counts[group == g].sum() for g in ids])
        tgt = np.array([tgt_counts[group == g].sum() for g in ids])
        small = (src < min_source) | (tgt < min_target)
        if not small.any():
            break
        # smallest offender first, by source count then index
        cand = ids[small]
        victim = cand[np.lexsort((cand, src[small]))[0]]
        members = np.flatnonzero(group == victim)
        others = np.flatnonzero(group != victim)
        d2 = _sq_dist(centroids[members], centroids[others])
        into = int(group[others[np.unravel_index(np.argmin(d2), d2.shape)[1]]])
        group[group == victim] = into
        merges.append({"cluster": int(victim), "into": into})
    _, dense = np.unique(group, return_inverse=True)
    return dense.astype(np.int64), merges


def fit_partition(source_features, source_labels, K, config=None, target_features=None):
    """Fit PCA and K-Means on the source, merge undersized subspaces and
    record per-subspace class support."""
    cfg = config or PartitionConfig()
    pca = fit_pca(source_features, min(cfg.dims, np.shape(source_features)[1]))
    Z = pca.transform(source_features)
    km = fit_kmeans(Z, cfg.clusters, cfg.seed, cfg.max_iters, cfg.tol, cfg.restarts)
    k = len(km.centroids)
    src_counts = np.bincount(km.labels, minlength=k)
    if target_features is not None:
        tgt_counts = np.bincount(nearest(pca.transform(target_features), km.centroids), minlength=k)
    else:
        tgt_counts = np.full(k, np.iinfo(np.int64).max)
    cmap, merges = _merge_small(km.centroids, src_counts, tgt_counts, cfg.min_source, cfg.min_target)
    part = SubspacePartition(pca, km.centroids, cmap, min_support=cfg.min_support, merges=merges)
    assign = cmap[km.labels]
    part.source_counts = np.bincount(assign, minlength=part.n_subspaces)
    part.support_counts, part.support = compute_support(assign, source_labels, part.n_subspaces, K, cfg.min_support)
    return part
