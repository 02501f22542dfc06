"""Victim clustering algorithms behind a single query interface.

Every algorithm here is a pure function of its configuration, its seed and
the input matrix, so the attack can treat a :class:`Clusterer` as an opaque
service and still get a deterministic objective.  Returned labels are
canonical (numbered in order of first appearance).
"""
from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field

import numpy as np

from .dataset import canonical_labels
from .metrics import silhouette

log = logging.getLogger(__name__)

KINDS = ("kmeanspp", "ward", "spectral", "ensemble")
SIMILARITIES = ("self-tuning", "cosine", "pearson-sparsified", "max-minus-euclidean")

LLOYD_MAX_ITER = 300
SELF_TUNING_NEIGHBOR = 7


class ClusteringError(RuntimeError):
    """A clusterer could not produce a partition."""


class QueryCounter:
    """Thread-safe count of cluster-assignment queries."""

    def __init__(self, count: int = 0):
        self._count = count
        self._lock = threading.Lock()

    def increment(self) -> None:
        with self._lock:
            self._count += 1

    @property
    def count(self) -> int:
        return self._count

    def __repr__(self):
        return f"QueryCounter({self._count})"


def _sq_dists(X, C):
    """Squared Euclidean distances between the rows of ``X`` and ``C``."""
    d = (X**2).sum(axis=1)[:, None] + (C**2).sum(axis=1)[None, :] - 2.0 * X @ C.T
    return np.maximum(d, 0.0)


def _check_k(n: int, k: int):
    if k < 1:
        raise ValueError(f"need at least one cluster, got K={k}")
    if k > n:
        raise ValueError(f"cannot form K={k} clusters from {n} samples")


# --------------------------------------------------------------------------
# K-means++


def kmeanspp_seeds(X, k: int, rng) -> np.ndarray:
    """D^2-weighted seeding; returns the row indices of the initial centres."""
    n = X.shape[0]
    idx = [int(rng.integers(n))]
    closest = _sq_dists(X, X[idx])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            # All remaining points coincide with a centre; pick the lowest unused index.
            unused = np.setdiff1d(np.arange(n), idx)
            nxt = int(unused[0])
        else:
            nxt = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            nxt = min(nxt, n - 1)
        idx.append(nxt)
        closest = np.minimum(closest, _sq_dists(X, X[[nxt]])[:, 0])
    return np.array(idx)


def lloyd(X, centers, max_iter: int = LLOYD_MAX_ITER):
    """Lloyd iterations until the assignment stops changing.

    Empty clusters are re-seeded at the point farthest from its own centroid.

    Returns
    -------
    labels : ndarray of int
    centers : ndarray of shape (k, d)
    sse_history : list of float
        Within-cluster sum of squares after each iteration.
    """
    X = np.asarray(X, dtype=np.float64)
    centers = np.array(centers, dtype=np.float64)
    k = centers.shape[0]
    labels = None
    history = []
    for _ in range(max_iter):
        new = np.argmin(_sq_dists(X, centers), axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            members = labels == j
            if members.any():
                centers[j] = X[members].mean(axis=0)
        for j in range(k):
            if not (labels == j).any():
                own = ((X - centers[labels]) ** 2).sum(axis=1)
                far = int(np.argmax(own))
                old = labels[far]
                labels[far] = j
                centers[j] = X[far]
                centers[old] = X[labels == old].mean(axis=0)
        history.append(float(((X - centers[labels]) ** 2).sum()))
    return labels, centers, history


def kmeanspp(m, k: int, seed: int = 0, max_iter: int = LLOYD_MAX_ITER) -> np.ndarray:
    X = np.asarray(m, dtype=np.float64)
    _check_k(X.shape[0], k)
    rng = np.random.default_rng(seed)
    seeds = kmeanspp_seeds(X, k, rng)
    labels, _, _ = lloyd(X, X[seeds], max_iter=max_iter)
    return canonical_labels(labels)


# --------------------------------------------------------------------------
# Ward


def ward_merges(m, k: int = 1):
    """Agglomerate with Ward's criterion until ``k`` clusters remain.

    Merge costs are the increase in within-cluster SSE,
    ``|A||B| / (|A|+|B|) * ||c_A - c_B||^2``, maintained with the
    Lance-Williams update.  Ties go to the lowest ``(i, j)`` slot pair and the
    merged cluster keeps slot ``i``.

    Returns
    -------
    slots : ndarray of int
        Final slot id per sample.
    merges : list of (i, j, cost)
    """
    X = np.asarray(m, dtype=np.float64)
    n = X.shape[0]
    _check_k(n, k)
    cost = _sq_dists(X, X) / 2.0
    np.fill_diagonal(cost, np.inf)
    size = np.ones(n)
    alive = np.ones(n, dtype=bool)
    slot = np.arange(n)
    merges = []
    for _ in range(n - k):
        flat = int(np.argmin(cost))
        i, j = divmod(flat, n)
        if i > j:
            i, j = j, i
        c_ij = cost[i, j]
        merges.append((i, j, float(c_ij)))
        ni, nj = size[i], size[j]
        nk = size
        updated = ((ni + nk) * cost[i] + (nj + nk) * cost[j] - nk * c_ij) / (ni + nj + nk)
        alive[j] = False
        updated[~alive] = np.inf
        updated[i] = np.inf
        cost[i, :] = updated
        cost[:, i] = updated
        cost[j, :] = np.inf
        cost[:, j] = np.inf
        size[i] = ni + nj
        slot[slot == j] = i
    return slot, merges


def ward(m, k: int) -> np.ndarray:
    slot, _ = ward_merges(m, k)
    return canonical_labels(slot)


# --------------------------------------------------------------------------
# Spectral


def similarity_matrix(m, kind: str = "self-tuning") -> np.ndarray:
    """Pairwise similarities between the rows of ``m``.

    ``self-tuning`` uses ``exp(-||x_i - x_j||^2 / (sigma_i sigma_j))`` with
    ``sigma_i`` the distance to the 7th nearest neighbour.  ``cosine`` and
    ``pearson-sparsified`` are the (centred) cosine similarities, the latter
    with negative entries clamped to 0.  ``max-minus-euclidean`` is
    ``d_max - ||x_i - x_j||``.  The diagonal is left as the formula gives it.
    """
    X = np.asarray(m, dtype=np.float64)
    n = X.shape[0]
    if kind == "self-tuning":
        d2 = _sq_dists(X, X)
        np.fill_diagonal(d2, 0.0)
        dist = np.sqrt(d2)
        if n == 1:
            return np.ones((1, 1))
        nb = min(SELF_TUNING_NEIGHBOR, n - 1)
        sigma = np.sort(dist, axis=1)[:, nb]
        scale = np.outer(sigma, sigma)
        # A zero neighbour scale sends distinct pairs to exp(-inf) = 0.
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            S = np.where(d2 == 0, 1.0, np.exp(-d2 / np.where(scale > 0, scale, np.finfo(float).tiny)))
        return (S + S.T) / 2.0
    if kind in ("cosine", "pearson-sparsified"):
        Y = X - X.mean(axis=0) if kind == "pearson-sparsified" else X
        norms = np.linalg.norm(Y, axis=1)
        if np.any(norms == 0):
            bad = int(np.flatnonzero(norms == 0)[0])
            raise ValueError(f"{kind} similarity undefined: row {bad} has zero norm")
        U = Y / norms[:, None]
        S = np.clip(U @ U.T, -1.0, 1.0)
        S = (S + S.T) / 2.0
        if kind == "pearson-sparsified":
            S = np.maximum(S, 0.0)
        return S
    if kind == "max-minus-euclidean":
        dist = np.sqrt(_sq_dists(X, X))
        np.fill_diagonal(dist, 0.0)
        dist = (dist + dist.T) / 2.0
        return dist.max() - dist
    raise ValueError(f"unknown similarity {kind!r}; expected one of {SIMILARITIES}")


def spectral_embedding(W, k: int) -> np.ndarray:
    """Rows of the ``k`` leading eigenvectors of ``D^-1/2 W D^-1/2``, row-normalised.

    These are the eigenvectors of the ``k`` smallest eigenvalues of the
    symmetric normalised Laplacian.  The diagonal of ``W`` is ignored.
    """
    W = np.array(W, dtype=np.float64)
    np.fill_diagonal(W, 0.0)
    deg = W.sum(axis=1)
    inv_sqrt = np.zeros_like(deg)
    inv_sqrt[deg > 0] = 1.0 / np.sqrt(deg[deg > 0])
    M = inv_sqrt[:, None] * W * inv_sqrt[None, :]
    M = (M + M.T) / 2.0
    try:
        _, vecs = np.linalg.eigh(M)
    except np.linalg.LinAlgError as exc:
        raise ClusteringError(f"eigendecomposition failed: {exc}") from exc
    U = vecs[:, ::-1][:, :k]
    norms = np.linalg.norm(U, axis=1)
    norms[norms == 0] = 1.0
    return U / norms[:, None]


def spectral(m, k: int, similarity: str = "self-tuning", seed: int = 0) -> np.ndarray:
    X = np.asarray(m, dtype=np.float64)
    _check_k(X.shape[0], k)
    if k == 1:
        return np.zeros(X.shape[0], dtype=np.int64)
    U = spectral_embedding(similarity_matrix(X, similarity), k)
    return kmeanspp(U, k, seed=seed)


# --------------------------------------------------------------------------
# Clusterer


@dataclass(frozen=True)
class Clusterer:
    """Configuration of a victim algorithm.

    ``members`` is only used by ``kind="ensemble"``; each member is itself a
    :class:`Clusterer` and the partition with the highest silhouette wins.
    """

    kind: str
    k: int
    similarity: str = "self-tuning"
    seed: int = 0
    members: tuple = field(default_factory=tuple)
    name: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown clusterer kind {self.kind!r}; expected one of {KINDS}")
        if self.similarity not in SIMILARITIES:
            raise ValueError(f"unknown similarity {self.similarity!r}")
        if self.kind == "ensemble" and not self.members:
            raise ValueError("an ensemble needs at least one member")
        object.__setattr__(self, "members", tuple(self.members))

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        if self.kind == "spectral":
            return f"spectral[{self.similarity}]"
        return self.kind

    def fit_predict(self, m) -> np.ndarray:
        if self.kind == "kmeanspp":
            return kmeanspp(m, self.k, seed=self.seed)
        if self.kind == "ward":
            return ward(m, self.k)
        if self.kind == "spectral":
            return spectral(m, self.k, similarity=self.similarity, seed=self.seed)
        return ensemble_best(self.members, m)

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "k": self.k, "seed": self.seed}
        if self.kind == "spectral":
            out["similarity"] = self.similarity
        if self.kind == "ensemble":
            out["members"] = [mem.to_dict() for mem in self.members]
        if self.name:
            out["name"] = self.name
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "Clusterer":
        d = dict(d)
        members = tuple(cls.from_dict(x) for x in d.pop("members", ()))
        return cls(members=members, **d)


def cluster(c: Clusterer, m, q: QueryCounter | None = None) -> np.ndarray:
    """One query to the victim; an ensemble counts as a single query."""
    X = np.asarray(m, dtype=np.float64)
    _check_k(X.shape[0], c.k)
    labels = c.fit_predict(X)
    if q is not None:
        q.increment()
    return labels


def ensemble_best(members, m, seed: int | None = None) -> np.ndarray:
    """Run every member and keep the partition with the highest silhouette.

    Members that collapse to a single cluster are skipped with a warning.
    Ties go to the earlier member.  ``seed`` is accepted for interface
    symmetry; members carry their own seeds.
    """
    X = np.asarray(m, dtype=np.float64)
    best, best_score = None, -np.inf
    for i, mem in enumerate(members):
        labels = mem.fit_predict(X)
        if np.unique(labels).size < 2:
            log.warning("ensemble member %d (%s) produced a single cluster; skipped", i, mem.label)
            continue
        score = silhouette(X, labels)
        if score > best_score:
            best, best_score = labels, score
    if best is None:
        raise ClusteringError("every ensemble member produced a single cluster")
    return best


def kmeans_ensemble(k: int, n_members: int = 20, seed: int = 0) -> Clusterer:
    """K-means ensemble with ``n_members`` differently seeded initialisations."""
    members = tuple(Clusterer("kmeanspp", k, seed=seed + i) for i in range(n_members))
    return Clusterer("ensemble", k, seed=seed, members=members, name="ensemble[kmeans]")


def spectral_ensemble(k: int, seed: int = 0) -> Clusterer:
    """Spectral ensemble over the cosine, sparsified Pearson and max-minus-distance kernels."""
    sims = ("cosine", "pearson-sparsified", "max-minus-euclidean")
    members = tuple(Clusterer("spectral", k, similarity=s, seed=seed) for s in sims)
    return Clusterer("ensemble", k, seed=seed, members=members, name="ensemble[spectral]")
