"""Partition similarity scores, mask norms and the power-and-effort penalty.

``ami`` and ``ari`` are similarities (1 means identical partitions) while
``frob_distance`` is a distance (0 means identical).  The attack always
*minimises*, so :func:`phi_for_attack` negates the distance.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import gammaln

PHI_KINDS = ("ami", "ari", "frob")
AMI_NORMALIZERS = ("arithmetic", "geometric", "max", "min")


def _check_pair(a, b):
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    if a.shape != b.shape:
        raise ValueError(f"label vectors differ in length: {a.size} vs {b.size}")
    return a, b


def contingency(a, b) -> np.ndarray:
    """Integer contingency table: rows are the clusters of ``a``, columns those of ``b``."""
    a, b = _check_pair(a, b)
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    return table


def _entropy(counts) -> float:
    counts = np.asarray(counts, dtype=np.float64)
    counts = counts[counts > 0]
    n = counts.sum()
    p = counts / n
    return float(-(p * np.log(p)).sum())


def mutual_info(a, b) -> float:
    table = contingency(a, b).astype(np.float64)
    n = table.sum()
    rows = table.sum(axis=1, keepdims=True)
    cols = table.sum(axis=0, keepdims=True)
    nz = table > 0
    outer = rows @ cols
    mi = (table[nz] / n) * (np.log(table[nz] * n) - np.log(outer[nz]))
    return max(float(mi.sum()), 0.0)


def expected_mutual_info(row_sums, col_sums) -> float:
    """Expected mutual information of two partitions with the given cluster sizes.

    Expectation is over uniformly random relabellings of the samples with the
    marginals held fixed, i.e. every cell count ``n_ij`` follows a
    hypergeometric law.
    """
    a = np.asarray(row_sums, dtype=np.int64)
    b = np.asarray(col_sums, dtype=np.int64)
    n = int(a.sum())
    emi = 0.0
    lg_n = gammaln(n + 1)
    for ai in a:
        for bj in b:
            lo = max(1, ai + bj - n)
            hi = min(ai, bj)
            if hi < lo:
                continue
            nij = np.arange(lo, hi + 1, dtype=np.float64)
            term = (nij / n) * (np.log(n * nij) - np.log(float(ai) * float(bj)))
            log_p = (
                gammaln(ai + 1) + gammaln(bj + 1) + gammaln(n - ai + 1) + gammaln(n - bj + 1)
                - lg_n - gammaln(nij + 1) - gammaln(ai - nij + 1) - gammaln(bj - nij + 1)
                - gammaln(n - ai - bj + nij + 1)
            )
            emi += float((term * np.exp(log_p)).sum())
    return emi


def _mean(h1: float, h2: float, how: str) -> float:
    if how == "arithmetic":
        return (h1 + h2) / 2.0
    if how == "geometric":
        return math.sqrt(h1 * h2)
    if how == "max":
        return max(h1, h2)
    if how == "min":
        return min(h1, h2)
    raise ValueError(f"unknown AMI normalizer {how!r}; expected one of {AMI_NORMALIZERS}")


def ami(a, b, normalizer: str = "arithmetic") -> float:
    """Adjusted mutual information between two partitions.

    ``(MI - E[MI]) / (mean(H(a), H(b)) - E[MI])`` with the expectation taken
    under the hypergeometric permutation model.  Identical partitions score
    1, independent ones score about 0 and the value can dip below zero.
    When the denominator vanishes (both partitions trivial in the same way)
    the score is defined as 1.
    """
    a, b = _check_pair(a, b)
    table = contingency(a, b)
    rows = table.sum(axis=1)
    cols = table.sum(axis=0)
    if (rows.size == cols.size == 1) or (rows.size == cols.size == a.size):
        return 1.0
    if rows.size == cols.size and np.count_nonzero(table) == rows.size:
        # Same partition up to renaming; exact 1 instead of a rounded ratio.
        return 1.0
    mi = mutual_info(a, b)
    emi = expected_mutual_info(rows, cols)
    norm = _mean(_entropy(rows), _entropy(cols), normalizer)
    denom = norm - emi
    eps = np.finfo(np.float64).eps
    denom = min(denom, -eps) if denom < 0 else max(denom, eps)
    return float((mi - emi) / denom)


def ari(a, b) -> float:
    """Adjusted Rand index computed from the contingency table's pair counts."""
    a, b = _check_pair(a, b)
    table = contingency(a, b)
    n = a.size

    def pairs(x):
        x = np.asarray(x, dtype=np.float64)
        return float((x * (x - 1) / 2.0).sum())

    index = pairs(table.ravel())
    sa = pairs(table.sum(axis=1))
    sb = pairs(table.sum(axis=0))
    total = n * (n - 1) / 2.0
    if total == 0:
        return 1.0
    expected = sa * sb / total
    max_index = (sa + sb) / 2.0
    if max_index == expected:
        return 1.0
    return float((index - expected) / (max_index - expected))


def frob_distance(a, b) -> float:
    """``||Y Y^T - Y' Y'^T||_F`` for the one-hot encodings ``Y`` and ``Y'``.

    The co-association matrices never need to be formed: the squared norm is
    ``sum(|A_k|^2) + sum(|B_l|^2) - 2 sum(n_kl^2)``.
    """
    table = contingency(a, b).astype(np.float64)
    sq = (table.sum(axis=1) ** 2).sum() + (table.sum(axis=0) ** 2).sum() - 2.0 * (table**2).sum()
    return math.sqrt(max(sq, 0.0))


def phi_for_attack(kind: str, a, b, ami_normalizer: str = "arithmetic") -> float:
    """Similarity term the attacker minimises.

    ``ami`` and ``ari`` are returned as-is; ``frob`` returns the negated
    distance so that lower always means more different.
    """
    if kind == "ami":
        return ami(a, b, normalizer=ami_normalizer)
    if kind == "ari":
        return ari(a, b)
    if kind == "frob":
        return -frob_distance(a, b)
    raise ValueError(f"unknown phi {kind!r}; expected one of {PHI_KINDS}")


@dataclass(frozen=True)
class MaskNorms:
    l0: int
    l2: float
    linf: float

    def as_dict(self) -> dict:
        return {"l0": self.l0, "l2": self.l2, "linf": self.linf}


def mask_norms(e) -> MaskNorms:
    """Zero, Euclidean and max norms of a mask; the zero count uses exact comparison."""
    e = np.asarray(e, dtype=np.float64).ravel()
    if e.size == 0:
        return MaskNorms(0, 0.0, 0.0)
    return MaskNorms(
        l0=int(np.count_nonzero(e)),
        l2=float(np.linalg.norm(e)),
        linf=float(np.abs(e).max()),
    )


def pe_penalty(e, lam: float) -> float:
    """Power-and-effort penalty ``lam * ||e||_0 * ||e||_inf``."""
    norms = mask_norms(e)
    return float(lam) * norms.l0 * norms.linf


def penalty_weight(n: int, d: int, alpha: float = 255.0, scale: float = 1.0) -> float:
    """Penalty weight normalised by the matrix size and the feature range ``alpha``."""
    return scale / (alpha * n * d)


def _pnorm(x, p) -> float:
    if p == math.inf:
        return float(np.abs(x).max()) if x.size else 0.0
    return float((np.abs(x) ** p).sum() ** (1.0 / p))


def check_norm_bound(x, p: float, q: float) -> bool:
    """Whether ``||x||_p <= ||x||_0 * ||x||_q`` holds for ``1 <= p <= q``.

    Meant as a property-test oracle for the penalty being an upper bound on a
    single norm; a tiny relative slack absorbs rounding.
    """
    if not 1 <= p <= q:
        raise ValueError(f"need 1 <= p <= q, got p={p}, q={q}")
    x = np.asarray(x, dtype=np.float64).ravel()
    lhs = _pnorm(x, p)
    rhs = np.count_nonzero(x) * _pnorm(x, q)
    return lhs <= rhs * (1 + 1e-12)


def silhouette_samples(m, labels) -> np.ndarray:
    """Per-sample silhouette ``(b - a) / max(a, b)`` with Euclidean distances.

    Samples in singleton clusters, and samples with ``a == b == 0``, get 0.
    """
    X = np.asarray(m, dtype=np.float64)
    labels = np.asarray(labels)
    ids, inv = np.unique(labels, return_inverse=True)
    k = ids.size
    if k < 2:
        raise ValueError("silhouette needs at least two clusters")
    sq = (X**2).sum(axis=1)
    dist = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2.0 * X @ X.T, 0.0))
    np.fill_diagonal(dist, 0.0)
    onehot = np.zeros((X.shape[0], k))
    onehot[np.arange(X.shape[0]), inv] = 1.0
    sizes = onehot.sum(axis=0)
    sums = dist @ onehot
    own = sizes[inv]
    a = np.where(own > 1, sums[np.arange(X.shape[0]), inv] / np.maximum(own - 1, 1), 0.0)
    mean_other = sums / sizes
    mean_other[np.arange(X.shape[0]), inv] = np.inf
    b = mean_other.min(axis=1)
    denom = np.maximum(a, b)
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(denom > 0, (b - a) / denom, 0.0)
    s[own == 1] = 0.0
    return s


def silhouette(m, labels) -> float:
    return float(silhouette_samples(m, labels).mean())


def miss_clustered(before, after) -> int:
    """Samples whose cluster changed, after optimally matching the two label sets.

    The matching maximises agreement on the contingency table (Hungarian
    algorithm), so a pure relabelling counts as zero.  Clusters of ``after``
    left unmatched, e.g. when it has more clusters, count as disagreements.
    """
    before, after = _check_pair(before, after)
    table = contingency(before, after)
    rows, cols = linear_sum_assignment(table, maximize=True)
    return int(before.size - table[rows, cols].sum())


def victim_moved(before, after, victim: int, target: int) -> int:
    """Alternative counter: samples of the ``victim`` cluster now sharing a cluster
    with the bulk of the ``target`` cluster.

    ``victim`` and ``target`` are cluster ids of ``before``.
    """
    before, after = _check_pair(before, after)
    tgt = after[before == target]
    if tgt.size == 0:
        raise ValueError(f"cluster {target} is empty")
    ids, counts = np.unique(tgt, return_counts=True)
    home = ids[np.argmax(counts)]
    vic = before == victim
    if not vic.any():
        raise ValueError(f"cluster {victim} is empty")
    return int((after[vic] == home).sum())


def all_phi(a, b) -> dict:
    return {"ami": ami(a, b), "ari": ari(a, b), "frob": frob_distance(a, b)}
