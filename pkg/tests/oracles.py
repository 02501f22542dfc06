"""Slow, direct reference implementations used as test oracles.

Nothing here shares code with the package: mutual information is summed
cell by cell, the expected mutual information is an average over every
distinct arrangement of one labelling, and ARI counts sample pairs.
"""
import itertools
import math
from functools import lru_cache


def _sizes(labels):
    out = {}
    for v in labels:
        out[v] = out.get(v, 0) + 1
    return out


def entropy(labels):
    n = len(labels)
    return -sum(c / n * math.log(c / n) for c in _sizes(labels).values())


def mutual_info(a, b):
    n = len(a)
    joint = _sizes(list(zip(a, b)))
    sa, sb = _sizes(a), _sizes(b)
    return sum(c / n * math.log(n * c / (sa[x] * sb[y])) for (x, y), c in joint.items())


def _arrangements(counts):
    """Every distinct sequence using symbol ``i`` exactly ``counts[i]`` times."""
    total = sum(counts)
    if total == 0:
        yield ()
        return
    for sym, c in enumerate(counts):
        if c:
            rest = list(counts)
            rest[sym] -= 1
            for tail in _arrangements(tuple(rest)):
                yield (sym,) + tail


@lru_cache(maxsize=None)
def expected_mutual_info(sizes_a, sizes_b):
    """Average MI of a fixed labelling with sizes ``sizes_a`` against all
    equally likely arrangements of a labelling with sizes ``sizes_b``."""
    a = [i for i, c in enumerate(sizes_a) for _ in range(c)]
    total, count = 0.0, 0
    for b in _arrangements(sizes_b):
        total += mutual_info(a, b)
        count += 1
    return total / count


def ami(a, b):
    sa = tuple(sorted(_sizes(a).values()))
    sb = tuple(sorted(_sizes(b).values()))
    emi = expected_mutual_info(sa, sb)
    norm = (entropy(a) + entropy(b)) / 2
    if abs(norm - emi) < 1e-12:
        return 1.0
    return (mutual_info(a, b) - emi) / (norm - emi)


def ari(a, b):
    """Adjusted Rand index from the four pair-agreement counts."""
    n11 = n10 = n01 = n00 = 0
    for i, j in itertools.combinations(range(len(a)), 2):
        sa, sb = a[i] == a[j], b[i] == b[j]
        if sa and sb:
            n11 += 1
        elif sa:
            n10 += 1
        elif sb:
            n01 += 1
        else:
            n00 += 1
    denom = (n11 + n01) * (n01 + n00) + (n11 + n10) * (n10 + n00)
    if denom == 0:
        return 1.0
    return 2.0 * (n11 * n00 - n01 * n10) / denom


def frob(a, b):
    n = len(a)
    s = 0
    for i in range(n):
        for j in range(n):
            s += ((a[i] == a[j]) - (b[i] == b[j])) ** 2
    return math.sqrt(s)


def set_partitions(n, kmax):
    """Label vectors in first-appearance form with at most ``kmax`` clusters."""
    def rec(prefix, k):
        if len(prefix) == n:
            yield tuple(prefix)
            return
        for v in range(min(k + 1, kmax)):
            yield from rec(prefix + [v], max(k, v + 1))
    yield from rec([], 0)


def sorted_partitions(n, kmax):
    """Non-decreasing label vectors (block compositions) with at most ``kmax`` blocks."""
    for k in range(1, kmax + 1):
        for cuts in itertools.combinations(range(1, n), k - 1):
            bounds = (0, *cuts, n)
            yield tuple(i for i in range(k) for _ in range(bounds[i + 1] - bounds[i]))
