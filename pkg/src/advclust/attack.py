"""Black-box poisoning of a clustering by a growing-population genetic search.

The attacker may only query the victim clusterer.  A candidate mask ``e``
lives in the attack space: ``|e_ij| <= delta`` and every row outside the
target set ``T`` is zero.  The search minimises

    phi(C(X), C(clamp(X + e))) + lam * ||e||_0 * ||e||_inf

by growing an archive one offspring per generation.  Each offspring is the
mutated crossover of the newest archive member with a parent drawn from a
softmax over negated losses; nothing is ever dropped from the archive.

With ``heuristic=True`` masks are further restricted so that every entry
points along the sign of ``target_centroid - victim_centroid``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .clustering import Clusterer, QueryCounter, cluster
from .dataset import BoxBounds, clamp_to_box
from .metrics import PHI_KINDS, pe_penalty, phi_for_attack


class ConstraintViolation(AssertionError):
    """A mask left the attack space; always a bug in an operator."""


@dataclass(frozen=True)
class AttackerConstraints:
    """Power ``delta`` (per-entry bound, may be ``inf``), target rows and data box."""

    delta: float
    targets: tuple
    box: BoxBounds | None = None

    def __post_init__(self):
        targets = tuple(sorted({int(t) for t in self.targets}))
        if not targets:
            raise ValueError("target set T must be non-empty")
        if targets[0] < 0:
            raise ValueError("target indices must be non-negative")
        if not self.delta >= 0:
            raise ValueError(f"delta must be non-negative, got {self.delta}")
        object.__setattr__(self, "targets", targets)
        object.__setattr__(self, "delta", float(self.delta))

    def gamma(self, d: int) -> int:
        """Maximum number of manipulable entries, ``|T| * d``."""
        return len(self.targets) * d

    def noise_range(self) -> float:
        """Finite width used for drawing mutation noise.

        Equal to ``delta`` unless the power is unbounded, in which case the
        data box width stands in.
        """
        if math.isfinite(self.delta):
            return self.delta
        if self.box is None:
            raise ValueError("delta = inf needs box bounds to draw finite mutation noise")
        return self.box.width

    def validate(self, n: int):
        if self.targets[-1] >= n:
            raise ValueError(f"target index {self.targets[-1]} out of range for n={n}")


@dataclass(frozen=True)
class GAParams:
    """Genetic-search hyperparameters.

    ``G`` is the number of generations, which is also the offspring query
    budget.  ``init`` is ``"random"`` or ``"zero"`` for the first archive
    member.
    """

    G: int = 110
    lam: float = 0.0
    p_c: float = 0.85
    p_m: float = 0.05
    p_z: float = 0.001
    seed: int = 0
    heuristic: bool = False
    init: str = "random"

    def __post_init__(self):
        if int(self.G) != self.G or self.G < 1:
            raise ValueError(f"G must be a positive integer, got {self.G}")
        if self.lam < 0:
            raise ValueError(f"lam must be non-negative, got {self.lam}")
        for name in ("p_c", "p_m", "p_z"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.init not in ("random", "zero"):
            raise ValueError(f"init must be 'random' or 'zero', got {self.init!r}")


def direction_matrix(X, labels, victim: int, target: int) -> np.ndarray:
    """Row vector ``sign(c_target - c_victim)`` broadcastable over the mask rows.

    ``sign(0) = 0``, which freezes features on which both centroids agree.
    """
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    vic = labels == victim
    tgt = labels == target
    if not vic.any():
        raise ValueError(f"victim cluster {victim} is empty")
    if not tgt.any():
        raise ValueError(f"target cluster {target} is empty")
    diff = X[tgt].mean(axis=0) - X[vic].mean(axis=0)
    return np.sign(diff)


def select_targets(X, labels, victim: int, target: int, s: float) -> tuple:
    """The ``ceil(s * |C_victim|)`` victim samples closest to the target centroid.

    Ties are broken by sample index.
    """
    if not 0 < s <= 1:
        raise ValueError(f"s must lie in (0, 1], got {s}")
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    members = np.flatnonzero(labels == victim)
    if members.size == 0:
        raise ValueError(f"victim cluster {victim} is empty")
    tgt = labels == target
    if not tgt.any():
        raise ValueError(f"target cluster {target} is empty")
    centroid = X[tgt].mean(axis=0)
    dist = np.linalg.norm(X[members] - centroid, axis=1)
    order = np.lexsort((members, dist))
    count = max(1, math.ceil(s * members.size - 1e-12))
    return tuple(int(i) for i in members[order[:count]])


def in_space(e, cons: AttackerConstraints, psi=None) -> bool:
    """Membership test for the attack space (and its sign-restricted subset if ``psi`` is given)."""
    e = np.asarray(e)
    outside = np.ones(e.shape[0], dtype=bool)
    outside[list(cons.targets)] = False
    if np.any(e[outside] != 0):
        return False
    if np.any(np.abs(e) > cons.delta):
        return False
    if psi is not None:
        rows = e[list(cons.targets)]
        sgn = np.sign(rows)
        if np.any((sgn != 0) & (sgn != np.broadcast_to(psi, rows.shape))):
            return False
    return True


def _target_rows(cons):
    return np.asarray(cons.targets, dtype=np.int64)


def initial_mask(shape, cons: AttackerConstraints, params: GAParams, rng, psi=None) -> np.ndarray:
    """Random starting point: uniform entries on ``T`` rows, then sparsified by ``p_z``."""
    e = np.zeros(shape)
    if params.init == "zero":
        return e
    rows = _target_rows(cons)
    width = cons.noise_range()
    sub_shape = (rows.size, shape[1])
    if params.heuristic:
        sub = rng.uniform(0.0, width, size=sub_shape) * psi
    else:
        sub = rng.uniform(-width, width, size=sub_shape)
    sub = np.clip(sub, -cons.delta, cons.delta)
    sub[rng.random(sub_shape) < params.p_z] = 0.0
    e[rows] = sub
    return e


def choice_probabilities(losses) -> np.ndarray:
    """Softmax of the negated losses, shifted by the maximum for stability."""
    z = -np.asarray(losses, dtype=np.float64)
    z = z - z.max()
    w = np.exp(z)
    return w / w.sum()


def choice(losses, rng) -> int:
    """Roulette-wheel pick of one archive index."""
    p = choice_probabilities(losses)
    if p.size == 1:
        return 0
    return int(min(np.searchsorted(np.cumsum(p), rng.random(), side="right"), p.size - 1))


def crossover(a, b, p_c: float, rng) -> np.ndarray:
    """With probability ``p_c`` swap each entry of ``a`` for ``b``'s, again with probability ``p_c``.

    When the gate fails ``a`` is returned unchanged (as a copy).
    """
    out = np.array(a, dtype=np.float64)
    gate = rng.random()
    swap = rng.random(out.shape) < p_c
    if gate < p_c:
        out[swap] = np.asarray(b)[swap]
    return out


def mutation(e, cons: AttackerConstraints, p_m: float, p_z: float, rng,
             heuristic: bool = False, psi=None) -> np.ndarray:
    """Add uniform noise to ``T`` entries with probability ``p_m``, clip, then zero with probability ``p_z``.

    In heuristic mode the noise is a non-negative magnitude, clipped to
    ``[0, delta]`` and then signed by ``psi``.
    """
    out = np.array(e, dtype=np.float64)
    rows = _target_rows(cons)
    sub = out[rows]
    width = cons.noise_range()
    hit = rng.random(sub.shape) < p_m
    if heuristic:
        if psi is None:
            raise ValueError("heuristic mutation needs a direction matrix")
        signs = np.broadcast_to(psi, sub.shape)
        mag = np.abs(sub)
        mag = mag + hit * rng.uniform(0.0, width, size=sub.shape)
        mag = np.clip(mag, 0.0, cons.delta)
        sub = mag * signs
    else:
        sub = sub + hit * rng.uniform(-width, width, size=sub.shape)
        sub = np.clip(sub, -cons.delta, cons.delta)
    sub[rng.random(sub.shape) < p_z] = 0.0
    # Keep exact zeros exact (no -0.0 surprises in the zero norm or in files).
    sub[sub == 0] = 0.0
    out[rows] = sub
    return out


def objective(e, baseline, c: Clusterer, X, phi: str, lam: float,
              q: QueryCounter | None = None, box: BoxBounds | None = None,
              ami_normalizer: str = "arithmetic") -> float:
    """Similarity of the poisoned clustering to ``baseline`` plus the power-and-effort penalty.

    Spends exactly one query on ``C(clamp(X + e))``.
    """
    return _score(e, baseline, c, X, phi, lam, q, box, ami_normalizer)[0]


def _score(e, baseline, c, X, phi, lam, q, box, ami_normalizer):
    labels = cluster(c, clamp_to_box(np.asarray(X) + e, box), q)
    return phi_for_attack(phi, baseline, labels, ami_normalizer) + pe_penalty(e, lam), labels


@dataclass
class Population:
    """Archive of every evaluated mask with its cached loss."""

    masks: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    query_count: int = 0

    def add(self, mask, loss: float):
        self.masks.append(mask)
        self.losses.append(float(loss))

    def __len__(self):
        return len(self.masks)

    @property
    def newest(self):
        return self.masks[-1]

    def best_index(self) -> int:
        # np.argmin returns the first minimum: earliest generation wins ties.
        return int(np.argmin(self.losses))


@dataclass
class AttackResult:
    mask: np.ndarray
    loss: float
    trace: list
    population: Population
    baseline: np.ndarray
    labels: np.ndarray
    queries: int
    psi: np.ndarray | None = None


def attack(X, c: Clusterer, cons: AttackerConstraints, params: GAParams, phi: str = "ami",
           psi=None, baseline=None, q: QueryCounter | None = None,
           ami_normalizer: str = "arithmetic") -> AttackResult:
    """Run the genetic search and return the best mask found.

    Parameters
    ----------
    X : array of shape (n, d)
        Clean data.
    c : Clusterer
        Victim; queried ``G + 2`` times (baseline, initial mask, ``G`` offspring).
        Passing a precomputed ``baseline`` saves one of those queries.
    cons, params : AttackerConstraints, GAParams
    phi : {"ami", "ari", "frob"}
    psi : array of shape (d,) or (n, d), optional
        Direction signs, required when ``params.heuristic`` is set.

    Returns
    -------
    AttackResult
        ``trace[g]`` is the best loss in the archive after generation
        ``g + 1``, so ``len(trace) == G``.
    """
    if phi not in PHI_KINDS:
        raise ValueError(f"unknown phi {phi!r}")
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    cons.validate(n)
    if cons.delta == 0:
        raise ValueError("delta = 0 leaves no room for an attack")
    if params.heuristic:
        if psi is None:
            raise ValueError("heuristic mode needs the direction matrix psi")
        psi = np.asarray(psi, dtype=np.float64)
        if psi.ndim == 2:
            psi = psi[list(cons.targets)]
    else:
        psi = None
    q = q if q is not None else QueryCounter()
    start = q.count
    rng = np.random.default_rng(params.seed)

    if baseline is None:
        baseline = cluster(c, clamp_to_box(X, cons.box), q)
    baseline = np.asarray(baseline)

    best_labels = None

    def evaluate(e):
        nonlocal best_labels
        if not in_space(e, cons, psi):
            raise ConstraintViolation("mask left the attack space")
        loss, labels = _score(e, baseline, c, X, phi, params.lam, q, cons.box, ami_normalizer)
        if not pop.losses or loss < min(pop.losses):
            best_labels = labels
        pop.add(e, loss)
        return loss

    pop = Population()
    evaluate(initial_mask((n, d), cons, params, rng, psi))
    trace = []
    for _ in range(params.G):
        parent = pop.masks[choice(pop.losses, rng)]
        child = crossover(pop.newest, parent, params.p_c, rng)
        child = mutation(child, cons, params.p_m, params.p_z, rng, params.heuristic, psi)
        evaluate(child)
        trace.append(min(trace[-1], pop.losses[-1]) if trace else min(pop.losses))
    pop.query_count = q.count - start

    i = pop.best_index()
    return AttackResult(
        mask=pop.masks[i], loss=pop.losses[i], trace=trace, population=pop, baseline=baseline,
        labels=best_labels, queries=pop.query_count, psi=psi,
    )


@dataclass(frozen=True)
class AuditItem:
    condition: str
    passed: bool
    detail: str


def aga_condition_audit(params: GAParams, cons: AttackerConstraints, population: Population | None = None):
    """Check the hypotheses under which the archive search converges almost surely.

    The conditions are: a connective neighbourhood (mutation can reach the
    whole attack space, i.e. ``p_m > 0`` and ``delta > 0``), a generous
    choice (every archive member has positive selection probability), a
    generous production (follows from connectivity) and a generous,
    conservative selection (the archive only grows).  If ``population`` is
    given the choice probabilities are also checked numerically.
    """
    items = []
    reasons = []
    if params.p_m <= 0:
        reasons.append(f"p_m={params.p_m}")
    if cons.delta <= 0:
        reasons.append(f"delta={cons.delta}")
    connective = not reasons
    items.append(AuditItem(
        "connective-neighborhood", connective,
        "mutation support covers the attack space" if connective
        else "mutation cannot leave the current mask: " + ", ".join(reasons)))

    generous_choice, detail = True, "softmax weights are strictly positive"
    if population is not None and len(population):
        p = choice_probabilities(population.losses)
        if not np.all(p > 0):
            generous_choice = False
            detail = f"{int((p == 0).sum())} archive members underflow to zero probability"
    items.append(AuditItem("generous-choice", generous_choice, detail))
    items.append(AuditItem(
        "generous-production", connective,
        "follows from the connective neighborhood" if connective
        else "fails with the connective neighborhood: " + ", ".join(reasons)))
    items.append(AuditItem("generous-selection", True, "every archive member survives"))
    items.append(AuditItem("conservative-selection", True, "the archive keeps its best member"))
    return items
