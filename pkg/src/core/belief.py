"""
Posterior updates, belief-set geometry and the interpolation-weight LP.

A belief is a plain float vector over the parameter grid. The belief set keeps
the degenerate corners first, so any target can be written as a convex
combination of members.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.spatial.distance import cdist

from src.core.lp import LinearProgram, solve_lp
from src.core.model import ModelSpec, as_belief
from src.core.settings import SolverSettings, get_settings

logger = logging.getLogger(__name__)


class ImpossibleObservationError(ValueError):
    """The observed outcome has zero probability under the belief."""


class InterpolationError(RuntimeError):
    """The weight LP did not reach an optimum (the corner invariant is broken)."""


# ---------------------------------------------------------------------------- #
# Bayes updates
# ---------------------------------------------------------------------------- #


def bayes_update(mu: np.ndarray, xi: int, spec: ModelSpec, channel: int = 0) -> np.ndarray:
    """mu'(theta) proportional to mu(theta) f(xi; theta)."""
    joint = mu * spec.likelihood[channel, xi]
    total = joint.sum()
    if total <= 0.0:
        raise ImpossibleObservationError(f"outcome {xi} has zero probability under the belief")
    return joint / total


def posterior_matrix(mu: np.ndarray, likelihood: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """
    All one-step posteriors of `mu` for an (X, T) likelihood table.

    Returns (posteriors (X, T), outcome probabilities (X,)). An outcome with zero
    probability keeps `mu` as its posterior; it only carries mass under
    parameters mu rules out.
    """
    joint = likelihood * mu[None, :]
    probs = joint.sum(axis=1)
    possible = probs > 0.0
    posts = np.where(possible[:, None], joint / np.where(possible, probs, 1.0)[:, None], mu)
    return posts, probs


class Posterior(NamedTuple):
    xi: int
    next_state: int
    belief: np.ndarray
    prob: float


def one_step_posteriors(mu: np.ndarray, s: int, a: int, spec: ModelSpec) -> list[Posterior]:
    """(xi, g(s, a, xi), posterior) for every outcome with positive probability."""
    spec.check_action(s, a)
    posts, probs = posterior_matrix(mu, spec.xi_distribution(s, a))
    return [
        Posterior(int(x), int(spec.next_state[s, a, x]), posts[x], float(probs[x]))
        for x in np.flatnonzero(probs > 0.0)
    ]


# ---------------------------------------------------------------------------- #
# Belief sets
# ---------------------------------------------------------------------------- #


@dataclass(frozen=True, eq=False)
class BeliefSet:
    """
    Ordered posterior set: the corners, then the initial belief, then generated
    members. No two members lie within the dedup tolerance of each other.
    """

    members: np.ndarray
    version: int = 0
    tol: float = 1e-9
    fingerprint: str = field(init=False)

    def __post_init__(self):
        members = np.array(self.members, dtype=float)
        members.setflags(write=False)
        object.__setattr__(self, "members", members)
        digest = hashlib.blake2b(members.tobytes(), digest_size=8).hexdigest()
        object.__setattr__(self, "fingerprint", digest)

    @classmethod
    def initial(cls, mu1: np.ndarray, tol: float | None = None) -> "BeliefSet":
        tol = get_settings().dedup_tol if tol is None else tol
        mu1 = as_belief(mu1)
        corners = np.eye(len(mu1))
        base = cls(members=corners, version=0, tol=tol)
        return base.extend([mu1], bump=False)

    @property
    def size(self) -> int:
        return self.members.shape[0]

    @property
    def n_thetas(self) -> int:
        return self.members.shape[1]

    def __len__(self) -> int:
        return self.size

    def index_of(self, mu: np.ndarray) -> int | None:
        d = np.linalg.norm(self.members - mu[None, :], axis=1)
        hit = int(np.argmin(d))
        return hit if d[hit] <= self.tol else None

    def extend(self, beliefs, bump: bool = True) -> "BeliefSet":
        """New set with the non-duplicate beliefs appended (version bumped)."""
        current = self.members
        for mu in beliefs:
            mu = np.asarray(mu, dtype=float)
            if np.linalg.norm(current - mu[None, :], axis=1).min() > self.tol:
                current = np.vstack([current, mu])
        return BeliefSet(members=current, version=self.version + int(bump), tol=self.tol)

    def to_dict(self) -> dict:
        return {"version": self.version, "tol": self.tol, "members": self.members.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "BeliefSet":
        return cls(members=np.array(data["members"]), version=data["version"], tol=data["tol"])


def distance(mu: np.ndarray, bset: BeliefSet, extra: np.ndarray | None = None) -> float:
    """Euclidean distance from mu to the set, optionally enlarged by `extra` rows."""
    pool = bset.members if extra is None or len(extra) == 0 else np.vstack([bset.members, extra])
    return float(cdist(mu[None, :], pool).min())


# ---------------------------------------------------------------------------- #
# Interpolation weights
# ---------------------------------------------------------------------------- #


@dataclass
class InterpolationWeights:
    """Sparse convex weights over belief-set indices and the LP objective."""

    indices: np.ndarray
    weights: np.ndarray
    objective: float

    def dense(self, size: int) -> np.ndarray:
        out = np.zeros(size)
        out[self.indices] = self.weights
        return out


def interpolation_weights(
    target: np.ndarray, bset: BeliefSet, settings: SolverSettings | None = None
) -> InterpolationWeights:
    """
    Solve the weight LP: min sum_i w_i ||mu_i - target||^2 subject to
    sum_i w_i mu_i = target, sum_i w_i = 1, w >= 0.
    """
    hit = bset.index_of(target)
    if hit is not None:
        return InterpolationWeights(np.array([hit]), np.array([1.0]), 0.0)

    members = bset.members
    sq_dist = ((members - target[None, :]) ** 2).sum(axis=1)
    program = LinearProgram(
        c=sq_dist,
        a_eq=np.vstack([members.T, np.ones((1, bset.size))]),
        b_eq=np.concatenate([target, [1.0]]),
        name="weights",
    )
    solution = solve_lp(program, settings)
    if not solution.ok:
        raise InterpolationError(
            f"weight LP {solution.status} ({solution.message}); set has {bset.size} members"
        )
    w = np.where(solution.x > 1e-12, solution.x, 0.0)
    support = np.flatnonzero(w)
    return InterpolationWeights(support, w[support], float(solution.objective))


class WeightCache:
    """
    Interpolation weights for one belief set, keyed by rounded target.

    A lookup against a different set (a new fingerprint) drops every stored
    entry, so the cache never holds weights for more than one set.
    """

    def __init__(self, settings: SolverSettings | None = None):
        self.settings = settings or get_settings()
        self._store: dict[bytes, InterpolationWeights] = {}
        self._fingerprint: str | None = None
        self.hits = 0
        self.misses = 0

    def __len__(self) -> int:
        return len(self._store)

    def get(self, target: np.ndarray, bset: BeliefSet) -> InterpolationWeights:
        if bset.fingerprint != self._fingerprint:
            self._store.clear()
            self._fingerprint = bset.fingerprint
        key = np.round(target, 12).tobytes()
        found = self._store.get(key)
        if found is not None:
            self.hits += 1
            return found
        self.misses += 1
        found = interpolation_weights(target, bset, self.settings)
        self._store[key] = found
        return found

    def clear(self) -> None:
        self._store.clear()
        self._fingerprint = None


def approx_transition(
    s: int,
    a: int,
    mu: np.ndarray,
    theta_idx: int,
    bset: BeliefSet,
    spec: ModelSpec,
    cache: WeightCache | None = None,
) -> np.ndarray:
    """
    (S, M) matrix of P~((s', mu_j) | s, a, mu, theta): the outcome mass
    f(xi; theta) spread over members by the weights of the posterior.
    """
    spec.check_action(s, a)
    cache = cache or WeightCache()
    table = spec.xi_distribution(s, a)
    posts, _ = posterior_matrix(mu, table)
    out = np.zeros((spec.n_states, bset.size))
    for x in range(spec.n_xi):
        mass = table[x, theta_idx]
        if mass == 0.0:
            continue
        w = cache.get(posts[x], bset)
        out[spec.next_state[s, a, x], w.indices] += mass * w.weights
    return out
