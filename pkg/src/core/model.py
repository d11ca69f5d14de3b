"""
BR-MDP problem instances.

States, actions and randomness outcomes are dense integer indices; the
environment builders own the mapping to labels. A ModelSpec is immutable after
construction and can be shared freely between workers.

Randomness may come from several observation channels: `likelihood[k, x, t]`
is f(x; theta_t) for channel k and `channel[s, a]` names the channel that
drives the pair (s, a). Single-channel models keep `channel` at zero.
"""

import itertools
import logging
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
import pandas as pd
from pydantic import BaseModel

logger = logging.getLogger(__name__)

NORMALIZATION_TOL = 1e-9
BELIEF_SUM_TOL = 1e-9
CLAMP_TOL = 1e-12


class ModelError(ValueError):
    """Malformed model or belief."""


class InadmissibleActionError(ModelError):
    """Action not allowed in the given state."""


def _frozen(values, dtype) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


# ---------------------------------------------------------------------------- #
# Parameter space
# ---------------------------------------------------------------------------- #


@dataclass(frozen=True, eq=False)
class ParamBlock:
    """One independent group of parameters (a road type, an item)."""

    name: str
    names: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.shape[1] != len(self.names):
            raise ModelError(
                f"block {self.name}: {len(self.names)} names for {values.shape[1]} columns"
            )
        object.__setattr__(self, "values", _frozen(values, float))

    @property
    def size(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True, eq=False)
class ParamSpace:
    """
    Finite, ordered parameter grid. The index of a point is its identity.

    `block_index[t, b]` is the position of theta_t inside block b; single-block
    spaces map every point to itself.
    """

    thetas: np.ndarray
    names: tuple[str, ...] = ()
    block_index: np.ndarray | None = None
    block_names: tuple[str, ...] = ()
    block_sizes: tuple[int, ...] = ()

    def __post_init__(self):
        thetas = np.asarray(self.thetas, dtype=float)
        if thetas.ndim == 1:
            thetas = thetas[:, None]
        if thetas.shape[0] == 0:
            raise ModelError("parameter space is empty")
        if len(np.unique(thetas, axis=0)) != thetas.shape[0]:
            raise ModelError("parameter points must be distinct")
        object.__setattr__(self, "thetas", _frozen(thetas, float))
        if not self.names:
            object.__setattr__(self, "names", tuple(f"theta{i}" for i in range(thetas.shape[1])))
        if self.block_index is None:
            object.__setattr__(self, "block_index", _frozen(np.arange(len(thetas))[:, None], int))
            object.__setattr__(self, "block_names", ("all",))
            object.__setattr__(self, "block_sizes", (len(thetas),))
        else:
            object.__setattr__(self, "block_index", _frozen(self.block_index, int))

    @property
    def size(self) -> int:
        return self.thetas.shape[0]

    @classmethod
    def product(cls, blocks: Sequence[ParamBlock]) -> "ParamSpace":
        """Cartesian product of independent blocks, last block varying fastest."""
        if not blocks:
            raise ModelError("need at least one parameter block")
        combos = np.array(list(itertools.product(*[range(b.size) for b in blocks])), dtype=int)
        thetas = np.hstack([b.values[combos[:, i]] for i, b in enumerate(blocks)])
        names = tuple(name for b in blocks for name in b.names)
        return cls(
            thetas=thetas,
            names=names,
            block_index=combos,
            block_names=tuple(b.name for b in blocks),
            block_sizes=tuple(b.size for b in blocks),
        )

    def index_of(self, point: Sequence[float]) -> int:
        hits = np.flatnonzero(np.all(np.isclose(self.thetas, np.asarray(point, float)), axis=1))
        if len(hits) == 0:
            raise ModelError(f"{list(point)} is not a grid point")
        return int(hits[0])


# ---------------------------------------------------------------------------- #
# Model
# ---------------------------------------------------------------------------- #


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """
    Finite BR-MDP: admissible pairs, state equation g, cost C, randomness
    likelihoods per channel, and discount.

    Shapes: admissible (S, A), next_state (S, A, X), cost (S, A, X),
    likelihood (K, X, T), channel (S, A).
    """

    params: ParamSpace
    admissible: np.ndarray
    next_state: np.ndarray
    cost: np.ndarray
    likelihood: np.ndarray
    discount: float
    channel: np.ndarray | None = None
    name: str = "model"
    state_labels: tuple[str, ...] = ()
    action_labels: tuple[str, ...] = ()
    xi_labels: tuple[str, ...] = ()

    def __post_init__(self):
        admissible = _frozen(self.admissible, bool)
        next_state = _frozen(self.next_state, int)
        cost = _frozen(self.cost, float)
        likelihood = np.asarray(self.likelihood, dtype=float)
        if likelihood.ndim == 2:
            likelihood = likelihood[None]
        likelihood = _frozen(likelihood, float)
        channel = np.zeros(admissible.shape, dtype=int) if self.channel is None else self.channel
        channel = _frozen(channel, int)

        n_states, n_actions = admissible.shape
        n_xi = likelihood.shape[1]
        expected = (n_states, n_actions, n_xi)
        if next_state.shape != expected:
            raise ModelError(f"next_state shape {next_state.shape} != {expected}")
        if cost.shape != next_state.shape:
            raise ModelError(f"cost shape {cost.shape} != {next_state.shape}")
        if likelihood.shape[2] != self.params.size:
            raise ModelError(
                f"likelihood covers {likelihood.shape[2]} parameters, grid has {self.params.size}"
            )
        if channel.shape != admissible.shape:
            raise ModelError(f"channel shape {channel.shape} != {admissible.shape}")
        if channel.min() < 0 or channel.max() >= likelihood.shape[0]:
            raise ModelError("channel index out of range")

        object.__setattr__(self, "admissible", admissible)
        object.__setattr__(self, "next_state", next_state)
        object.__setattr__(self, "cost", cost)
        object.__setattr__(self, "likelihood", likelihood)
        object.__setattr__(self, "channel", channel)
        object.__setattr__(self, "discount", float(self.discount))

    @property
    def n_states(self) -> int:
        return self.admissible.shape[0]

    @property
    def n_actions(self) -> int:
        return self.admissible.shape[1]

    @property
    def n_xi(self) -> int:
        return self.likelihood.shape[1]

    @property
    def n_thetas(self) -> int:
        return self.likelihood.shape[2]

    @property
    def n_channels(self) -> int:
        return self.likelihood.shape[0]

    def actions(self, s: int) -> np.ndarray:
        return np.flatnonzero(self.admissible[s])

    def check_action(self, s: int, a: int) -> None:
        if not (0 <= s < self.n_states):
            raise ModelError(f"state {s} out of range")
        if not (0 <= a < self.n_actions) or not self.admissible[s, a]:
            raise InadmissibleActionError(f"action {a} is not admissible in state {s}")

    def xi_distribution(self, s: int, a: int) -> np.ndarray:
        """(X, T) likelihood table governing the pair (s, a)."""
        return self.likelihood[self.channel[s, a]]


class ParametricFamily(Protocol):
    """A model together with the dataset likelihood over its parameter grid."""

    spec: ModelSpec

    def log_likelihood(self, dataset: pd.DataFrame) -> np.ndarray: ...


# ---------------------------------------------------------------------------- #
# Beliefs
# ---------------------------------------------------------------------------- #


def as_belief(probs, n_thetas: int | None = None) -> np.ndarray:
    """Validate a probability vector over the parameter grid (tiny negatives clamp to 0)."""
    mu = np.array(probs, dtype=float).ravel()
    if n_thetas is not None and mu.shape[0] != n_thetas:
        raise ModelError(f"belief has {mu.shape[0]} entries, expected {n_thetas}")
    if not np.all(np.isfinite(mu)):
        raise ModelError("belief contains non-finite entries")
    if np.any(mu < -CLAMP_TOL):
        raise ModelError(f"belief has negative mass {mu.min():.3g}")
    mu = np.maximum(mu, 0.0)
    total = mu.sum()
    if abs(total - 1.0) > BELIEF_SUM_TOL:
        raise ModelError(f"belief sums to {total:.12g}")
    return mu


def corner(n_thetas: int, index: int) -> np.ndarray:
    mu = np.zeros(n_thetas)
    mu[index] = 1.0
    return mu


@dataclass(frozen=True, eq=False)
class AugmentedState:
    """The (s, mu) pair planning is defined on."""

    state: int
    belief: np.ndarray

    @classmethod
    def of(cls, spec: ModelSpec, state: int, belief) -> "AugmentedState":
        if not (0 <= state < spec.n_states):
            raise ModelError(f"state {state} out of range")
        return cls(state=int(state), belief=as_belief(belief, spec.n_thetas))


# ---------------------------------------------------------------------------- #
# Validation and derived quantities
# ---------------------------------------------------------------------------- #


@dataclass(frozen=True)
class Violation:
    kind: str
    message: str


def validate_model(spec: ModelSpec) -> list[Violation]:
    """Every invariant violation with its location; an empty list means valid."""
    found: list[Violation] = []

    if not (0.0 <= spec.discount < 1.0):
        found.append(Violation("discount", f"discount {spec.discount} outside [0, 1)"))

    for s in np.flatnonzero(~spec.admissible.any(axis=1)):
        found.append(Violation("no-action", f"state {s} has no admissible action"))

    for k, x, t in zip(*np.nonzero(spec.likelihood < 0), strict=True):
        found.append(Violation("negative-likelihood", f"f(xi={x}; theta{t}) < 0 in channel {k}"))
    sums = spec.likelihood.sum(axis=1)
    for k, t in zip(*np.nonzero(np.abs(sums - 1.0) > NORMALIZATION_TOL), strict=True):
        found.append(
            Violation(
                "normalization",
                f"f(.; theta{t}) sums to {sums[k, t]:.12g} in channel {k}",
            )
        )

    mask = np.broadcast_to(spec.admissible[:, :, None], spec.cost.shape)
    for s, a, x in zip(*np.nonzero(mask & ~np.isfinite(spec.cost)), strict=True):
        found.append(Violation("non-finite-cost", f"C({s}, {a}, xi={x}) is not finite"))
    for s, a, x in zip(*np.nonzero(mask & (spec.cost < 0)), strict=True):
        found.append(Violation("negative-cost", f"C({s}, {a}, xi={x}) = {spec.cost[s, a, x]:.6g}"))
    out_of_range = (spec.next_state < 0) | (spec.next_state >= spec.n_states)
    for s, a, x in zip(*np.nonzero(mask & out_of_range), strict=True):
        found.append(
            Violation("transition-range", f"g({s}, {a}, xi={x}) = {spec.next_state[s, a, x]}")
        )

    if found:
        logger.warning(f"Model {spec.name}: {len(found)} invariant violation(s)")
    return found


def expected_cost(spec: ModelSpec, s: int, a: int, theta_idx: int) -> float:
    """C(s, a, theta) = sum over xi of f(xi; theta) C(s, a, xi)."""
    spec.check_action(s, a)
    return float(spec.cost[s, a] @ spec.xi_distribution(s, a)[:, theta_idx])


def transition_prob(spec: ModelSpec, s: int, a: int, theta_idx: int) -> np.ndarray:
    """P(s' | s, a, theta), marginalizing the outcomes that share a destination."""
    spec.check_action(s, a)
    return np.bincount(
        spec.next_state[s, a],
        weights=spec.xi_distribution(s, a)[:, theta_idx],
        minlength=spec.n_states,
    )


def expected_costs(spec: ModelSpec) -> np.ndarray:
    """(S, A, T) table of expected one-step costs; inadmissible pairs are +inf."""
    table = np.einsum("sax,saxt->sat", spec.cost, spec.likelihood[spec.channel])
    table[~spec.admissible] = np.inf
    return table


def transition_matrix(spec: ModelSpec, theta_idx: int) -> np.ndarray:
    """(S, A, S) transition probabilities under one parameter point."""
    probs = spec.likelihood[spec.channel][:, :, :, theta_idx]
    out = np.zeros((spec.n_states, spec.n_actions, spec.n_states))
    s_idx, a_idx, _ = np.indices(spec.next_state.shape)
    np.add.at(out, (s_idx, a_idx, spec.next_state), probs)
    return out


def max_cost(spec: ModelSpec) -> float:
    return float(spec.cost[spec.admissible].max())


def value_upper_bound(spec: ModelSpec) -> float:
    """C_max / (1 - gamma): a bound on every discounted value."""
    return max_cost(spec) / (1.0 - spec.discount)


def absorbing_states(spec: ModelSpec) -> np.ndarray:
    """States every admissible action keeps in place at zero cost."""
    stays = np.all(spec.next_state == np.arange(spec.n_states)[:, None, None], axis=2)
    free = np.all(spec.cost == 0.0, axis=2)
    return np.all(~spec.admissible | (stays & free), axis=1)


# ---------------------------------------------------------------------------- #
# JSON documents
# ---------------------------------------------------------------------------- #


class ModelDocument(BaseModel):
    name: str
    discount: float
    thetas: list[list[float]]
    param_names: list[str]
    block_index: list[list[int]]
    block_names: list[str]
    block_sizes: list[int]
    admissible: list[list[bool]]
    next_state: list[list[list[int]]]
    cost: list[list[list[float]]]
    likelihood: list[list[list[float]]]
    channel: list[list[int]]
    state_labels: list[str] = []
    action_labels: list[str] = []
    xi_labels: list[str] = []


def to_document(spec: ModelSpec) -> ModelDocument:
    p = spec.params
    return ModelDocument(
        name=spec.name,
        discount=spec.discount,
        thetas=p.thetas.tolist(),
        param_names=list(p.names),
        block_index=p.block_index.tolist(),
        block_names=list(p.block_names),
        block_sizes=list(p.block_sizes),
        admissible=spec.admissible.tolist(),
        next_state=spec.next_state.tolist(),
        cost=spec.cost.tolist(),
        likelihood=spec.likelihood.tolist(),
        channel=spec.channel.tolist(),
        state_labels=list(spec.state_labels),
        action_labels=list(spec.action_labels),
        xi_labels=list(spec.xi_labels),
    )


def from_document(doc: ModelDocument) -> ModelSpec:
    params = ParamSpace(
        thetas=np.array(doc.thetas),
        names=tuple(doc.param_names),
        block_index=np.array(doc.block_index, dtype=int),
        block_names=tuple(doc.block_names),
        block_sizes=tuple(doc.block_sizes),
    )
    return ModelSpec(
        params=params,
        admissible=np.array(doc.admissible, dtype=bool),
        next_state=np.array(doc.next_state, dtype=int),
        cost=np.array(doc.cost, dtype=float),
        likelihood=np.array(doc.likelihood, dtype=float),
        discount=doc.discount,
        channel=np.array(doc.channel, dtype=int),
        name=doc.name,
        state_labels=tuple(doc.state_labels),
        action_labels=tuple(doc.action_labels),
        xi_labels=tuple(doc.xi_labels),
    )


def save_model(spec: ModelSpec, path: Path) -> None:
    Path(path).write_text(to_document(spec).model_dump_json())
    logger.info("Model %s written to %s", spec.name, path)


def load_model(path: Path) -> ModelSpec:
    return from_document(ModelDocument.model_validate_json(Path(path).read_text()))
