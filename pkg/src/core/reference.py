"""
Reference solvers: exact finite-horizon belief trees, closed belief grids, and
the state-only baselines (nominal MDP and rectangular distributionally robust
MDP).
"""

import logging
import math
from collections import deque
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from typing import Literal

import numpy as np
import pandas as pd

from src.core.belief import posterior_matrix
from src.core.model import (
    ModelSpec,
    ParametricFamily,
    as_belief,
    expected_costs,
    max_cost,
    transition_matrix,
)
from src.core.risk import RiskSpec, rho_batch
from src.core.settings import get_settings

logger = logging.getLogger(__name__)

TreePolicy = Callable[[np.ndarray, np.ndarray], np.ndarray]
LeafValues = Callable[[np.ndarray, np.ndarray], np.ndarray]


class BeliefBudgetExceeded(RuntimeError):
    """Enumeration would create more belief nodes than allowed."""

    def __init__(self, nodes: int, budget: int):
        super().__init__(f"belief enumeration needs {nodes} nodes, budget is {budget}")
        self.nodes = nodes
        self.budget = budget


class MissingChildError(KeyError):
    """A reachable successor of a grid node is not part of the grid."""


# ---------------------------------------------------------------------------- #
# Belief trees
# ---------------------------------------------------------------------------- #


@dataclass
class TreeResult:
    value: float
    depth: int
    nodes: int
    truncated: bool


@dataclass
class HorizonValue:
    value: float
    truncation_bound: float
    nodes: int


def _expand_layer(spec: ModelSpec, states, beliefs, policy: TreePolicy | None):
    if policy is None:
        node, act = np.nonzero(spec.admissible[states])
    else:
        node = np.arange(len(states))
        act = np.asarray(policy(states, beliefs), dtype=int)
    table = spec.likelihood[spec.channel[states[node], act]]
    return node, act, table


def evaluate_tree(
    spec: ModelSpec,
    risk: RiskSpec,
    s: int,
    mu: np.ndarray,
    depth: int,
    *,
    policy: TreePolicy | None = None,
    leaf: LeafValues | None = None,
    node_budget: int | None = None,
    on_budget: Literal["raise", "truncate"] = "raise",
) -> TreeResult:
    """
    Nested risk value of a depth-limited belief tree rooted at (s, mu).

    Without `policy` each node minimizes over admissible actions, otherwise the
    policy picks one action per node. Leaves take `leaf(states, beliefs)` (zero
    by default). Identical (state, posterior) children of a layer share one node.
    """
    budget = node_budget or get_settings().tree_node_budget
    mu = as_belief(mu, spec.n_thetas)
    layers = [(np.array([s]), mu[None, :])]
    links = []
    total = 1
    truncated = False

    for _ in range(depth):
        states, beliefs = layers[-1]
        node, act, table = _expand_layer(spec, states, beliefs, policy)
        joint = table * beliefs[node][:, None, :]
        probs = joint.sum(axis=2)
        possible = probs > 0.0
        child_states = spec.next_state[states[node], act][possible]
        child_beliefs = joint[possible] / probs[possible][:, None]
        keys = np.column_stack([child_states, np.round(child_beliefs, 12)])
        _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
        if total + len(first) > budget:
            if on_budget == "raise":
                raise BeliefBudgetExceeded(total + len(first), budget)
            truncated = True
            break
        child = np.full(probs.shape, -1)
        child[possible] = inverse.ravel()
        links.append((node, act, child))
        layers.append((child_states[first], child_beliefs[first]))
        total += len(first)

    states, beliefs = layers[-1]
    values = np.zeros(len(states)) if leaf is None else np.asarray(leaf(states, beliefs), float)
    for (node, act, child), (states, beliefs) in zip(
        reversed(links), reversed(layers[:-1]), strict=True
    ):
        table = spec.likelihood[spec.channel[states[node], act]]
        cont = np.where(child >= 0, values[np.maximum(child, 0)], 0.0)
        outcome = spec.cost[states[node], act] + spec.discount * cont
        z = np.einsum("px,pxt->pt", outcome, table)
        evaluated, _ = rho_batch(z, beliefs[node], risk)
        values = np.full(len(states), np.inf)
        np.minimum.at(values, node, evaluated)

    if truncated:
        logger.debug(f"Belief tree truncated at depth {len(links)} with {total} nodes")
    return TreeResult(value=float(values[0]), depth=len(links), nodes=total, truncated=truncated)


def exact_value(
    spec: ModelSpec,
    risk: RiskSpec,
    s: int,
    mu: np.ndarray,
    horizon: int,
    node_budget: int | None = None,
) -> HorizonValue:
    """Optimal H-step nested risk value with zero terminal cost."""
    result = evaluate_tree(spec, risk, s, mu, horizon, node_budget=node_budget)
    bound = spec.discount**horizon * max_cost(spec) / (1.0 - spec.discount)
    return HorizonValue(value=result.value, truncation_bound=bound, nodes=result.nodes)


# ---------------------------------------------------------------------------- #
# Closed belief grids
# ---------------------------------------------------------------------------- #


@dataclass
class ClosedGrid:
    """
    Finite set of (state, belief) nodes closed under Bayes updates.

    children[n, a, xi] is the successor node, -1 for inadmissible actions and
    outcomes with zero probability.
    """

    states: np.ndarray
    beliefs: np.ndarray
    children: np.ndarray

    @property
    def size(self) -> int:
        return len(self.states)

    def index(self, s: int, mu: np.ndarray) -> int | None:
        hits = np.flatnonzero(
            (self.states == s) & np.all(np.isclose(self.beliefs, mu, atol=1e-12), axis=1)
        )
        return int(hits[0]) if len(hits) else None


def enumerate_closed_grid(
    spec: ModelSpec,
    beliefs: Sequence[np.ndarray],
    states: Sequence[int] | None = None,
    max_nodes: int = 20000,
) -> ClosedGrid:
    """Breadth-first closure of the seed nodes under every admissible action and outcome."""
    seeds_s = range(spec.n_states) if states is None else states
    index: dict[tuple[int, bytes], int] = {}
    node_states: list[int] = []
    node_beliefs: list[np.ndarray] = []
    queue: deque[int] = deque()

    def visit(s: int, mu: np.ndarray) -> int:
        key = (int(s), np.round(mu, 12).tobytes())
        found = index.get(key)
        if found is None:
            found = len(node_states)
            if found >= max_nodes:
                raise BeliefBudgetExceeded(found + 1, max_nodes)
            index[key] = found
            node_states.append(int(s))
            node_beliefs.append(np.asarray(mu, dtype=float))
            queue.append(found)
        return found

    for s in seeds_s:
        for mu in beliefs:
            visit(s, as_belief(mu, spec.n_thetas))

    edges: dict[tuple[int, int, int], int] = {}
    while queue:
        n = queue.popleft()
        s, mu = node_states[n], node_beliefs[n]
        for a in spec.actions(s):
            posts, probs = posterior_matrix(mu, spec.xi_distribution(s, a))
            for x in np.flatnonzero(probs > 0.0):
                edges[(n, int(a), int(x))] = visit(spec.next_state[s, a, x], posts[x])

    children = np.full((len(node_states), spec.n_actions, spec.n_xi), -1)
    for (n, a, x), child in edges.items():
        children[n, a, x] = child
    return ClosedGrid(
        states=np.array(node_states), beliefs=np.array(node_beliefs), children=children
    )


def bellman_apply(
    v: np.ndarray,
    grid: ClosedGrid,
    spec: ModelSpec,
    risk: RiskSpec,
    policy: np.ndarray | None = None,
) -> np.ndarray:
    """(T V) on the grid, or (T^pi V) when `policy` gives one action per node."""
    if policy is None:
        node, act = np.nonzero(spec.admissible[grid.states])
    else:
        node = np.arange(grid.size)
        act = np.asarray(policy, dtype=int)
    table = spec.likelihood[spec.channel[grid.states[node], act]]
    beliefs = grid.beliefs[node]
    probs = np.einsum("pxt,pt->px", table, beliefs)
    child = grid.children[node, act]
    missing = (probs > 0.0) & (child < 0)
    if missing.any():
        p, x = np.argwhere(missing)[0]
        raise MissingChildError(f"node {node[p]} action {act[p]} outcome {x} leaves the grid")
    cont = np.where(child >= 0, np.asarray(v, dtype=float)[np.maximum(child, 0)], 0.0)
    z = np.einsum("px,pxt->pt", spec.cost[grid.states[node], act] + spec.discount * cont, table)
    evaluated, _ = rho_batch(z, beliefs, risk)
    out = np.full(grid.size, np.inf)
    np.minimum.at(out, node, evaluated)
    return out


# ---------------------------------------------------------------------------- #
# State-only baselines
# ---------------------------------------------------------------------------- #


@dataclass
class MdpSolution:
    """State values and greedy policy of a state-only baseline."""

    values: np.ndarray
    policy: np.ndarray
    iterations: int
    theta_index: int | None = None
    support: np.ndarray | None = None

    def act(self, s: int, mu: np.ndarray | None = None) -> int:
        return int(self.policy[s])


def _robust_iteration(
    spec: ModelSpec, thetas: np.ndarray, tol: float | None, max_iter: int
) -> tuple[np.ndarray, np.ndarray, int]:
    tol = get_settings().vi_tol if tol is None else tol
    costs = expected_costs(spec)[:, :, thetas]
    transitions = np.stack([transition_matrix(spec, t) for t in thetas], axis=-1)
    v = np.zeros(spec.n_states)
    q = costs.max(axis=2)
    for sweep in range(1, max_iter + 1):
        q = (costs + spec.discount * np.einsum("sapt,p->sat", transitions, v)).max(axis=2)
        v_new = q.min(axis=1)
        delta = float(np.max(np.abs(v_new - v)))
        v = v_new
        if delta <= tol or spec.discount == 0.0:
            break
    else:
        logger.warning(f"value iteration stopped after {max_iter} sweeps (last change {delta:.3g})")
    return v, q.argmin(axis=1), sweep


def value_iteration(
    spec: ModelSpec, theta_idx: int, tol: float | None = None, max_iter: int = 100000
) -> MdpSolution:
    """Optimal risk-neutral values and policy when theta is known."""
    v, policy, sweeps = _robust_iteration(spec, np.array([theta_idx]), tol, max_iter)
    return MdpSolution(values=v, policy=policy, iterations=sweeps, theta_index=theta_idx)


def policy_values(spec: ModelSpec, policy: np.ndarray, theta_idx: int) -> np.ndarray:
    """Discounted cost of a stationary state policy under one parameter point."""
    states = np.arange(spec.n_states)
    policy = np.asarray(policy, dtype=int)
    if not spec.admissible[states, policy].all():
        raise ValueError("policy selects an inadmissible action")
    costs = expected_costs(spec)[states, policy, theta_idx]
    transitions = transition_matrix(spec, theta_idx)[states, policy]
    return np.linalg.solve(np.eye(spec.n_states) - spec.discount * transitions, costs)


def solve_nominal(family: ParametricFamily, dataset: pd.DataFrame) -> MdpSolution:
    """Plug in the maximum-likelihood parameter (smallest index on ties) and solve the MDP."""
    if dataset is None or len(dataset) == 0:
        raise ValueError("nominal planning needs a non-empty dataset")
    log_lik = np.asarray(family.log_likelihood(dataset), dtype=float)
    if not np.isfinite(log_lik).any():
        raise ValueError("every parameter gives the dataset zero likelihood")
    theta = int(np.argmax(log_lik))
    logger.info(f"Nominal MLE theta index {theta} ({family.spec.params.thetas[theta].tolist()})")
    return value_iteration(family.spec, theta)


def solve_drmdp(
    spec: ModelSpec, theta_subset: Sequence[int], tol: float | None = None, max_iter: int = 100000
) -> MdpSolution:
    """Rectangular robust values: min over actions of the worst theta in the subset."""
    subset = np.unique(np.asarray(theta_subset, dtype=int))
    if len(subset) == 0:
        raise ValueError("ambiguity set is empty")
    v, policy, sweeps = _robust_iteration(spec, subset, tol, max_iter)
    return MdpSolution(values=v, policy=policy, iterations=sweeps, support=subset)


def posterior_support(mu: np.ndarray, threshold: float | None = None) -> np.ndarray:
    """Indices whose posterior mass exceeds the threshold (the mode when none does)."""
    threshold = get_settings().support_threshold if threshold is None else threshold
    mu = np.asarray(mu, dtype=float)
    support = np.flatnonzero(mu > threshold)
    return support if len(support) else np.array([int(np.argmax(mu))])


def sample_support(mu: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Distinct parameter indices drawn from the posterior."""
    mu = np.asarray(mu, dtype=float)
    return np.unique(rng.choice(len(mu), size=n, p=mu / mu.sum()))


def horizon_for(spec: ModelSpec, eta: float) -> int:
    """Smallest H with gamma^H C_max / (1 - gamma) <= eta."""
    gamma = spec.discount
    c_max = max_cost(spec)
    if gamma == 0.0 or c_max == 0.0:
        return 1
    return max(1, math.ceil(math.log(eta * (1.0 - gamma) / c_max) / math.log(gamma)))
