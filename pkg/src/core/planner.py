"""
Outer planning loop: solve on the current belief set, read off a finite-state
controller, certify it, and grow the set with the posteriors the controller
actually reaches.
"""

import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel
from scipy import sparse
from scipy.spatial.distance import cdist

from src.core.belief import BeliefSet, InterpolationError, WeightCache, posterior_matrix
from src.core.ccp import (
    TIE_TOL,
    CcpError,
    ConstraintSystem,
    ValueTable,
    assemble,
    solve_abdcp,
)
from src.core.model import ModelSpec, as_belief
from src.core.reference import evaluate_tree, posterior_support, solve_drmdp
from src.core.risk import RiskSpec, rho_batch
from src.core.settings import SolverSettings, get_settings

logger = logging.getLogger(__name__)

StopReason = Literal["epsilon", "no-new-posteriors", "max-outer"]
SANDWICH_TOL = 1e-6


class PlannerError(RuntimeError):
    """A planning step failed; the message names the outer iteration."""


# ---------------------------------------------------------------------------- #
# Controller
# ---------------------------------------------------------------------------- #


def extract_policy(system: ConstraintSystem, v: ValueTable) -> np.ndarray:
    """(S, M) greedy action per node; near-ties go to the smallest action index."""
    z = system.row_costs(v.values)
    values, _ = rho_batch(z, system.row_beliefs, system.risk)
    rows = system.node_argmin(values, TIE_TOL)
    return system.row_action[rows].reshape(system.spec.n_states, system.bset.size)


@dataclass(eq=False)
class FSCPolicy:
    """
    Finite-state controller on the belief-set nodes n = s * M + i.

    transitions[t] is the (N, N) node transition matrix under theta_t.
    """

    actions: np.ndarray
    transitions: list[sparse.csr_matrix]
    costs: np.ndarray
    beliefs: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.costs.shape[0]

    def node(self, s: int, member: int) -> int:
        return s * self.actions.shape[1] + member

    def action(self, s: int, member: int) -> int:
        return int(self.actions[s, member])


def build_fsc(policy: np.ndarray, system: ConstraintSystem) -> FSCPolicy:
    """Controller induced by a node policy and the interpolation weights."""
    rows = system.row_lookup[
        np.repeat(np.arange(system.spec.n_states), system.bset.size),
        np.tile(np.arange(system.bset.size), system.spec.n_states),
        policy.ravel(),
    ]
    if np.any(rows < 0):
        raise PlannerError("policy selects an inadmissible action")
    position, outcome, cols, w = system.expand(rows)
    likelihood = system.spec.likelihood
    channel = system.row_channel[rows][position]
    n = system.n_nodes
    transitions = []
    for t in range(system.spec.n_thetas):
        data = likelihood[channel, outcome, t] * w
        matrix = sparse.csr_matrix((data, (position, cols)), shape=(n, n))
        sums = np.asarray(matrix.sum(axis=1)).ravel()
        if np.max(np.abs(sums - 1.0)) > 1e-8:
            raise PlannerError(f"controller rows under theta{t} do not sum to one")
        transitions.append(matrix)
    return FSCPolicy(
        actions=np.asarray(policy, dtype=int),
        transitions=transitions,
        costs=system.exp_cost[rows],
        beliefs=system.row_beliefs[rows],
    )


def evaluate_fsc(
    fsc: FSCPolicy,
    spec: ModelSpec,
    risk: RiskSpec,
    tol: float | None = None,
    max_iter: int | None = None,
) -> ValueTable:
    """Fixed point of the controller's nested-risk Bellman operator (sup-norm tol)."""
    settings = get_settings()
    tol = settings.fsc_tol if tol is None else tol
    max_iter = settings.fsc_max_iter if max_iter is None else max_iter
    gamma = spec.discount
    threshold = tol * (1.0 - gamma) / gamma if gamma > 0 else math.inf
    v = np.zeros(fsc.n_nodes)
    for _ in range(max_iter):
        cont = np.column_stack([matrix @ v for matrix in fsc.transitions])
        v_new, _ = rho_batch(fsc.costs + gamma * cont, fsc.beliefs, risk)
        delta = float(np.max(np.abs(v_new - v)))
        v = v_new
        if delta <= threshold:
            break
    else:
        logger.warning(f"FSC evaluation hit max_iter={max_iter} (last change {delta:.3g})")
    return ValueTable(v.reshape(fsc.actions.shape))


# ---------------------------------------------------------------------------- #
# Belief-set growth
# ---------------------------------------------------------------------------- #


def generate_posteriors(policy: np.ndarray, system: ConstraintSystem, n: int) -> list[np.ndarray]:
    """
    Up to n new posteriors reachable in one step under the policy.

    Candidates are scanned in (state, member, outcome) order; near-duplicates
    and existing members are dropped. When more than n remain, picks are made
    greedily by largest distance to the set plus the earlier picks.
    """
    spec, bset = system.spec, system.bset
    tol = bset.tol
    seen: set[tuple[int, int]] = set()
    candidates: list[np.ndarray] = []
    for s in range(spec.n_states):
        for i in range(bset.size):
            k = int(spec.channel[s, policy[s, i]])
            if (i, k) in seen:
                continue
            seen.add((i, k))
            posts, probs = posterior_matrix(bset.members[i], spec.likelihood[k])
            candidates.extend(posts[probs > 0.0])
    if not candidates:
        return []

    pool = np.array(candidates)
    _, first = np.unique(np.round(pool, 10), axis=0, return_index=True)
    pool = pool[np.sort(first)]
    gap = cdist(pool, bset.members).min(axis=1)
    pool, gap = pool[gap > tol], gap[gap > tol]
    if len(pool) <= n:
        return list(pool)

    picks = []
    for _ in range(n):
        j = int(np.argmax(gap))
        picks.append(j)
        gap = np.minimum(gap, cdist(pool, pool[j][None, :]).ravel())
    return [pool[j] for j in picks]


# ---------------------------------------------------------------------------- #
# Certificates
# ---------------------------------------------------------------------------- #


@dataclass
class UpperBound:
    value: float
    depth: int
    nodes: int
    truncated: bool


def certify_upper(
    spec: ModelSpec,
    risk: RiskSpec,
    policy: np.ndarray,
    bset: BeliefSet,
    s1: int,
    mu1: np.ndarray,
    leaf_values: np.ndarray,
    tail: float,
    node_budget: int | None = None,
) -> UpperBound:
    """
    Exact value of the nearest-member controller from (s1, mu1) over a
    layered belief tree, with the robust state values at the leaves.

    The tree is deep enough that the discounted leaf contribution is at most
    `tail`; the result is a valid upper bound on the optimal value.
    """
    settings = get_settings()
    budget = node_budget or settings.certify_node_budget
    gamma = spec.discount
    worst = float(np.max(leaf_values))
    if gamma == 0.0 or worst <= tail:
        depth = 1
    else:
        depth = max(1, math.ceil(math.log(tail / worst) / math.log(gamma)))

    def controller(states: np.ndarray, beliefs: np.ndarray) -> np.ndarray:
        nearest = cdist(beliefs, bset.members).argmin(axis=1)
        return policy[states, nearest]

    result = evaluate_tree(
        spec,
        risk,
        s1,
        mu1,
        depth,
        policy=controller,
        leaf=lambda states, beliefs: leaf_values[states],
        node_budget=budget,
        on_budget="truncate",
    )
    if result.truncated:
        logger.info(
            f"Upper certificate truncated at depth {result.depth}/{depth} ({result.nodes} nodes)"
        )
    return UpperBound(result.value, result.depth, result.nodes, result.truncated)


# ---------------------------------------------------------------------------- #
# Outer loop
# ---------------------------------------------------------------------------- #


@dataclass
class IterationRecord:
    outer: int
    set_size: int
    lower: float
    upper: float
    fsc_value: float
    gap: float
    ccp_iterations: int
    ccp_converged: bool
    tree_depth: int
    new_posteriors: int
    seconds: float


@dataclass(eq=False)
class AbdcpResult:
    fsc: FSCPolicy
    values: ValueTable
    fsc_values: ValueTable
    belief_set: BeliefSet
    risk: RiskSpec
    start_state: int
    start_belief: np.ndarray
    lower: float
    upper: float
    fsc_value: float
    lower_certified: bool
    history: list[IterationRecord]
    outer_iterations: int
    stop_reason: StopReason
    wall_time: float

    @property
    def gap(self) -> float:
        return self.upper - self.lower

    @property
    def policy(self) -> np.ndarray:
        return self.fsc.actions


def abdcp(
    spec: ModelSpec,
    risk: RiskSpec,
    s1: int,
    mu1: np.ndarray,
    epsilon: float,
    n: int,
    max_outer: int = 50,
    settings: SolverSettings | None = None,
    cache: WeightCache | None = None,
    trace_path: Path | None = None,
) -> AbdcpResult:
    """
    Plan from (s1, mu1) until upper - lower <= epsilon, no new posteriors
    appear twice in a row, or max_outer iterations pass.

    The lower bound is the solved value at (s1, mu1); it is a certified lower
    bound for Expectation risk only, where values are concave in the belief.
    A certified lower value above the upper certificate raises PlannerError;
    an uncertified one is logged.
    """
    if max_outer < 1:
        raise ValueError("max_outer must be at least 1")
    if epsilon <= 0 or n < 1:
        raise ValueError(f"need epsilon > 0 and n >= 1, got epsilon={epsilon}, n={n}")
    settings = settings or get_settings()
    started = time.perf_counter()
    mu1 = as_belief(mu1, spec.n_thetas)
    cache = cache or WeightCache(settings)
    bset = BeliefSet.initial(mu1, settings.dedup_tol)
    robust = solve_drmdp(spec, posterior_support(mu1, 0.0))
    tail = settings.certify_tail_fraction * epsilon
    certified = risk.is_linear

    history: list[IterationRecord] = []
    stop: StopReason = "max-outer"
    empty_rounds = 0
    for outer in range(1, max_outer + 1):
        tick = time.perf_counter()
        try:
            system = assemble(bset, spec, risk, cache)
            outcome = solve_abdcp(system, trace_path=trace_path, settings=settings)
            policy = extract_policy(system, outcome.values)
            fsc = build_fsc(policy, system)
            fsc_values = evaluate_fsc(fsc, spec, risk, settings.fsc_tol, settings.fsc_max_iter)
            start = bset.index_of(mu1)
            bound = certify_upper(
                spec, risk, policy, bset, s1, mu1, robust.values, tail, settings.certify_node_budget
            )
            lower = outcome.values.at(s1, start)
            upper = bound.value
            crossed = lower > upper + SANDWICH_TOL * max(1.0, abs(upper))
            if crossed and certified:
                raise CcpError(f"lower value {lower:.6f} exceeds upper certificate {upper:.6f}")
        except (CcpError, InterpolationError) as exc:
            raise PlannerError(f"outer iteration {outer}: {exc}") from exc

        fsc_value = fsc_values.at(s1, start)
        if crossed:
            logger.warning(
                f"Uncertified lower value {lower:.6f} exceeds upper certificate {upper:.6f}"
            )

        gap = upper - lower
        new = [] if gap <= epsilon else generate_posteriors(policy, system, n)
        history.append(
            IterationRecord(
                outer=outer,
                set_size=bset.size,
                lower=lower,
                upper=upper,
                fsc_value=fsc_value,
                gap=gap,
                ccp_iterations=outcome.iterations,
                ccp_converged=outcome.converged,
                tree_depth=bound.depth,
                new_posteriors=len(new),
                seconds=time.perf_counter() - tick,
            )
        )
        logger.info(
            f"ABDCP outer {outer}: |M|={bset.size} lower={lower:.6f} upper={upper:.6f} "
            f"gap={gap:.3g} new={len(new)}"
        )
        if gap <= epsilon:
            stop = "epsilon"
            break
        if not new:
            empty_rounds += 1
            if empty_rounds >= 2:
                stop = "no-new-posteriors"
                break
            continue
        empty_rounds = 0
        bset = bset.extend(new)

    return AbdcpResult(
        fsc=fsc,
        values=outcome.values,
        fsc_values=fsc_values,
        belief_set=system.bset,
        risk=risk,
        start_state=s1,
        start_belief=mu1,
        lower=lower,
        upper=upper,
        fsc_value=fsc_value,
        lower_certified=certified,
        history=history,
        outer_iterations=len(history),
        stop_reason=stop,
        wall_time=time.perf_counter() - started,
    )


# ---------------------------------------------------------------------------- #
# Acting from arbitrary beliefs
# ---------------------------------------------------------------------------- #


def act(
    values: np.ndarray,
    bset: BeliefSet,
    spec: ModelSpec,
    risk: RiskSpec,
    s: int,
    mu: np.ndarray,
    cache: WeightCache | None = None,
) -> int:
    """Greedy one-step lookahead through the interpolated value table."""
    cache = cache or WeightCache()
    mu = np.asarray(mu, dtype=float)
    actions = spec.actions(s)
    scores = np.empty(len(actions))
    for idx, a in enumerate(actions):
        table = spec.xi_distribution(s, a)
        posts, _ = posterior_matrix(mu, table)
        cont = np.empty(spec.n_xi)
        for x in range(spec.n_xi):
            w = cache.get(posts[x], bset)
            cont[x] = values[spec.next_state[s, a, x], w.indices] @ w.weights
        z = spec.cost[s, a] @ table + spec.discount * (cont @ table)
        scores[idx] = rho_batch(z[None, :], mu[None, :], risk)[0][0]
    best = scores.min()
    return int(actions[np.flatnonzero(scores <= best + TIE_TOL * max(1.0, abs(best)))[0]])


class BeliefPolicy:
    """Callable (s, mu) -> action backed by a solved value table."""

    def __init__(
        self,
        spec: ModelSpec,
        risk: RiskSpec,
        bset: BeliefSet,
        values: np.ndarray,
        cache: WeightCache | None = None,
    ):
        self.spec = spec
        self.risk = risk
        self.bset = bset
        self.values = np.asarray(values, dtype=float)
        self.cache = cache or WeightCache()

    def __call__(self, s: int, mu: np.ndarray) -> int:
        return act(self.values, self.bset, self.spec, self.risk, s, mu, self.cache)

    @classmethod
    def from_result(cls, spec: ModelSpec, result: AbdcpResult) -> "BeliefPolicy":
        return cls(spec, result.risk, result.belief_set, result.values.values)

    @classmethod
    def from_artifact(cls, spec: ModelSpec, artifact: "PolicyArtifact") -> "BeliefPolicy":
        if artifact.model_name != spec.name:
            logger.warning(f"Artifact planned on {artifact.model_name!r}, acting on {spec.name!r}")
        bset = BeliefSet.from_dict(artifact.belief_set)
        return cls(spec, artifact.risk, bset, np.array(artifact.values))


# ---------------------------------------------------------------------------- #
# Artifacts
# ---------------------------------------------------------------------------- #


class PolicyArtifact(BaseModel):
    """JSON form of a planning result: controller graph, value tables, gap history."""

    model_name: str
    risk: RiskSpec
    start_state: int
    start_belief: list[float]
    belief_set: dict
    actions: list[list[int]]
    values: list[list[float]]
    fsc_values: list[list[float]]
    lower: float
    upper: float
    fsc_value: float
    lower_certified: bool
    stop_reason: str
    outer_iterations: int
    wall_time: float
    history: list[dict]


def save_result(result: AbdcpResult, spec: ModelSpec, path: Path) -> PolicyArtifact:
    artifact = PolicyArtifact(
        model_name=spec.name,
        risk=result.risk,
        start_state=result.start_state,
        start_belief=result.start_belief.tolist(),
        belief_set=result.belief_set.to_dict(),
        actions=result.fsc.actions.tolist(),
        values=result.values.values.tolist(),
        fsc_values=result.fsc_values.values.tolist(),
        lower=result.lower,
        upper=result.upper,
        fsc_value=result.fsc_value,
        lower_certified=result.lower_certified,
        stop_reason=result.stop_reason,
        outer_iterations=result.outer_iterations,
        wall_time=result.wall_time,
        history=[asdict(record) for record in result.history],
    )
    Path(path).write_text(artifact.model_dump_json(indent=2))
    logger.info(f"Policy artifact written to {path}")
    return artifact


def load_artifact(path: Path) -> PolicyArtifact:
    return PolicyArtifact.model_validate_json(Path(path).read_text())
