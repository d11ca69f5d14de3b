"""
Convex-concave procedure for the interpolated bilevel program.

Every constraint row (s, mu_i, a) reads

    V(s, mu_i) <= rho_{mu_i}( C(s, a, .) + gamma * sum_xi f(xi; .) sum_j w_j V(g(s, a, xi), mu_j) )

The right-hand side is convex in V. Each iteration replaces it by its affine
minorant at the current iterate (the risk subgradient lambda fixes the
parameter weights) and maximizes sum alpha V over the restricted rows. Rows
are ordered by node (s, i) and, inside a node, by action index.
"""

import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import sparse
from scipy.sparse.linalg import spsolve

from src.core.belief import BeliefSet, WeightCache, posterior_matrix
from src.core.lp import LinearProgram, solve_lp
from src.core.model import ModelSpec, expected_costs, value_upper_bound
from src.core.risk import RiskEval, RiskSpec, rho, rho_batch
from src.core.settings import SolverSettings, get_settings

logger = logging.getLogger(__name__)

TIE_TOL = 1e-12


class CcpError(RuntimeError):
    """LP failure or a non-monotone objective inside the procedure."""


@dataclass
class ValueTable:
    """V(s, mu_i) indexed by state x belief-set member."""

    values: np.ndarray

    @classmethod
    def zeros(cls, n_states: int, n_members: int) -> "ValueTable":
        return cls(values=np.zeros((n_states, n_members)))

    @property
    def flat(self) -> np.ndarray:
        return self.values.ravel()

    def at(self, s: int, member: int) -> float:
        return float(self.values[s, member])


# ---------------------------------------------------------------------------- #
# Constraint system
# ---------------------------------------------------------------------------- #


@dataclass(eq=False)
class ConstraintSystem:
    """
    Precomputed coefficients of every row.

    `weights` holds the interpolation of each one-step posterior: row
    (i * K + k) * X + xi is the weight vector of the posterior of member i
    after outcome xi on channel k. `gather` maps a row and an outcome to the
    flat position of its continuation in the (M * K * X, S) table
    `weights @ V.T`.
    """

    spec: ModelSpec
    risk: RiskSpec
    bset: BeliefSet
    row_state: np.ndarray
    row_member: np.ndarray
    row_action: np.ndarray
    row_channel: np.ndarray
    row_node: np.ndarray
    node_start: np.ndarray
    row_lookup: np.ndarray
    exp_cost: np.ndarray
    weights: sparse.csr_matrix
    gather: np.ndarray
    objective_weights: np.ndarray
    upper: float
    channel_rows: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def n_rows(self) -> int:
        return self.row_state.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.spec.n_states * self.bset.size

    @property
    def row_beliefs(self) -> np.ndarray:
        return self.bset.members[self.row_member]

    def _as_grid(self, v: np.ndarray) -> np.ndarray:
        return np.asarray(v, dtype=float).reshape(self.spec.n_states, self.bset.size)

    def continuation(self, v: np.ndarray) -> np.ndarray:
        """(R, X) interpolated next values sum_j w_j V(g(s, a, xi), mu_j)."""
        table = np.asarray(self.weights @ self._as_grid(v).T)
        return table.ravel()[self.gather]

    def row_costs(self, v: np.ndarray, u: np.ndarray | None = None) -> np.ndarray:
        """(R, T) per-parameter costs z_theta of every row at V."""
        u = self.continuation(v) if u is None else u
        z = self.exp_cost.copy()
        gamma = self.spec.discount
        for k, rows in self.channel_rows.items():
            z[rows] += gamma * (u[rows] @ self.spec.likelihood[k])
        return z

    def outcome_weights(self, lam: np.ndarray) -> np.ndarray:
        """(R, X) eta[r, xi] = sum_theta lam[r, theta] f(xi; theta)."""
        eta = np.zeros((self.n_rows, self.spec.n_xi))
        for k, rows in self.channel_rows.items():
            eta[rows] = lam[rows] @ self.spec.likelihood[k].T
        return eta

    def expand(self, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """
        Flattened (position, outcome, node column, weight) entries of the given
        rows: the sparse structure behind every linear operator built here.
        """
        n_xi = self.spec.n_xi
        m = self.bset.size
        n_channels = self.spec.n_channels
        base = (self.row_member[rows] * n_channels + self.row_channel[rows]) * n_xi
        wrow = base[:, None] + np.arange(n_xi)[None, :]
        dest = self.spec.next_state[self.row_state[rows], self.row_action[rows]]
        starts = self.weights.indptr[wrow].ravel()
        counts = self.weights.indptr[wrow + 1].ravel() - starts
        pair = np.repeat(np.arange(len(rows) * n_xi), counts)
        offsets = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        pos = np.repeat(starts, counts) + offsets
        cols = dest.ravel()[pair] * m + self.weights.indices[pos]
        return pair // n_xi, pair % n_xi, cols, self.weights.data[pos]

    def row_operator(self, eta: np.ndarray, rows: np.ndarray) -> sparse.csr_matrix:
        """(len(rows), N) operator V -> sum_xi eta[xi] sum_j w_j V(g, mu_j) for each row."""
        position, outcome, cols, w = self.expand(rows)
        data = eta[position, outcome] * w
        return sparse.csr_matrix((data, (position, cols)), shape=(len(rows), self.n_nodes))

    def node_argmin(self, values: np.ndarray, rel_tol: float = 0.0) -> np.ndarray:
        """Per node, the first row whose value is within rel_tol of the node minimum."""
        mins = np.minimum.reduceat(values, self.node_start)
        slack = rel_tol * np.maximum(1.0, np.abs(mins))
        candidates = np.flatnonzero(values <= (mins + slack)[self.row_node])
        _, first = np.unique(self.row_node[candidates], return_index=True)
        return candidates[first]


def assemble(
    bset: BeliefSet, spec: ModelSpec, risk: RiskSpec, cache: WeightCache | None = None
) -> ConstraintSystem:
    """Precompute expected costs, posterior interpolation weights and row bookkeeping."""
    cache = cache or WeightCache()
    n_states, n_xi, n_channels = spec.n_states, spec.n_xi, spec.n_channels
    m = bset.size
    used = np.unique(spec.channel[spec.admissible])

    w_rows: list[np.ndarray] = []
    w_cols: list[np.ndarray] = []
    w_vals: list[np.ndarray] = []
    for i in range(m):
        for k in used:
            posts, _ = posterior_matrix(bset.members[i], spec.likelihood[k])
            for x in range(n_xi):
                w = cache.get(posts[x], bset)
                w_rows.append(np.full(len(w.indices), (i * n_channels + k) * n_xi + x))
                w_cols.append(w.indices)
                w_vals.append(w.weights)
    weights = sparse.csr_matrix(
        (np.concatenate(w_vals), (np.concatenate(w_rows), np.concatenate(w_cols))),
        shape=(m * n_channels * n_xi, m),
    )

    states, members, actions = [], [], []
    for s in range(n_states):
        acts = spec.actions(s)
        if len(acts) == 0:
            raise CcpError(f"state {s} has no admissible action")
        states.append(np.full(m * len(acts), s))
        members.append(np.repeat(np.arange(m), len(acts)))
        actions.append(np.tile(acts, m))
    row_state = np.concatenate(states)
    row_member = np.concatenate(members)
    row_action = np.concatenate(actions)
    row_channel = spec.channel[row_state, row_action]
    row_node = row_state * m + row_member
    node_start = np.searchsorted(row_node, np.arange(n_states * m))

    row_lookup = np.full((n_states, m, spec.n_actions), -1)
    row_lookup[row_state, row_member, row_action] = np.arange(len(row_state))

    base = ((row_member * n_channels + row_channel) * n_xi)[:, None] + np.arange(n_xi)[None, :]
    gather = base * n_states + spec.next_state[row_state, row_action]

    system = ConstraintSystem(
        spec=spec,
        risk=risk,
        bset=bset,
        row_state=row_state,
        row_member=row_member,
        row_action=row_action,
        row_channel=row_channel,
        row_node=row_node,
        node_start=node_start,
        row_lookup=row_lookup,
        exp_cost=expected_costs(spec)[row_state, row_action],
        weights=weights,
        gather=gather,
        objective_weights=np.full(n_states * m, 1.0 / (n_states * m)),
        upper=value_upper_bound(spec),
        channel_rows={int(k): np.flatnonzero(row_channel == k) for k in used},
    )
    logger.debug(
        f"Assembled {system.n_rows} rows over {system.n_nodes} nodes "
        f"(weights cache {cache.hits} hits / {cache.misses} misses)"
    )
    return system


# ---------------------------------------------------------------------------- #
# Right-hand side and feasibility
# ---------------------------------------------------------------------------- #


def risk_rhs(system: ConstraintSystem, row: int, v: ValueTable) -> RiskEval:
    """Exact right-hand side of one row: value, phi* and subgradient over theta."""
    z = system.row_costs(v.values)[row]
    return rho(z, system.bset.members[system.row_member[row]], system.risk)


def max_violation(system: ConstraintSystem, v: np.ndarray) -> float:
    """Largest V(s, mu) - rho(...) over all rows (0 when every row holds)."""
    flat = np.asarray(v, dtype=float).ravel()
    values, _ = rho_batch(system.row_costs(flat), system.row_beliefs, system.risk)
    return float(max(0.0, (flat[system.row_node] - values).max()))


def expectation_program(system: ConstraintSystem) -> LinearProgram:
    """The one-shot Expectation-risk LP assembled directly from the beliefs."""
    mu = system.row_beliefs
    eta = system.outcome_weights(mu)
    rows = np.arange(system.n_rows)
    operator = system.row_operator(eta, rows)
    a_ub = -system.spec.discount * operator.toarray()
    a_ub[rows, system.row_node] += 1.0
    return LinearProgram(
        c=-system.objective_weights,
        a_ub=a_ub,
        b_ub=np.einsum("rt,rt->r", mu, system.exp_cost),
        lower=np.zeros(system.n_nodes),
        upper=np.full(system.n_nodes, system.upper),
        name="expectation",
    )


# ---------------------------------------------------------------------------- #
# Linearized subproblem
# ---------------------------------------------------------------------------- #


def _policy_iteration(
    system: ConstraintSystem,
    eta: np.ndarray,
    b: np.ndarray,
    choice: np.ndarray | None,
    settings: SolverSettings,
) -> tuple[np.ndarray, np.ndarray]:
    """Largest V with V(node) <= b_r + gamma eta_r . u_r(V) on every row (Howard iteration)."""
    gamma = system.spec.discount
    n = system.n_nodes
    identity = sparse.identity(n, format="csr")
    if choice is None:
        choice = system.node_argmin(b)
    for _ in range(settings.pi_max_iter):
        operator = system.row_operator(eta[choice], choice)
        v = np.atleast_1d(spsolve((identity - gamma * operator).tocsc(), b[choice]))
        q = b + gamma * np.einsum("rx,rx->r", eta, system.continuation(v))
        best = system.node_argmin(q)
        current = q[choice]
        better = q[best] < current - TIE_TOL * np.maximum(1.0, np.abs(current))
        if not better.any():
            return v, choice
        choice = np.where(better, best, choice)
    raise CcpError(f"policy iteration did not settle in {settings.pi_max_iter} sweeps")


def _simplex(
    system: ConstraintSystem, eta: np.ndarray, b: np.ndarray, settings: SolverSettings
) -> np.ndarray:
    rows = np.arange(system.n_rows)
    a_ub = -system.spec.discount * system.row_operator(eta, rows).toarray()
    a_ub[rows, system.row_node] += 1.0
    program = LinearProgram(
        c=-system.objective_weights,
        a_ub=a_ub,
        b_ub=b,
        lower=np.zeros(system.n_nodes),
        upper=np.full(system.n_nodes, system.upper),
        name="ccp",
    )
    solution = solve_lp(program, settings)
    if not solution.ok:
        raise CcpError(f"CCP subproblem LP {solution.status}: {solution.message}")
    return np.clip(solution.x, 0.0, system.upper)


@dataclass
class CcpTraceRow:
    iteration: int
    objective: float
    max_violation: float
    solver: str
    seconds: float


@dataclass
class CcpOutcome:
    values: ValueTable
    iterations: int
    converged: bool
    trace: list[CcpTraceRow]


def solve_abdcp(
    system: ConstraintSystem,
    v0: ValueTable | None = None,
    tol: float | None = None,
    max_iter: int | None = None,
    trace_path: Path | None = None,
    settings: SolverSettings | None = None,
) -> CcpOutcome:
    """
    Run the convex-concave procedure from v0 (zeros by default).

    Each iterate is feasible for the unrestricted rows, so the objective never
    decreases. Linear risk needs exactly one subproblem.
    """
    settings = settings or get_settings()
    tol = settings.ccp_tol if tol is None else tol
    max_iter = settings.ccp_max_iter if max_iter is None else max_iter
    shape = (system.spec.n_states, system.bset.size)
    v = np.zeros(system.n_nodes) if v0 is None else v0.values.ravel().astype(float)
    objective = float(system.objective_weights @ v)
    gamma = system.spec.discount

    method = settings.subproblem_solver
    if method == "auto":
        method = "simplex" if system.n_rows <= settings.simplex_row_limit else "policy-iteration"

    trace: list[CcpTraceRow] = []
    choice = None
    converged = False
    iteration = 0
    for iteration in range(1, max_iter + 1):
        started = time.perf_counter()
        u = system.continuation(v)
        values, lam = rho_batch(system.row_costs(v, u), system.row_beliefs, system.risk)
        eta = system.outcome_weights(lam)
        b = values - gamma * np.einsum("rx,rx->r", eta, u)

        if method == "simplex":
            v_new = _simplex(system, eta, b, settings)
        else:
            v_new, choice = _policy_iteration(system, eta, b, choice, settings)

        new_objective = float(system.objective_weights @ v_new)
        if new_objective < objective - settings.ccp_monotone_tol * max(1.0, abs(objective)):
            raise CcpError(
                f"objective fell from {objective:.12g} to {new_objective:.12g} "
                f"at iteration {iteration}"
            )
        violation = max_violation(system, v_new)
        trace.append(
            CcpTraceRow(iteration, new_objective, violation, method, time.perf_counter() - started)
        )
        logger.debug(
            "CCP iteration %d: objective %.10g, max violation %.3g", iteration, new_objective,
            violation,
        )
        change = abs(new_objective - objective)
        v, objective = v_new, new_objective
        if system.risk.is_linear or change <= tol * max(1.0, abs(objective)):
            converged = True
            break

    if not converged:
        logger.warning(f"CCP stopped at max_iter={max_iter} without meeting tol={tol}")
    if trace_path is not None:
        append_trace(trace, trace_path)
    return CcpOutcome(ValueTable(v.reshape(shape)), iteration, converged, trace)


def append_trace(trace: list[CcpTraceRow], path: Path) -> None:
    path = Path(path)
    frame = pd.DataFrame([asdict(row) for row in trace])
    frame.to_csv(path, mode="a", header=not path.exists(), index=False)
