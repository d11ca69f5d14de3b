import dataclasses

import numpy as np
import pandas as pd
import pytest

from src.core.envs import build_random_instance
from src.core.reference import (
    BeliefBudgetExceeded,
    ClosedGrid,
    MissingChildError,
    bellman_apply,
    enumerate_closed_grid,
    evaluate_tree,
    exact_value,
    horizon_for,
    policy_values,
    posterior_support,
    sample_support,
    solve_drmdp,
    solve_nominal,
    value_iteration,
)
from src.core.risk import RiskSpec

EXP = RiskSpec.expectation()


class FixedFamily:
    """Parametric family whose log-likelihood ignores the data."""

    def __init__(self, spec, log_lik):
        self.spec = spec
        self._log_lik = np.asarray(log_lik, dtype=float)

    def log_likelihood(self, dataset: pd.DataFrame) -> np.ndarray:
        return self._log_lik


# ============================================================================
# Belief trees
# ============================================================================


def test_chain_finite_horizon_values(chain):
    """Staying is cheaper than leaving for the first few steps."""
    assert evaluate_tree(chain, EXP, 0, [1.0], 1).value == pytest.approx(1.0)
    assert evaluate_tree(chain, EXP, 0, [1.0], 2).value == pytest.approx(1.9)
    assert evaluate_tree(chain, EXP, 0, [1.0], 3).value == pytest.approx(2.71)


def test_tree_with_policy_and_leaves(chain):
    def leave(states, beliefs):
        return np.ones(len(states), dtype=int)

    def stay(states, beliefs):
        return np.zeros(len(states), dtype=int)

    def leaf(states, beliefs):
        return np.full(len(states), 10.0)

    def one_step(**kwargs) -> float:
        return evaluate_tree(chain, EXP, 0, [1.0], 1, leaf=leaf, **kwargs).value

    assert one_step(policy=leave) == pytest.approx(14.0)
    assert one_step(policy=stay) == pytest.approx(10.0)
    assert one_step() == pytest.approx(10.0)


def test_exact_value_of_revealing_toy(revealing_toy):
    """Per-step expected cost 1.5 at gamma 0.5 sums to 3 (1 - 0.5^H)."""
    result = exact_value(revealing_toy, EXP, 0, [0.5, 0.5], 20)
    assert result.value == pytest.approx(3.0 * (1.0 - 0.5**20))
    assert result.truncation_bound == pytest.approx(4.0 * 0.5**20)


def test_revealing_toy_cvar_value(revealing_toy):
    result = exact_value(revealing_toy, RiskSpec.cvar(0.5), 0, [0.5, 0.5], 30)
    assert result.value == pytest.approx(4.0, abs=1e-6)


def test_identical_children_share_nodes(revealing_toy):
    """After the first step only the two corners remain in every layer."""
    result = evaluate_tree(revealing_toy, EXP, 0, [0.5, 0.5], 10)
    assert result.nodes == 1 + 2 * 10


def test_budget_raise_and_truncate(random_instance):
    with pytest.raises(BeliefBudgetExceeded) as info:
        evaluate_tree(random_instance, EXP, 0, [0.5, 0.5], 10, node_budget=5)
    assert info.value.budget == 5
    result = evaluate_tree(
        random_instance, EXP, 0, [0.5, 0.5], 10, node_budget=5, on_budget="truncate"
    )
    assert result.truncated
    assert result.depth < 10
    assert result.nodes <= 5


def test_expectation_value_is_concave_in_the_belief(rng):
    """V_H(s, t mu + (1 - t) nu) >= t V_H(s, mu) + (1 - t) V_H(s, nu) under Expectation."""
    for _ in range(20):
        spec = build_random_instance(rng)
        mu, nu = rng.dirichlet(np.ones(2), size=2)
        s = int(rng.integers(0, spec.n_states))
        at_mu = exact_value(spec, EXP, s, mu, 6).value
        at_nu = exact_value(spec, EXP, s, nu, 6).value
        for t in (0.25, 0.5, 0.75):
            mixed = exact_value(spec, EXP, s, t * mu + (1.0 - t) * nu, 6).value
            assert mixed >= t * at_mu + (1.0 - t) * at_nu - 1e-9


# ============================================================================
# Closed grids
# ============================================================================


def test_closed_grid_holds_start_and_corners(closed_instance):
    grid = enumerate_closed_grid(closed_instance, [np.array([0.5, 0.5])])
    assert grid.size <= 9
    assert {tuple(mu) for mu in grid.beliefs} <= {(0.5, 0.5), (1.0, 0.0), (0.0, 1.0)}
    assert grid.index(0, np.array([0.5, 0.5])) == 0


def test_bellman_fixed_point_matches_tree(closed_instance):
    """Iterating T on the grid agrees with the horizon-limited tree within its tail bound."""
    grid = enumerate_closed_grid(closed_instance, [np.array([0.5, 0.5])])
    risk = RiskSpec.cvar(0.7)
    v = np.zeros(grid.size)
    for _ in range(400):
        v = bellman_apply(v, grid, closed_instance, risk)
    reference = exact_value(closed_instance, risk, 0, [0.5, 0.5], 80)
    assert v[grid.index(0, np.array([0.5, 0.5]))] == pytest.approx(
        reference.value, abs=reference.truncation_bound + 1e-8
    )


def test_bellman_policy_operator_dominates(closed_instance):
    """T^pi V >= T V for any fixed policy."""
    grid = enumerate_closed_grid(closed_instance, [np.array([0.5, 0.5])])
    v = np.linspace(0.0, 1.0, grid.size)
    best = bellman_apply(v, grid, closed_instance, EXP)
    fixed = bellman_apply(v, grid, closed_instance, EXP, policy=np.zeros(grid.size, dtype=int))
    assert np.all(fixed >= best - 1e-12)


def test_bellman_rejects_leaking_grid(chain):
    grid = ClosedGrid(
        states=np.array([0]),
        beliefs=np.array([[1.0]]),
        children=np.full((1, 2, 2), -1),
    )
    with pytest.raises(MissingChildError):
        bellman_apply(np.zeros(1), grid, chain, EXP)


def test_closed_grid_budget(random_instance):
    """Generic likelihoods never close; the enumeration must stop."""
    with pytest.raises(BeliefBudgetExceeded):
        enumerate_closed_grid(random_instance, [np.array([0.5, 0.5])], max_nodes=50)


# ============================================================================
# State-only baselines
# ============================================================================


def test_value_iteration_on_chain(chain):
    solution = value_iteration(chain, 0)
    assert solution.values == pytest.approx([5.0, 0.0], abs=1e-6)
    assert solution.policy.tolist() == [1, 0]
    assert solution.act(0) == 1
    assert solution.theta_index == 0


def test_policy_values(chain):
    assert policy_values(chain, [1, 0], 0) == pytest.approx([5.0, 0.0])
    assert policy_values(chain, [0, 0], 0) == pytest.approx([10.0, 0.0])
    with pytest.raises(ValueError, match="inadmissible"):
        policy_values(chain, [0, 1], 0)


def test_robust_values_dominate_each_theta(random_instance):
    robust = solve_drmdp(random_instance, [1, 0, 1])
    assert robust.support.tolist() == [0, 1]
    for theta in range(2):
        assert np.all(robust.values >= value_iteration(random_instance, theta).values - 1e-6)


def test_robust_single_theta_is_value_iteration(random_instance):
    robust = solve_drmdp(random_instance, [1])
    assert robust.values == pytest.approx(value_iteration(random_instance, 1).values)


def test_drmdp_empty_subset(random_instance):
    with pytest.raises(ValueError, match="empty"):
        solve_drmdp(random_instance, [])


def test_nominal_picks_mle_with_smallest_index_on_ties(random_instance):
    data = pd.DataFrame({"x": [1]})
    assert solve_nominal(FixedFamily(random_instance, [-2.0, -1.0]), data).theta_index == 1
    assert solve_nominal(FixedFamily(random_instance, [-1.0, -1.0]), data).theta_index == 0


def test_nominal_rejects_degenerate_inputs(random_instance):
    family = FixedFamily(random_instance, [-np.inf, -np.inf])
    with pytest.raises(ValueError, match="non-empty"):
        solve_nominal(family, pd.DataFrame({"x": []}))
    with pytest.raises(ValueError, match="zero likelihood"):
        solve_nominal(family, pd.DataFrame({"x": [1]}))


# ============================================================================
# Supports and horizons
# ============================================================================


def test_posterior_support():
    mu = np.array([0.5, 0.4995, 0.0005])
    assert posterior_support(mu, 1e-3).tolist() == [0, 1]
    assert posterior_support(mu, 0.9).tolist() == [0]


def test_sample_support_on_corner(rng):
    assert sample_support(np.array([0.0, 1.0, 0.0]), 10, rng).tolist() == [1]


def test_horizon_for(chain):
    """C_max = 10, gamma = 0.95 and eta = 1e-3 need 238 steps."""
    spec = dataclasses.replace(chain, cost=chain.cost * 2.0, discount=0.95)
    assert horizon_for(spec, 1e-3) == 238
    assert horizon_for(dataclasses.replace(chain, discount=0.0), 1e-3) == 1
