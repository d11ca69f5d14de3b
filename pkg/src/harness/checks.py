"""
Property suite run by `brmdp oracle-check`: operator contraction and
monotonicity on closed belief grids, corner collapse to the known-parameter
MDP, one-shot Expectation LP equivalence, and the bound sandwich against the
exact finite-horizon value.
"""

import logging
from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd

from src.core.belief import BeliefSet, WeightCache
from src.core.ccp import assemble, expectation_program, solve_abdcp
from src.core.envs import build_closed_instance, build_random_instance
from src.core.lp import solve_lp
from src.core.model import ModelSpec, corner, max_cost
from src.core.planner import abdcp
from src.core.reference import (
    ClosedGrid,
    bellman_apply,
    enumerate_closed_grid,
    exact_value,
    value_iteration,
)
from src.core.risk import RiskSpec

logger = logging.getLogger(__name__)

RISKS = (RiskSpec.expectation(), RiskSpec.cvar(0.7))
SANDWICH_HORIZON = 60
CONTRACTION_STEPS = 5
FIXED_POINT_ITERATIONS = 2000


@dataclass
class CheckResult:
    check: str
    instance: int
    risk: str
    passed: bool
    detail: str


def _uniform(n: int) -> np.ndarray:
    return np.full(n, 1.0 / n)


def _fixed_point(
    grid: ClosedGrid, spec: ModelSpec, risk: RiskSpec, policy: np.ndarray | None
) -> np.ndarray:
    v = np.zeros(grid.size)
    for _ in range(FIXED_POINT_ITERATIONS):
        nxt = bellman_apply(v, grid, spec, risk, policy)
        if np.max(np.abs(nxt - v)) <= 1e-12 * max(1.0, float(np.max(np.abs(nxt)))):
            return nxt
        v = nxt
    return v


def _operator_check(
    grid: ClosedGrid,
    spec: ModelSpec,
    risk: RiskSpec,
    rng: np.random.Generator,
    policy: np.ndarray | None,
    pairs: int,
) -> tuple[bool, str]:
    def apply(v: np.ndarray) -> np.ndarray:
        return bellman_apply(v, grid, spec, risk, policy)

    fixed = _fixed_point(grid, spec, risk, policy)
    scale = max_cost(spec) / (1.0 - spec.discount)
    worst_ratio = 0.0
    worst_shrink = 0.0
    for _ in range(pairs):
        v = rng.uniform(0.0, scale, grid.size)
        w = rng.uniform(0.0, scale, grid.size)
        tv = apply(v)
        spread = float(np.max(np.abs(v - w)))
        ratio = float(np.max(np.abs(tv - apply(w)))) / spread
        worst_ratio = max(worst_ratio, ratio / spec.discount)
        if ratio > spec.discount + 1e-9:
            return False, f"pair ratio {ratio:.6f} above discount {spec.discount}"
        higher = v + rng.uniform(0.0, 1.0, grid.size) * (rng.random(grid.size) < 0.5)
        if np.any(apply(higher) < tv - 1e-12):
            return False, "raising V lowered the operator image"
        start = float(np.max(np.abs(v - fixed)))
        if start <= 1e-9:
            continue
        current = v
        for k in range(1, CONTRACTION_STEPS + 1):
            current = apply(current)
            shrink = float(np.max(np.abs(current - fixed))) / start
            worst_shrink = max(worst_shrink, shrink / spec.discount**k)
            if shrink > spec.discount**k + 1e-6:
                return False, f"after {k} steps distance shrank to {shrink:.6f}"
    return True, f"worst ratio {worst_ratio:.3g}, worst shrink {worst_shrink:.3g} (x discount)"


def check_contraction(
    spec: ModelSpec, risk: RiskSpec, rng: np.random.Generator, pairs: int = 100
) -> tuple[bool, str]:
    """
    Contraction and monotonicity of T and of T^pi for a random admissible
    policy, over `pairs` random value pairs. From each start, k applications
    must bring the distance to the operator's fixed point down by a factor of
    at most discount^k.
    """
    grid = enumerate_closed_grid(spec, [_uniform(spec.n_thetas)])
    policy = np.array(
        [rng.choice(np.flatnonzero(spec.admissible[s])) for s in grid.states], dtype=int
    )
    details = []
    for name, pol in (("T", None), ("T^pi", policy)):
        passed, detail = _operator_check(grid, spec, risk, rng, pol, pairs)
        if not passed:
            return False, f"{name}: {detail}"
        details.append(f"{name}: {detail}")
    return True, "; ".join(details)


def check_corner_collapse(spec: ModelSpec, risk: RiskSpec) -> tuple[bool, str]:
    """On corner beliefs the solved values equal the known-parameter MDP values."""
    bset = BeliefSet.initial(corner(spec.n_thetas, 0))
    outcome = solve_abdcp(assemble(bset, spec, risk))
    worst = 0.0
    for t in range(spec.n_thetas):
        exact = value_iteration(spec, t).values
        worst = max(worst, float(np.max(np.abs(outcome.values.values[:, t] - exact))))
    return worst <= 1e-5, f"max deviation {worst:.3g}"


def check_expectation_program(spec: ModelSpec, rng: np.random.Generator) -> tuple[bool, str]:
    """The procedure under Expectation matches the directly assembled LP."""
    mu = rng.dirichlet(np.ones(spec.n_thetas))
    system = assemble(BeliefSet.initial(mu), spec, RiskSpec.expectation(), WeightCache())
    direct = solve_lp(expectation_program(system))
    if not direct.ok:
        return False, f"direct LP {direct.status}"
    deviation = float(np.max(np.abs(solve_abdcp(system).values.flat - direct.x)))
    return deviation <= 1e-6, f"max deviation {deviation:.3g}"


def check_sandwich(spec: ModelSpec, risk: RiskSpec, rng: np.random.Generator) -> tuple[bool, str]:
    """Exact finite-horizon value inside [lower - delta, upper + delta]."""
    mu1 = rng.dirichlet(np.ones(spec.n_thetas))
    result = abdcp(spec, risk, 0, mu1, epsilon=1e-3, n=5, max_outer=3)
    exact = exact_value(spec, risk, 0, mu1, SANDWICH_HORIZON)
    delta = spec.discount**SANDWICH_HORIZON * max_cost(spec) / (1.0 - spec.discount) + 1e-6
    upper_ok = exact.value <= result.upper + delta
    lower_ok = not result.lower_certified or result.lower <= exact.value + delta
    detail = f"lower {result.lower:.6f} exact {exact.value:.6f} upper {result.upper:.6f}"
    return bool(upper_ok and lower_ok), detail


def run_property_suite(seed: int = 0, instances: int = 5) -> pd.DataFrame:
    """One row per (check, instance, risk); `passed` is False on violation or error."""
    results: list[CheckResult] = []

    def record(check: str, instance: int, risk: str, run, *args) -> None:
        try:
            passed, detail = run(*args)
        except Exception as exc:
            logger.exception(f"Check {check} on instance {instance} raised")
            passed, detail = False, f"{type(exc).__name__}: {exc}"
        if not passed:
            logger.warning(f"Check {check} failed on instance {instance} ({risk}): {detail}")
        results.append(CheckResult(check, instance, risk, passed, detail))

    for i in range(instances):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        closed = build_closed_instance(rng, n_states=3, n_actions=2, n_thetas=2, discount=0.9)
        plain = build_random_instance(rng, n_states=3, n_actions=2, n_xi=3, n_thetas=2)
        record("expectation-lp", i, "exp", check_expectation_program, plain, rng)
        for risk in RISKS:
            record("contraction", i, risk.label, check_contraction, closed, risk, rng)
            record("corner-collapse", i, risk.label, check_corner_collapse, plain, risk)
            record("sandwich", i, risk.label, check_sandwich, closed, risk, rng)

    frame = pd.DataFrame([asdict(r) for r in results])
    logger.info(f"Property suite: {int(frame['passed'].sum())}/{len(frame)} checks passed")
    return frame
