import json
import math
import os
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from pydantic import ValidationError

from src.core.planner import BeliefPolicy, abdcp
from src.core.risk import RiskSpec
from src.harness import experiment
from src.harness.experiment import (
    ExperimentConfig,
    empirical_cvar,
    evaluate_policy,
    histograms,
    load_experiment,
    make_environment,
    replication_seeds,
    run_experiment,
    run_replication,
    simulate_episode,
    summarize,
)

CORRIDOR = {"road_map": ["LL"], "goal": [0, 1], "rate_grid": {}, "accident_grid": {}, "bins": 2}
ALL_METHODS = ["abdcp-exp", "abdcp-cvar(0.95)", "drmdp", "nominal"]
TIME_COLUMNS = ["time_mean", "time_se"]
CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def corridor_experiment(**overrides) -> ExperimentConfig:
    settings = {
        "environment": "pathplanning",
        "environment_overrides": CORRIDOR,
        "methods": ALL_METHODS,
        "dataset_size": 5,
        "replications": 2,
        "epsilon": 0.1,
        "max_outer": 5,
        "seed": 3,
    }
    settings.update(overrides)
    return ExperimentConfig(**settings)


def move_right(s, mu):
    return 3


# ============================================================================
# Configuration
# ============================================================================


def test_unknown_method_rejected():
    with pytest.raises(ValidationError, match="unknown methods: greedy"):
        corridor_experiment(methods=["abdcp-exp", "greedy"])


def test_empty_methods_and_bad_counts():
    with pytest.raises(ValidationError):
        corridor_experiment(methods=[])
    with pytest.raises(ValidationError):
        corridor_experiment(replications=0)
    with pytest.raises(ValidationError):
        corridor_experiment(eta=0.0)


def test_load_experiment_resolves_environment_path(tmp_path):
    (tmp_path / "envs").mkdir()
    (tmp_path / "envs" / "corridor.json").write_text(json.dumps(CORRIDOR))
    path = tmp_path / "experiment.json"
    path.write_text(json.dumps({"environment_config": "envs/corridor.json", "seed": 5}))
    cfg = load_experiment(path)
    assert cfg.environment_config == str(tmp_path / "envs" / "corridor.json")
    assert make_environment(cfg).spec.n_states == 2


def test_overrides_win_over_environment_file(tmp_path):
    env_path = tmp_path / "corridor.json"
    env_path.write_text(json.dumps(CORRIDOR))
    cfg = corridor_experiment(
        environment_config=str(env_path), environment_overrides={"discount": 0.5}
    )
    document = cfg.environment_document()
    assert document["discount"] == 0.5
    assert document["road_map"] == ["LL"]


# ============================================================================
# Episodes
# ============================================================================


def test_episode_ends_at_goal(corridor, rng):
    cost, length = simulate_episode(corridor, move_right, np.array([1.0]), 500, rng)
    assert length >= 1
    assert cost > 0.0


def test_episode_respects_horizon(corridor, rng):
    """With one step allowed the episode stops even when an accident stalls the vehicle."""
    _, length = simulate_episode(corridor, move_right, np.array([1.0]), 1, rng)
    assert length == 1


def test_evaluate_policy_is_seeded(corridor):
    first = evaluate_policy(corridor, move_right, np.array([1.0]), episodes=4, seed=9)
    again = evaluate_policy(corridor, move_right, np.array([1.0]), episodes=4, seed=9)
    assert list(first.columns) == ["episode", "cost", "episode_length"]
    assert len(first) == 4
    pd.testing.assert_frame_equal(first, again)


def test_replication_seeds_are_stable_and_distinct():
    a = [s.generate_state(1)[0] for s in replication_seeds(2024, 0)]
    b = [s.generate_state(1)[0] for s in replication_seeds(2024, 0)]
    c = [s.generate_state(1)[0] for s in replication_seeds(2024, 1)]
    assert a == b
    assert len(set(a)) == 3
    assert a != c


def test_methods_share_the_episode_randomness():
    """The corridor has one move, so every method realizes the same cost."""
    records = run_replication(corridor_experiment(), 0)
    assert [r.method for r in records] == ALL_METHODS
    assert all(r.error == "" for r in records)
    assert len({r.cost for r in records}) == 1


def test_failed_method_is_recorded(monkeypatch):
    original = experiment.plan_method

    def flaky(method, *args, **kwargs):
        if method == "nominal":
            raise RuntimeError("no data")
        return original(method, *args, **kwargs)

    monkeypatch.setattr(experiment, "plan_method", flaky)
    records = run_replication(corridor_experiment(), 0)
    failed = [r for r in records if r.error]
    assert [r.method for r in failed] == ["nominal"]
    assert failed[0].error == "RuntimeError: no data"
    assert math.isnan(failed[0].cost)


# ============================================================================
# Summaries
# ============================================================================


def test_empirical_cvar():
    costs = np.arange(1.0, 101.0)
    assert empirical_cvar(costs, 0.8) == pytest.approx(90.5)
    assert empirical_cvar(costs, 0.95) == pytest.approx(98.0)
    assert empirical_cvar(np.array([4.0, 1.0]), 0.95) == 4.0
    assert math.isnan(empirical_cvar(np.array([]), 0.9))


def test_summarize_skips_failures():
    records = pd.DataFrame(
        {
            "method": ["a", "a", "a", "a"],
            "cost": [1.0, 2.0, 3.0, math.nan],
            "wall_time": [0.1, 0.1, 0.1, 0.0],
            "error": ["", "", "", "RuntimeError: boom"],
        }
    )
    row = summarize(records, ["a"]).iloc[0]
    assert row["mean"] == pytest.approx(2.0)
    assert row["se"] == pytest.approx(1.0 / math.sqrt(3.0))
    assert row["cvar95"] == 3.0
    assert row["failures"] == 1


def test_histograms_share_edges():
    records = pd.DataFrame(
        {"method": ["a", "a", "b", "b"], "cost": [0.0, 1.0, 2.0, 4.0], "error": [""] * 4}
    )
    hist = histograms(records, ["a", "b"], bins=4)
    assert hist["a"]["bin_lo"].tolist() == hist["b"]["bin_lo"].tolist()
    assert hist["a"]["count"].sum() == 2
    assert hist["b"]["count"].tolist() == [0, 0, 1, 1]


def test_run_experiment_writes_outputs(tmp_path):
    cfg = corridor_experiment(methods=["abdcp-cvar(0.95)", "drmdp"])
    output = run_experiment(cfg, out_dir=tmp_path)
    assert (tmp_path / "replications.csv").exists()
    assert (tmp_path / "hist_abdcp-cvar0.95.csv").exists()
    metrics = pd.read_csv(tmp_path / "metrics.csv")
    assert metrics["method"].tolist() == ["abdcp-cvar(0.95)", "drmdp"]
    assert metrics["failures"].tolist() == [0, 0]
    assert len(output.replications) == 4


def test_repeated_runs_are_identical(tmp_path):
    """Everything but the wall-time columns is fixed by the config and seed."""
    cfg = corridor_experiment(methods=["abdcp-exp", "nominal"], replications=3)
    run_experiment(cfg, out_dir=tmp_path / "first")
    run_experiment(cfg, out_dir=tmp_path / "second")
    for name, timing in (("replications.csv", ["wall_time"]), ("metrics.csv", TIME_COLUMNS)):
        first = pd.read_csv(tmp_path / "first" / name).drop(columns=timing)
        second = pd.read_csv(tmp_path / "second" / name).drop(columns=timing)
        pd.testing.assert_frame_equal(first, second)


def test_replication_row_reruns_from_its_seed_and_index(tmp_path):
    """The base seed and replication index in a row rebuild that row's cost."""
    cfg = corridor_experiment(methods=["abdcp-exp", "drmdp"], replications=3, seed=11)
    run_experiment(cfg, out_dir=tmp_path)
    rows = pd.read_csv(tmp_path / "replications.csv")
    for row in rows.itertuples():
        rerun_cfg = cfg.model_copy(update={"seed": int(row.seed)})
        rerun = run_replication(rerun_cfg, int(row.replication))
        again = next(r for r in rerun if r.method == row.method)
        assert again.cost == pytest.approx(row.cost, rel=1e-12)
        assert again.episode_length == row.episode_length


# ============================================================================
# Desk scale
# ============================================================================


@pytest.mark.slow
@pytest.mark.skipif(os.getenv("BRMDP_RUN_SLOW") != "1", reason="set BRMDP_RUN_SLOW=1")
def test_desk_scale_orderings(tmp_path):
    """
    With ten observations the CVaR planner has the lightest tail, and the
    DR-MDP baseline is no cheaper on average than the best BR-MDP planner.
    Orderings allow two standard errors of slack.
    """
    cfg = ExperimentConfig(
        environment="pathplanning",
        environment_config=str(CONFIGS / "pathplanning_desk.json"),
        methods=ALL_METHODS,
        dataset_size=10,
        replications=100,
        seed=2024,
    )
    metrics = run_experiment(cfg, out_dir=tmp_path).metrics.set_index("method")
    assert metrics["failures"].sum() == 0
    slack = 2.0 * metrics["se"].max()
    tail = metrics["cvar95"]
    assert tail["abdcp-cvar(0.95)"] < tail["nominal"]
    assert tail["abdcp-cvar(0.95)"] <= tail["abdcp-exp"] + slack
    best_planner = metrics.loc[["abdcp-exp", "abdcp-cvar(0.95)"], "mean"].min()
    assert metrics.loc["drmdp", "mean"] >= best_planner - slack
    for method in cfg.methods:
        row = metrics.loc[method]
        assert row["cvar95"] >= row["cvar80"] >= row["mean"]


@pytest.mark.slow
@pytest.mark.skipif(os.getenv("BRMDP_RUN_SLOW") != "1", reason="set BRMDP_RUN_SLOW=1")
def test_large_dataset_methods_agree(tmp_path):
    """With a thousand observations every method plays close to the true optimum."""
    cfg = ExperimentConfig(
        environment="pathplanning",
        environment_config=str(CONFIGS / "pathplanning_desk.json"),
        methods=ALL_METHODS,
        dataset_size=1000,
        replications=50,
        seed=2024,
    )
    metrics = run_experiment(cfg, out_dir=tmp_path).metrics.set_index("method")
    assert metrics["failures"].sum() == 0
    means = metrics["mean"]
    assert means.max() <= 1.05 * means.min()

    env = make_environment(cfg)
    mu1 = env.posterior_from_data(env.sample_dataset(1000, seed=7))
    result = abdcp(env.spec, RiskSpec.expectation(), env.initial_state, mu1, 0.1, 20, 20)
    simulated = evaluate_policy(
        env, BeliefPolicy.from_result(env.spec, result), mu1, episodes=2000, seed=8
    )
    assert simulated["cost"].mean() == pytest.approx(result.fsc_value, rel=0.05)
