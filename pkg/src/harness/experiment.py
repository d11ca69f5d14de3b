"""
Replicated experiments: sample a dataset, plan with every method, run one
episode on the true system, and summarize the realized discounted costs.
"""

import json
import logging
import math
import time
from collections.abc import Callable
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Literal

import numpy as np
import pandas as pd
from pydantic import BaseModel, field_validator, model_validator

from src.core.belief import ImpossibleObservationError, bayes_update
from src.core.envs import Environment, build_environment
from src.core.model import absorbing_states
from src.core.planner import BeliefPolicy, abdcp
from src.core.reference import (
    horizon_for,
    posterior_support,
    sample_support,
    solve_drmdp,
    solve_nominal,
)
from src.core.risk import RiskSpec

logger = logging.getLogger(__name__)

BASELINES = ("drmdp", "nominal")
ActFn = Callable[[int, np.ndarray], int]


def is_known_method(method: str) -> bool:
    if method in BASELINES:
        return True
    try:
        RiskSpec.from_method(method)
    except ValueError:
        return False
    return True


class ExperimentConfig(BaseModel):
    environment: Literal["pathplanning", "inventory"] = "pathplanning"
    environment_config: str | None = None
    environment_overrides: dict = {}
    methods: list[str] = ["abdcp-exp", "abdcp-cvar(0.95)", "drmdp", "nominal"]
    dataset_size: int = 10
    replications: int = 10
    eta: float = 1e-3
    seed: int = 0
    epsilon: float = 0.1
    posteriors_per_iteration: int = 20
    max_outer: int = 50
    drmdp_mode: Literal["support", "sample"] = "support"
    drmdp_samples: int = 20
    support_threshold: float = 1e-3
    hist_bins: int = 20
    out_dir: str = "results"
    trace: bool = False

    @field_validator("methods")
    @classmethod
    def _check_methods(cls, methods: list[str]) -> list[str]:
        unknown = [m for m in methods if not is_known_method(m)]
        if unknown:
            raise ValueError(f"unknown methods: {', '.join(unknown)}")
        if not methods:
            raise ValueError("need at least one method")
        return methods

    @model_validator(mode="after")
    def _check_counts(self):
        if self.replications < 1:
            raise ValueError("replications must be at least 1")
        if self.dataset_size < 0:
            raise ValueError("dataset_size must be non-negative")
        if not (0.0 < self.eta):
            raise ValueError("eta must be positive")
        return self

    def environment_document(self) -> dict:
        document: dict = {}
        if self.environment_config:
            document = json.loads(Path(self.environment_config).read_text())
        document.update(self.environment_overrides)
        return document


def load_experiment(path: Path) -> ExperimentConfig:
    """Read an experiment JSON; a relative environment path resolves against its folder."""
    path = Path(path)
    cfg = ExperimentConfig.model_validate_json(path.read_text())
    if cfg.environment_config and not Path(cfg.environment_config).is_absolute():
        resolved = path.parent / cfg.environment_config
        cfg = cfg.model_copy(update={"environment_config": str(resolved)})
    return cfg


def make_environment(cfg: ExperimentConfig) -> Environment:
    return build_environment(cfg.environment, cfg.environment_document())


@dataclass
class ReplicationRecord:
    replication: int
    method: str
    seed: int
    cost: float
    wall_time: float
    episode_length: int
    error: str = ""


# ---------------------------------------------------------------------------- #
# Episodes
# ---------------------------------------------------------------------------- #


def simulate_episode(
    env: Environment,
    policy: ActFn,
    mu1: np.ndarray,
    horizon: int,
    rng: np.random.Generator,
) -> tuple[float, int]:
    """Discounted cost and length of one episode on the true system with online belief updates."""
    spec = env.spec
    absorbing = absorbing_states(spec)
    s = env.initial_state
    mu = np.asarray(mu1, dtype=float)
    total = 0.0
    weight = 1.0
    steps = 0
    for _ in range(horizon):
        if absorbing[s]:
            break
        a = policy(s, mu)
        xi, s_next, cost = env.step(s, a, rng)
        total += weight * cost
        weight *= spec.discount
        try:
            mu = bayes_update(mu, xi, spec, int(spec.channel[s, a]))
        except ImpossibleObservationError:
            logger.debug("Outcome %d impossible under the belief, keeping it", xi)
        s = s_next
        steps += 1
    return total, steps


def plan_method(
    method: str,
    env: Environment,
    mu1: np.ndarray,
    dataset: pd.DataFrame,
    cfg: ExperimentConfig,
    rng: np.random.Generator,
    trace_path: Path | None = None,
) -> ActFn:
    """Offline planning for one method; returns the online policy."""
    spec = env.spec
    if method == "nominal":
        return solve_nominal(env, dataset).act
    if method == "drmdp":
        if cfg.drmdp_mode == "support":
            subset = posterior_support(mu1, cfg.support_threshold)
        else:
            subset = sample_support(mu1, cfg.drmdp_samples, rng)
        return solve_drmdp(spec, subset).act
    risk = RiskSpec.from_method(method)
    result = abdcp(
        spec,
        risk,
        env.initial_state,
        mu1,
        cfg.epsilon,
        cfg.posteriors_per_iteration,
        cfg.max_outer,
        trace_path=trace_path,
    )
    return BeliefPolicy.from_result(spec, result)


def replication_seeds(seed: int, rep_id: int) -> list[np.random.SeedSequence]:
    """(dataset, episode, method) seed sequences of one replication."""
    return np.random.SeedSequence([seed, rep_id]).spawn(3)


def run_replication(
    cfg: ExperimentConfig,
    rep_id: int,
    env: Environment | None = None,
    out_dir: Path | None = None,
) -> list[ReplicationRecord]:
    env = env or make_environment(cfg)
    data_seed, episode_seed, method_seed = replication_seeds(cfg.seed, rep_id)
    dataset = env.sample_dataset(cfg.dataset_size, data_seed)
    mu1 = env.posterior_from_data(dataset)
    horizon = horizon_for(env.spec, cfg.eta)
    trace_path = None
    if cfg.trace and out_dir is not None:
        trace_path = Path(out_dir) / f"trace_{rep_id}.csv"

    records = []
    for method in cfg.methods:
        started = time.perf_counter()
        try:
            policy = plan_method(
                method, env, mu1, dataset, cfg, np.random.default_rng(method_seed), trace_path
            )
            wall = time.perf_counter() - started
            cost, length = simulate_episode(
                env, policy, mu1, horizon, np.random.default_rng(episode_seed)
            )
            records.append(ReplicationRecord(rep_id, method, cfg.seed, cost, wall, length))
        except Exception as exc:
            logger.exception(f"Replication {rep_id}: method {method} failed")
            records.append(
                ReplicationRecord(
                    rep_id,
                    method,
                    cfg.seed,
                    math.nan,
                    time.perf_counter() - started,
                    0,
                    error=f"{type(exc).__name__}: {exc}",
                )
            )
    logger.info(
        f"Replication {rep_id}: "
        + ", ".join(f"{r.method}={r.cost:.3f}" for r in records if not r.error)
    )
    return records


def _replication_job(args: tuple[ExperimentConfig, int, str | None]) -> list[ReplicationRecord]:
    cfg, rep_id, out_dir = args
    return run_replication(cfg, rep_id, out_dir=Path(out_dir) if out_dir else None)


# ---------------------------------------------------------------------------- #
# Summaries
# ---------------------------------------------------------------------------- #


def empirical_cvar(costs: np.ndarray, alpha: float) -> float:
    """Mean of the ceil((1 - alpha) R) largest costs."""
    costs = np.sort(np.asarray(costs, dtype=float))[::-1]
    if len(costs) == 0:
        return math.nan
    k = max(1, math.ceil(round((1.0 - alpha) * len(costs), 9)))
    return float(costs[:k].mean())


def _mean_se(values: np.ndarray) -> tuple[float, float]:
    if len(values) == 0:
        return math.nan, math.nan
    se = float(values.std(ddof=1) / math.sqrt(len(values))) if len(values) > 1 else 0.0
    return float(values.mean()), se


def summarize(records: pd.DataFrame, methods: list[str]) -> pd.DataFrame:
    """One metrics row per method, successful replications only."""
    rows = []
    for method in methods:
        ok = records[(records["method"] == method) & (records["error"] == "")]
        costs = ok["cost"].to_numpy(dtype=float)
        mean, se = _mean_se(costs)
        time_mean, time_se = _mean_se(ok["wall_time"].to_numpy(dtype=float))
        rows.append(
            {
                "method": method,
                "mean": mean,
                "se": se,
                "cvar95": empirical_cvar(costs, 0.95),
                "cvar80": empirical_cvar(costs, 0.8),
                "time_mean": time_mean,
                "time_se": time_se,
                "failures": int(((records["method"] == method) & (records["error"] != "")).sum()),
            }
        )
    return pd.DataFrame(rows)


def histograms(records: pd.DataFrame, methods: list[str], bins: int) -> dict[str, pd.DataFrame]:
    """Bin counts per method over edges shared by all methods."""
    ok = records[records["error"] == ""]
    if ok.empty:
        return {}
    edges = np.histogram_bin_edges(ok["cost"].to_numpy(dtype=float), bins=bins)
    out = {}
    for method in methods:
        costs = ok.loc[ok["method"] == method, "cost"].to_numpy(dtype=float)
        counts, _ = np.histogram(costs, bins=edges)
        out[method] = pd.DataFrame({"bin_lo": edges[:-1], "bin_hi": edges[1:], "count": counts})
    return out


def _file_label(method: str) -> str:
    return method.replace("(", "").replace(")", "")


@dataclass
class ExperimentOutput:
    metrics: pd.DataFrame
    replications: pd.DataFrame
    histograms: dict[str, pd.DataFrame]


def run_experiment(
    cfg: ExperimentConfig, jobs: int = 1, out_dir: Path | None = None
) -> ExperimentOutput:
    """
    Run every replication, then write metrics.csv, replications.csv and
    hist_<method>.csv. Replication records collected so far are written even
    when the run is interrupted.
    """
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records: list[ReplicationRecord] = []
    columns = [f.name for f in fields(ReplicationRecord)]
    try:
        if jobs > 1:
            tasks = [(cfg, rep, str(out)) for rep in range(cfg.replications)]
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                for batch in pool.map(_replication_job, tasks):
                    records.extend(batch)
        else:
            env = make_environment(cfg)
            for rep in range(cfg.replications):
                records.extend(run_replication(cfg, rep, env, out))
    finally:
        frame = pd.DataFrame([asdict(r) for r in records], columns=columns)
        frame.to_csv(out / "replications.csv", index=False)
        if len(records) < cfg.replications * len(cfg.methods):
            logger.warning(f"Partial results: {len(records)} records written to {out}")

    metrics = summarize(frame, cfg.methods)
    metrics.to_csv(out / "metrics.csv", index=False)
    hist = histograms(frame, cfg.methods, cfg.hist_bins)
    for method, table in hist.items():
        table.to_csv(out / f"hist_{_file_label(method)}.csv", index=False)
    logger.info(f"Experiment finished: {len(records)} records in {out}")
    return ExperimentOutput(metrics=metrics, replications=frame, histograms=hist)


def evaluate_policy(
    env: Environment,
    policy: ActFn,
    mu1: np.ndarray,
    episodes: int,
    seed: int,
    eta: float = 1e-3,
) -> pd.DataFrame:
    """Simulate a fixed policy for several independent episodes."""
    horizon = horizon_for(env.spec, eta)
    rows = []
    for episode, child in enumerate(np.random.SeedSequence(seed).spawn(episodes)):
        cost, length = simulate_episode(env, policy, mu1, horizon, np.random.default_rng(child))
        rows.append({"episode": episode, "cost": cost, "episode_length": length})
    return pd.DataFrame(rows, columns=["episode", "cost", "episode_length"])
