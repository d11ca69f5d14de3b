"""
Command-line entry point.

    brmdp plan --config configs/experiment_pathplanning.json --out results/
    brmdp evaluate --config configs/experiment_pathplanning.json --policy results/policy_exp.json
    brmdp replicate --config configs/experiment_pathplanning.json --jobs 4
    brmdp oracle-check --seed 7 --out results/
    brmdp lp-dump --config configs/experiment_pathplanning.json --out results/
"""

import argparse
import logging
import sys
from pathlib import Path

from dotenv import load_dotenv
from pydantic import ValidationError

from src.core.belief import BeliefSet, WeightCache
from src.core.ccp import assemble, expectation_program
from src.core.envs import ConfigError
from src.core.lp import dump_lp
from src.core.model import ModelError
from src.core.planner import BeliefPolicy, abdcp, load_artifact, save_result
from src.core.risk import RiskSpec
from src.core.settings import get_settings
from src.harness.checks import run_property_suite
from src.harness.experiment import (
    BASELINES,
    ExperimentConfig,
    evaluate_policy,
    load_experiment,
    make_environment,
    replication_seeds,
    run_experiment,
)

logger = logging.getLogger(__name__)


def _load(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_experiment(args.config)
    update: dict = {}
    if getattr(args, "seed", None) is not None:
        update["seed"] = args.seed
    if getattr(args, "methods", None):
        update["methods"] = [m.strip() for m in args.methods.split(",") if m.strip()]
    if getattr(args, "out", None) is not None:
        update["out_dir"] = str(args.out)
    # re-validate so overridden methods are checked too
    return ExperimentConfig.model_validate({**cfg.model_dump(), **update})


def _initial_belief(cfg: ExperimentConfig, env):
    data_seed, _, _ = replication_seeds(cfg.seed, 0)
    return env.posterior_from_data(env.sample_dataset(cfg.dataset_size, data_seed))


def cmd_plan(args: argparse.Namespace) -> int:
    cfg = _load(args)
    env = make_environment(cfg)
    mu1 = _initial_belief(cfg, env)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for method in cfg.methods:
        if method in BASELINES:
            logger.info(f"Skipping baseline {method}: plan only runs ABDCP methods")
            continue
        risk = RiskSpec.from_method(method)
        result = abdcp(
            env.spec,
            risk,
            env.initial_state,
            mu1,
            cfg.epsilon,
            cfg.posteriors_per_iteration,
            cfg.max_outer,
        )
        save_result(result, env.spec, out / f"policy_{risk.label}.json")
        logger.info(
            f"{method}: lower {result.lower:.4f}, upper {result.upper:.4f}, "
            f"{result.outer_iterations} outer iterations ({result.stop_reason})"
        )
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = _load(args)
    env = make_environment(cfg)
    artifact = load_artifact(args.policy)
    policy = BeliefPolicy.from_artifact(env.spec, artifact)
    seed = cfg.seed if args.seed is None else args.seed
    frame = evaluate_policy(env, policy, artifact.start_belief, args.episodes, seed, cfg.eta)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out / f"evaluation_{artifact.risk.label}.csv", index=False)
    logger.info(f"Mean discounted cost over {len(frame)} episodes: {frame['cost'].mean():.4f}")
    return 0


def cmd_replicate(args: argparse.Namespace) -> int:
    cfg = _load(args)
    output = run_experiment(cfg, jobs=args.jobs)
    print(output.metrics.to_string(index=False))
    return 0


def cmd_oracle_check(args: argparse.Namespace) -> int:
    frame = run_property_suite(seed=args.seed or 0, instances=args.instances)
    out = Path(args.out or "results")
    out.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out / "oracle.csv", index=False)
    failed = frame[~frame["passed"]]
    if not failed.empty:
        logger.error(f"{len(failed)} property check(s) failed, see {out / 'oracle.csv'}")
        return 1
    print(f"✅ {len(frame)} property checks passed")
    return 0


def cmd_lp_dump(args: argparse.Namespace) -> int:
    cfg = _load(args)
    env = make_environment(cfg)
    bset = BeliefSet.initial(_initial_belief(cfg, env))
    system = assemble(bset, env.spec, RiskSpec.expectation(), WeightCache())
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{env.name}_expectation.lp"
    dump_lp(expectation_program(system), path)
    logger.info(f"Wrote {system.n_rows} rows x {system.n_nodes} columns to {path}")
    return 0


COMMANDS = {
    "plan": cmd_plan,
    "evaluate": cmd_evaluate,
    "replicate": cmd_replicate,
    "oracle-check": cmd_oracle_check,
    "lp-dump": cmd_lp_dump,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="brmdp", description="Bayesian risk MDP planner")
    parser.add_argument("--verbose", "-v", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def experiment_command(name: str, help_text: str) -> argparse.ArgumentParser:
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", type=Path, required=True, help="experiment JSON")
        cmd.add_argument("--seed", type=int, default=None)
        cmd.add_argument("--out", type=Path, default=None)
        cmd.add_argument("--methods", default=None, help="comma-separated method names")
        return cmd

    experiment_command("plan", "run ABDCP once and write policy artifacts")
    evaluate = experiment_command("evaluate", "simulate a stored policy artifact")
    evaluate.add_argument("--policy", type=Path, required=True)
    evaluate.add_argument("--episodes", type=int, default=100)
    replicate = experiment_command("replicate", "run the full replicated experiment")
    replicate.add_argument("--jobs", type=int, default=1)
    experiment_command("lp-dump", "write the one-shot Expectation LP of the initial set")

    oracle = sub.add_parser("oracle-check", help="run the reference property suite")
    oracle.add_argument("--seed", type=int, default=0)
    oracle.add_argument("--out", type=Path, default=None)
    oracle.add_argument("--instances", type=int, default=5)
    return parser


def main(argv: list[str] | None = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else getattr(logging, get_settings().log_level.upper())
    logging.basicConfig(
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s", level=level
    )
    try:
        return COMMANDS[args.command](args)
    except (ValidationError, ConfigError, ModelError, FileNotFoundError) as exc:
        logger.error(f"Configuration problem: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
