import json

import pandas as pd
import pytest

from src.harness.main import build_parser, main

CORRIDOR = {"road_map": ["LL"], "goal": [0, 1], "rate_grid": {}, "accident_grid": {}, "bins": 2}


@pytest.fixture
def experiment_file(tmp_path):
    path = tmp_path / "experiment.json"
    path.write_text(
        json.dumps(
            {
                "environment": "pathplanning",
                "environment_overrides": CORRIDOR,
                "methods": ["abdcp-exp", "drmdp"],
                "dataset_size": 4,
                "replications": 2,
                "epsilon": 0.1,
                "max_outer": 5,
                "out_dir": str(tmp_path / "out"),
            }
        )
    )
    return path


# ============================================================================
# Parser
# ============================================================================


def test_parser_requires_a_command():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])


def test_parser_defaults():
    args = build_parser().parse_args(["replicate", "--config", "exp.json"])
    assert args.jobs == 1
    assert args.seed is None


# ============================================================================
# Commands
# ============================================================================


def test_plan_then_evaluate(experiment_file, tmp_path):
    assert main(["plan", "--config", str(experiment_file)]) == 0
    artifact = tmp_path / "out" / "policy_exp.json"
    assert artifact.exists()

    code = main(
        ["evaluate", "--config", str(experiment_file), "--policy", str(artifact), "--episodes", "3"]
    )
    assert code == 0
    frame = pd.read_csv(tmp_path / "out" / "evaluation_exp.csv")
    assert len(frame) == 3


def test_replicate_prints_metrics(experiment_file, tmp_path, capsys):
    assert main(["replicate", "--config", str(experiment_file)]) == 0
    assert "abdcp-exp" in capsys.readouterr().out
    assert (tmp_path / "out" / "metrics.csv").exists()


def test_out_flag_overrides_config(experiment_file, tmp_path):
    other = tmp_path / "elsewhere"
    assert main(["lp-dump", "--config", str(experiment_file), "--out", str(other)]) == 0
    text = (other / "pathplanning_expectation.lp").read_text()
    assert text.startswith("NAME          expectation")


def test_oracle_check_passes(tmp_path, capsys):
    assert main(["oracle-check", "--instances", "1", "--out", str(tmp_path)]) == 0
    frame = pd.read_csv(tmp_path / "oracle.csv")
    assert len(frame) == 7
    assert frame["passed"].all()
    assert "property checks passed" in capsys.readouterr().out


def test_bad_method_override_exits_with_error(experiment_file):
    assert main(["plan", "--config", str(experiment_file), "--methods", "greedy"]) == 1


def test_missing_config_file(tmp_path):
    assert main(["plan", "--config", str(tmp_path / "missing.json")]) == 1
