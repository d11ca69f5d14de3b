#!/usr/bin/env python3
"""
Build an environment from a JSON config and report its size and model diagnostics.

Usage:
    uv run python scripts/check_config.py pathplanning configs/pathplanning_desk.json
    uv run python scripts/check_config.py inventory configs/inventory_desk.json
"""

import json
import logging
import os
import sys

sys.path.append(os.getcwd())

from src.core.envs import build_environment
from src.core.model import max_cost, validate_model

logging.basicConfig(
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    level=logging.INFO,
)
logger = logging.getLogger(__name__)


def check(kind: str, path: str) -> bool:
    with open(path) as fh:
        document = json.load(fh)
    env = build_environment(kind, document)
    spec = env.spec

    print(f"Model: {spec.name}")
    print(f"  states:      {spec.n_states}")
    print(f"  actions:     {spec.n_actions} ({int(spec.admissible.sum())} admissible pairs)")
    print(f"  outcomes:    {spec.n_xi} over {spec.n_channels} channel(s)")
    print(f"  parameters:  {spec.n_thetas} grid points")
    print(f"  true theta:  {spec.params.thetas[env.true_index].tolist()}")
    print(f"  max cost:    {max_cost(spec):.4f}, discount {spec.discount}")

    problems = validate_model(spec)
    if problems:
        for violation in problems:
            print(f"❌ {violation.kind}: {violation.message}")
        return False
    print("✅ Model passes validation")
    return True


if __name__ == "__main__":
    if len(sys.argv) != 3:
        print(__doc__)
        sys.exit(2)
    sys.exit(0 if check(sys.argv[1], sys.argv[2]) else 1)
