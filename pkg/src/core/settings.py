from functools import lru_cache
from typing import Literal

from pydantic_settings import BaseSettings, SettingsConfigDict


class SolverSettings(BaseSettings):
    """Numerical knobs shared by the solvers. Override with BRMDP_* env vars."""

    model_config = SettingsConfigDict(env_prefix="BRMDP_", env_file=".env", extra="ignore")

    # ---- LP ---- #
    lp_tol: float = 1e-7
    lp_pricing_tol: float = 1e-9
    lp_bland_after: int = 50
    lp_refactor_every: int = 40
    lp_max_iter: int = 20_000

    # ---- Beliefs ---- #
    dedup_tol: float = 1e-9

    # ---- CCP ---- #
    ccp_tol: float = 1e-6
    ccp_max_iter: int = 100
    ccp_monotone_tol: float = 1e-8
    subproblem_solver: Literal["simplex", "policy-iteration", "auto"] = "auto"
    simplex_row_limit: int = 300
    pi_max_iter: int = 500

    # ---- Planner ---- #
    fsc_tol: float = 1e-6
    fsc_max_iter: int = 100_000
    certify_node_budget: int = 200_000
    certify_tail_fraction: float = 0.1

    # ---- Reference ---- #
    tree_node_budget: int = 500_000
    vi_tol: float = 1e-8
    support_threshold: float = 1e-3

    log_level: str = "INFO"


@lru_cache
def get_settings() -> SolverSettings:
    return SolverSettings()
