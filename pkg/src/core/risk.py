"""
Parametric convex risk measures over a belief.

rho_mu(z) = inf_phi E_mu[Psi(z, phi)] for a cost vector z indexed by theta.
Shipped measures: Expectation (Psi = z) and CVaR_alpha
(Psi = phi + (z - phi)^+ / (1 - alpha)). Both are evaluated exactly by sorting.
"""

import logging
import re
from dataclasses import dataclass
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

logger = logging.getLogger(__name__)

MASS_TOL = 1e-8
_CVAR_METHOD = re.compile(r"^abdcp-cvar\((?P<alpha>[0-9.]+)\)$")


class RiskSpec(BaseModel):
    """{"kind": "expectation"} or {"kind": "cvar", "alpha": 0.95}."""

    model_config = ConfigDict(frozen=True)

    kind: Literal["expectation", "cvar"] = "expectation"
    alpha: float = 0.0

    @model_validator(mode="after")
    def _check_alpha(self):
        if self.kind == "cvar" and not (0.0 <= self.alpha < 1.0):
            raise ValueError(f"CVaR level must lie in [0, 1), got {self.alpha}")
        if self.kind == "expectation" and self.alpha != 0.0:
            raise ValueError("expectation takes no alpha")
        return self

    @classmethod
    def expectation(cls) -> "RiskSpec":
        return cls(kind="expectation")

    @classmethod
    def cvar(cls, alpha: float) -> "RiskSpec":
        return cls(kind="cvar", alpha=alpha)

    @classmethod
    def from_method(cls, method: str) -> "RiskSpec":
        """Parse `abdcp-exp` / `abdcp-cvar(0.95)`."""
        if method == "abdcp-exp":
            return cls.expectation()
        match = _CVAR_METHOD.match(method)
        if match is None:
            raise ValueError(f"not an ABDCP method: {method!r}")
        return cls.cvar(float(match.group("alpha")))

    @property
    def is_linear(self) -> bool:
        return self.kind == "expectation" or self.alpha == 0.0

    @property
    def label(self) -> str:
        return "exp" if self.kind == "expectation" else f"cvar{self.alpha:g}"


@dataclass
class RiskEval:
    """Value, smallest minimizer phi*, and the subgradient weights lambda over theta."""

    value: float
    phi_star: float
    lam: np.ndarray


@dataclass
class SubgradientCheck:
    deviation: float
    kink_detected: bool


def _check_inputs(z: np.ndarray, mu: np.ndarray) -> None:
    if z.shape != mu.shape:
        raise ValueError(f"cost vector shape {z.shape} != belief shape {mu.shape}")
    if np.isnan(z).any():
        raise ValueError("cost vector contains NaN")
    if not np.all(np.isfinite(z)):
        raise ValueError("cost vector contains infinite entries")
    if np.any(mu < -1e-12) or abs(mu.sum() - 1.0) > MASS_TOL:
        raise ValueError(f"belief is not a probability vector (sum {mu.sum():.12g})")


def rho_batch(z: np.ndarray, mu: np.ndarray, risk: RiskSpec) -> tuple[np.ndarray, np.ndarray]:
    """
    Row-wise risk values and subgradient weights.

    Args:
        z: (n, T) costs per theta
        mu: (n, T) beliefs
        risk: measure to apply

    Returns:
        (values (n,), lam (n, T)). For CVaR the weights fill the upper tail of
        z: atoms above phi* get mu / (1 - alpha), boundary atoms share the
        remaining mass in theta-index order.
    """
    z = np.asarray(z, dtype=float)
    mu = np.maximum(np.asarray(mu, dtype=float), 0.0)
    if risk.kind == "expectation":
        return np.einsum("nt,nt->n", mu, z), mu.copy()

    budget = 1.0 - risk.alpha
    # descending by z, ties in theta-index order (stable sort of -z)
    order = np.argsort(-z, axis=1, kind="stable")
    z_sorted = np.take_along_axis(z, order, axis=1)
    m_sorted = np.take_along_axis(mu, order, axis=1)
    before = np.cumsum(m_sorted, axis=1) - m_sorted
    take = np.clip(np.minimum(m_sorted, budget - before), 0.0, None)
    values = np.einsum("nt,nt->n", take, z_sorted) / budget
    lam = np.zeros_like(mu)
    np.put_along_axis(lam, order, take / budget, axis=1)
    return values, lam


def _phi_star(z: np.ndarray, mu: np.ndarray, alpha: float) -> float:
    """Left alpha-quantile of z under mu, restricted to atoms with positive mass."""
    support = np.flatnonzero(mu > 0)
    order = support[np.lexsort((support, z[support]))]
    cumulative = np.cumsum(mu[order])
    hit = np.flatnonzero(cumulative >= alpha - 1e-12)
    return float(z[order[hit[0] if len(hit) else -1]])


def rho(z, mu, risk: RiskSpec) -> RiskEval:
    """Exact risk value, smallest minimizer and subgradient selection."""
    z = np.asarray(z, dtype=float)
    mu = np.asarray(mu, dtype=float)
    _check_inputs(z, mu)
    values, lam = rho_batch(z[None], mu[None], risk)
    if risk.kind == "expectation":
        return RiskEval(value=float(values[0]), phi_star=0.0, lam=lam[0])

    mu = np.maximum(mu, 0.0)
    phi = _phi_star(z, mu, risk.alpha)
    value = phi + float(mu @ np.maximum(z - phi, 0.0)) / (1.0 - risk.alpha)
    return RiskEval(value=value, phi_star=phi, lam=lam[0])


def _has_kink(z: np.ndarray, mu: np.ndarray, lam: np.ndarray, alpha: float, h: float) -> bool:
    """Tied atoms (within 2h) that the subgradient fills to different degrees."""
    support = np.flatnonzero(mu > 0)
    saturation = lam[support] * (1.0 - alpha) / mu[support]
    for i, j in zip(*np.triu_indices(len(support), k=1), strict=True):
        if abs(z[support[i]] - z[support[j]]) <= 2 * h:
            if abs(saturation[i] - saturation[j]) > 1e-9:
                return True
            if 1e-9 < saturation[i] < 1 - 1e-9:
                return True
    return False


def rho_subgradient_check(z, mu, risk: RiskSpec, h: float = 1e-5) -> SubgradientCheck:
    """Max |central difference of rho in z_theta - lambda_theta|; kinks are skipped."""
    z = np.asarray(z, dtype=float)
    mu = np.asarray(mu, dtype=float)
    base = rho(z, mu, risk)
    if risk.kind == "expectation":
        # linear: the gradient is mu
        return SubgradientCheck(deviation=float(np.max(np.abs(base.lam - mu))), kink_detected=False)

    if _has_kink(z, mu, base.lam, risk.alpha, h):
        logger.debug("Kink at z=%s, finite differences skipped", z)
        return SubgradientCheck(deviation=0.0, kink_detected=True)

    deviation = 0.0
    for t in range(len(z)):
        step = np.zeros_like(z)
        step[t] = h
        derivative = (rho(z + step, mu, risk).value - rho(z - step, mu, risk).value) / (2 * h)
        deviation = max(deviation, abs(derivative - base.lam[t]))
    return SubgradientCheck(deviation=deviation, kink_detected=False)
