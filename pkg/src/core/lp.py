"""
Dense revised simplex.

Solves   min c.x   s.t.   A_ub x <= b_ub,   A_eq x = b_eq,   lo <= x <= hi

with a two-phase method. Pricing is Dantzig's rule until a run of degenerate
pivots trips the Bland switch; ratio-test ties always go to the smallest basic
index, so identical inputs give identical pivots.
"""

import logging
from dataclasses import dataclass
from enum import StrEnum
from pathlib import Path

import numpy as np

from src.core.settings import SolverSettings, get_settings

logger = logging.getLogger(__name__)


class LPStatus(StrEnum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    FAILED = "failed"


@dataclass
class LinearProgram:
    c: np.ndarray
    a_ub: np.ndarray | None = None
    b_ub: np.ndarray | None = None
    a_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    name: str = "lp"

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).ravel()
        n = self.c.shape[0]
        self.a_ub, self.b_ub = self._rows(self.a_ub, self.b_ub, n, "inequality")
        self.a_eq, self.b_eq = self._rows(self.a_eq, self.b_eq, n, "equality")
        self.lower = np.zeros(n) if self.lower is None else np.asarray(self.lower, float).ravel()
        if self.upper is None:
            self.upper = np.full(n, np.inf)
        self.upper = np.asarray(self.upper, float).ravel()
        if self.lower.shape != (n,) or self.upper.shape != (n,):
            raise ValueError("bounds must have one entry per variable")
        for name, arr in [("c", self.c), ("A_ub", self.a_ub), ("b_ub", self.b_ub),
                          ("A_eq", self.a_eq), ("b_eq", self.b_eq)]:
            if np.isnan(arr).any():
                raise ValueError(f"NaN coefficient in {name}")
        if np.isnan(self.lower).any() or np.isnan(self.upper).any():
            raise ValueError("NaN bound")
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound above upper bound")

    @staticmethod
    def _rows(a, b, n: int, kind: str) -> tuple[np.ndarray, np.ndarray]:
        if a is None:
            return np.zeros((0, n)), np.zeros(0)
        a = np.atleast_2d(np.asarray(a, dtype=float))
        b = np.asarray(b, dtype=float).ravel()
        if a.shape[1] != n or a.shape[0] != b.shape[0]:
            raise ValueError(f"{kind} rows: A is {a.shape}, b has {b.shape[0]} entries, n={n}")
        return a, b

    @property
    def n_vars(self) -> int:
        return self.c.shape[0]


@dataclass
class LPSolution:
    status: LPStatus
    x: np.ndarray | None = None
    objective: float = float("nan")
    iterations: int = 0
    duals_ub: np.ndarray | None = None
    duals_eq: np.ndarray | None = None
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.status == LPStatus.OPTIMAL


# ---------------------------------------------------------------------------- #
# Standard form
# ---------------------------------------------------------------------------- #


@dataclass
class _StandardForm:
    """min c.y, A y = b, y >= 0 with b >= 0; x = offset + transform @ y[:n_struct]."""

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    n_struct: int
    transform: np.ndarray
    offset: np.ndarray
    basis: list[int]
    needs_artificial: list[int]
    row_scale: np.ndarray
    row_sign: np.ndarray
    n_ub: int
    n_bound: int


def _standardize(p: LinearProgram) -> _StandardForm:
    n = p.n_vars
    columns: list[np.ndarray] = []
    offset = np.zeros(n)
    bound_rows: list[tuple[int, float]] = []
    for j in range(n):
        lo, hi = p.lower[j], p.upper[j]
        unit = np.zeros(n)
        unit[j] = 1.0
        if np.isfinite(lo):
            offset[j] = lo
            columns.append(unit)
            if np.isfinite(hi):
                bound_rows.append((len(columns) - 1, hi - lo))
        elif np.isfinite(hi):
            offset[j] = hi
            columns.append(-unit)
        else:
            columns.append(unit)
            columns.append(-unit)
    transform = np.column_stack(columns) if columns else np.zeros((n, 0))
    n_struct = transform.shape[1]

    a_ub = p.a_ub @ transform
    b_ub = p.b_ub - p.a_ub @ offset
    a_bound = np.zeros((len(bound_rows), n_struct))
    b_bound = np.zeros(len(bound_rows))
    for i, (col, width) in enumerate(bound_rows):
        a_bound[i, col] = 1.0
        b_bound[i] = width
    a_eq = p.a_eq @ transform
    b_eq = p.b_eq - p.a_eq @ offset

    a_in = np.vstack([a_ub, a_bound])
    b_in = np.concatenate([b_ub, b_bound])
    m_in, m_eq = a_in.shape[0], a_eq.shape[0]
    m = m_in + m_eq

    a = np.zeros((m, n_struct + m_in))
    a[:m_in, :n_struct] = a_in
    a[:m_in, n_struct:] = np.eye(m_in)
    a[m_in:, :n_struct] = a_eq
    b = np.concatenate([b_in, b_eq])

    scale = np.abs(a).max(axis=1) if m else np.zeros(0)
    scale[scale == 0] = 1.0
    sign = np.where(b < 0, -1.0, 1.0)
    a = a * (sign / scale)[:, None]
    b = b * sign / scale

    basis: list[int] = []
    needs: list[int] = []
    for i in range(m):
        if i < m_in and sign[i] > 0:
            basis.append(n_struct + i)
        else:
            basis.append(-1)
            needs.append(i)

    c = np.concatenate([transform.T @ p.c, np.zeros(m_in)])
    return _StandardForm(
        a=a, b=b, c=c, n_struct=n_struct, transform=transform, offset=offset,
        basis=basis, needs_artificial=needs, row_scale=scale, row_sign=sign,
        n_ub=p.a_ub.shape[0], n_bound=len(bound_rows),
    )


# ---------------------------------------------------------------------------- #
# Simplex core
# ---------------------------------------------------------------------------- #


class _Breakdown(Exception):
    pass


@dataclass
class _Tableau:
    a: np.ndarray
    b: np.ndarray
    basis: np.ndarray
    b_inv: np.ndarray
    x_b: np.ndarray
    iterations: int = 0

    def refactor(self) -> None:
        try:
            self.b_inv = np.linalg.inv(self.a[:, self.basis])
        except np.linalg.LinAlgError as exc:
            raise _Breakdown(f"singular basis after {self.iterations} iterations") from exc
        self.x_b = self.b_inv @ self.b

    def pivot(self, enter: int, leave: int, direction: np.ndarray, step: float) -> None:
        row = self.b_inv[leave] / direction[leave]
        self.b_inv -= np.outer(direction, row)
        self.b_inv[leave] = row
        self.x_b -= step * direction
        self.x_b[leave] = step
        self.basis[leave] = enter


def _run_simplex(
    tab: _Tableau, cost: np.ndarray, allowed: np.ndarray, settings: SolverSettings
) -> LPStatus:
    feas_tol = settings.lp_tol
    price_tol = settings.lp_pricing_tol
    degenerate_run = 0
    use_bland = False

    while True:
        if tab.iterations >= settings.lp_max_iter:
            raise _Breakdown(f"iteration cap {settings.lp_max_iter} reached")
        if tab.iterations and tab.iterations % settings.lp_refactor_every == 0:
            tab.refactor()

        y = cost[tab.basis] @ tab.b_inv
        reduced = cost - y @ tab.a
        reduced[tab.basis] = 0.0
        reduced[~allowed] = 0.0
        candidates = np.flatnonzero(reduced < -price_tol)
        if len(candidates) == 0:
            return LPStatus.OPTIMAL

        if use_bland:
            enter = int(candidates[0])
        else:
            enter = int(candidates[np.argmin(reduced[candidates])])

        direction = tab.b_inv @ tab.a[:, enter]
        rising = np.flatnonzero(direction > feas_tol)
        if len(rising) == 0:
            return LPStatus.UNBOUNDED
        ratios = np.maximum(tab.x_b[rising], 0.0) / direction[rising]
        step = ratios.min()
        ties = rising[ratios <= step + feas_tol * 1e-3]
        leave = int(ties[np.argmin(tab.basis[ties])])

        degenerate_run = degenerate_run + 1 if step <= feas_tol else 0
        if not use_bland and degenerate_run > settings.lp_bland_after:
            logger.debug("Switching to Bland's rule after %d degenerate pivots", degenerate_run)
            use_bland = True

        tab.pivot(enter, leave, direction, step)
        tab.iterations += 1
        if not np.all(np.isfinite(tab.x_b)):
            raise _Breakdown("non-finite basic solution")


def _drive_out_artificials(tab: _Tableau, first_artificial: int, price_tol: float) -> np.ndarray:
    """Pivot zero-level artificials out of the basis; returns a mask of redundant rows."""
    redundant = np.zeros(len(tab.basis), dtype=bool)
    for pos in range(len(tab.basis)):
        if tab.basis[pos] < first_artificial:
            continue
        row = tab.b_inv[pos] @ tab.a[:, :first_artificial]
        row[tab.basis[tab.basis < first_artificial]] = 0.0
        options = np.flatnonzero(np.abs(row) > price_tol)
        if len(options) == 0:
            redundant[pos] = True
            continue
        enter = int(options[0])
        direction = tab.b_inv @ tab.a[:, enter]
        tab.pivot(enter, pos, direction, 0.0)
        tab.x_b[pos] = 0.0
    return redundant


def solve_lp(p: LinearProgram, settings: SolverSettings | None = None) -> LPSolution:
    """Two-phase revised simplex. Never raises on numerical trouble: returns FAILED."""
    settings = settings or get_settings()
    std = _standardize(p)
    m, n_cols = std.a.shape

    if m == 0:
        # only bounds: every variable sits at whichever bound the cost prefers
        if np.any(std.c < -settings.lp_pricing_tol):
            return LPSolution(status=LPStatus.UNBOUNDED, message="no rows, negative cost")
        x = std.offset.copy()
        return LPSolution(status=LPStatus.OPTIMAL, x=x, objective=float(p.c @ x),
                          duals_ub=np.zeros(p.a_ub.shape[0]), duals_eq=np.zeros(p.a_eq.shape[0]))

    n_art = len(std.needs_artificial)
    a = np.zeros((m, n_cols + n_art))
    a[:, :n_cols] = std.a
    basis = np.array(std.basis)
    for k, row in enumerate(std.needs_artificial):
        a[row, n_cols + k] = 1.0
        basis[row] = n_cols + k

    tab = _Tableau(a=a, b=std.b.copy(), basis=basis, b_inv=np.eye(m), x_b=std.b.copy())
    kept_rows = np.arange(m)
    try:
        tab.refactor()
        if n_art:
            phase_one = np.zeros(n_cols + n_art)
            phase_one[n_cols:] = 1.0
            if _run_simplex(tab, phase_one, np.ones(n_cols + n_art, dtype=bool), settings) \
                    != LPStatus.OPTIMAL:
                raise _Breakdown("phase one reported an unbounded ray")
            infeasibility = float(phase_one[tab.basis] @ tab.x_b)
            if infeasibility > settings.lp_tol * max(1.0, np.abs(std.b).max()):
                return LPSolution(
                    status=LPStatus.INFEASIBLE, iterations=tab.iterations,
                    message=f"phase one stopped at infeasibility {infeasibility:.3g}",
                )
            redundant = _drive_out_artificials(tab, n_cols, settings.lp_pricing_tol)
            if redundant.any():
                logger.debug("Dropping %d redundant row(s)", int(redundant.sum()))
                kept_rows = kept_rows[~redundant]
            tab = _Tableau(
                a=std.a[kept_rows], b=std.b[kept_rows], basis=tab.basis[~redundant],
                b_inv=np.eye(len(kept_rows)), x_b=np.zeros(len(kept_rows)),
                iterations=tab.iterations,
            )
            tab.refactor()

        status = _run_simplex(tab, std.c, np.ones(tab.a.shape[1], dtype=bool), settings)
        tab.refactor()
    except _Breakdown as exc:
        logger.warning(f"LP {p.name}: numerical breakdown ({exc})")
        return LPSolution(status=LPStatus.FAILED, iterations=tab.iterations, message=str(exc))

    if status == LPStatus.UNBOUNDED:
        return LPSolution(
            status=status, iterations=tab.iterations, message="ray found in phase two"
        )

    y_std = np.zeros(tab.a.shape[1])
    y_std[tab.basis] = np.maximum(tab.x_b, 0.0)
    x = std.offset + std.transform @ y_std[: std.n_struct]

    row_duals = np.zeros(m)
    row_duals[kept_rows] = std.c[tab.basis] @ tab.b_inv
    row_duals = row_duals * std.row_sign / std.row_scale
    n_in = std.n_ub + std.n_bound

    solution = LPSolution(
        status=LPStatus.OPTIMAL,
        x=x,
        objective=float(p.c @ x),
        iterations=tab.iterations,
        duals_ub=row_duals[: std.n_ub],
        duals_eq=row_duals[n_in:],
    )
    problem = _feasibility_problem(p, x, settings.lp_tol)
    if problem:
        logger.warning(f"LP {p.name}: {problem}")
        return LPSolution(status=LPStatus.FAILED, x=x, iterations=tab.iterations, message=problem)
    return solution


def _feasibility_problem(p: LinearProgram, x: np.ndarray, tol: float) -> str:
    """Scaled primal feasibility check; empty string when x is feasible."""
    if p.a_ub.shape[0]:
        norms = np.maximum(np.abs(p.a_ub).max(axis=1), 1.0)
        excess = (p.a_ub @ x - p.b_ub) / norms
        if excess.max() > tol * 10:
            return f"inequality row {int(excess.argmax())} violated by {excess.max():.3g}"
    if p.a_eq.shape[0]:
        norms = np.maximum(np.abs(p.a_eq).max(axis=1), 1.0)
        gap = np.abs(p.a_eq @ x - p.b_eq) / norms
        if gap.max() > tol * 10:
            return f"equality row {int(gap.argmax())} off by {gap.max():.3g}"
    if np.any(x < p.lower - tol * 10) or np.any(x > p.upper + tol * 10):
        return "bound violated"
    return ""


# ---------------------------------------------------------------------------- #
# Text dump
# ---------------------------------------------------------------------------- #


def dump_lp(p: LinearProgram, path: Path | None = None) -> str:
    """MPS-like listing of the program; written to `path` when given."""
    lines = [f"NAME          {p.name}", "ROWS", " N  COST"]
    lines += [f" L  U{i}" for i in range(p.a_ub.shape[0])]
    lines += [f" E  E{i}" for i in range(p.a_eq.shape[0])]
    lines.append("COLUMNS")
    for j in range(p.n_vars):
        if p.c[j] != 0:
            lines.append(f"    X{j:<8} COST      {p.c[j]!r}")
        for i in np.flatnonzero(p.a_ub[:, j]):
            lines.append(f"    X{j:<8} U{i:<8} {p.a_ub[i, j]!r}")
        for i in np.flatnonzero(p.a_eq[:, j]):
            lines.append(f"    X{j:<8} E{i:<8} {p.a_eq[i, j]!r}")
    lines.append("RHS")
    lines += [f"    RHS       U{i:<8} {v!r}" for i, v in enumerate(p.b_ub) if v != 0]
    lines += [f"    RHS       E{i:<8} {v!r}" for i, v in enumerate(p.b_eq) if v != 0]
    lines.append("BOUNDS")
    for j in range(p.n_vars):
        lo, hi = p.lower[j], p.upper[j]
        if not np.isfinite(lo) and not np.isfinite(hi):
            lines.append(f" FR BND       X{j}")
            continue
        if np.isfinite(lo) and lo != 0:
            lines.append(f" LO BND       X{j:<8} {lo!r}")
        if not np.isfinite(lo):
            lines.append(f" MI BND       X{j}")
        if np.isfinite(hi):
            lines.append(f" UP BND       X{j:<8} {hi!r}")
    lines.append("ENDATA")
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text
