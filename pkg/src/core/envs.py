"""
Benchmark environments and small synthetic instances.

Path planning: a vehicle crosses a road grid from start to goal. Each road type
(highway, main, street, lane) has an unknown exponential travel-time rate and
an unknown accident probability; an accident keeps the vehicle in place for a
fixed delay. Travel times are discretized into equal-probability bins under a
reference rate.

Inventory: K items with separate capacities, Poisson demand with unknown
rates, holding and lost-sales penalty costs, orders up to capacity.
"""

import logging
import math
from abc import ABC, abstractmethod
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
import pandas as pd
from pydantic import BaseModel, model_validator
from scipy import stats
from scipy.special import logsumexp

from src.core.model import ModelError, ModelSpec, ParamBlock, ParamSpace

logger = logging.getLogger(__name__)

ROAD_TYPES = ("H", "M", "S", "L")
ROAD_NAMES = {"H": "highway", "M": "main", "S": "street", "L": "lane"}
MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))
MOVE_LABELS = ("up", "down", "left", "right", "stay")
STAY = 4
GOAL_CHANNEL = len(ROAD_TYPES)

DEFAULT_ROAD_MAP = [
    "HHHHHH",
    "L..M.H",
    "L..M.H",
    "LSSMSH",
    "L..M.H",
    "LLLLLH",
]


class ConfigError(ValueError):
    """Environment configuration cannot produce a valid model."""


def _seed(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------- #
# Environment protocol
# ---------------------------------------------------------------------------- #


@dataclass(eq=False)
class Environment(ABC):
    """A model plus the true system that generates data and episodes."""

    name: str
    spec: ModelSpec
    initial_state: int
    true_index: int
    columns: tuple[str, ...] = field(default=())

    @abstractmethod
    def sample_dataset(self, n: int, seed) -> pd.DataFrame: ...

    @abstractmethod
    def block_log_likelihood(self, dataset: pd.DataFrame) -> list[np.ndarray]:
        """Per parameter block, the log-likelihood of each block value."""

    def log_likelihood(self, dataset: pd.DataFrame) -> np.ndarray:
        """(T,) dataset log-likelihood; blocks are independent."""
        blocks = self.block_log_likelihood(dataset)
        index = self.spec.params.block_index
        return sum(ll[index[:, b]] for b, ll in enumerate(blocks))

    def posterior_from_data(self, dataset: pd.DataFrame, prior: np.ndarray | None = None):
        """Posterior over the grid from a uniform (or given) prior."""
        log_post = self.log_likelihood(dataset)
        if prior is not None:
            with np.errstate(divide="ignore"):
                log_post = log_post + np.log(prior)
        if not np.isfinite(log_post).any():
            raise ModelError("dataset has zero likelihood under every parameter")
        return np.exp(log_post - logsumexp(log_post))

    def step(self, s: int, a: int, rng: np.random.Generator) -> tuple[int, int, float]:
        """One transition of the true system: (xi, next state, cost)."""
        self.spec.check_action(s, a)
        probs = self.spec.xi_distribution(s, a)[:, self.true_index]
        xi = int(rng.choice(self.spec.n_xi, p=probs / probs.sum()))
        return xi, int(self.spec.next_state[s, a, xi]), float(self.spec.cost[s, a, xi])


def save_dataset(dataset: pd.DataFrame, path: Path) -> None:
    dataset.to_csv(path, index=False)


def load_dataset(path: Path) -> pd.DataFrame:
    return pd.read_csv(path)


# ---------------------------------------------------------------------------- #
# Path planning
# ---------------------------------------------------------------------------- #


class PathPlanningConfig(BaseModel):
    road_map: list[str] = DEFAULT_ROAD_MAP
    start: tuple[int, int] = (0, 0)
    goal: tuple[int, int] | None = None
    true_rate: dict[str, float] = {"H": 1.0, "M": 0.5, "S": 0.2, "L": 0.1}
    true_accident: dict[str, float] = {"H": 0.3, "M": 0.2, "S": 0.1, "L": 0.05}
    rate_grid: dict[str, list[float]] = {"L": [0.1, 0.2, 0.5]}
    accident_grid: dict[str, list[float]] = {"L": [0.05, 0.1, 0.2]}
    reference_rate: dict[str, float] = {}
    accident_delay: float = 10.0
    bins: int = 4
    discount: float = 0.95
    max_states: int = 2500

    @model_validator(mode="after")
    def _check(self):
        if self.bins < 2:
            raise ValueError("need at least two travel-time bins")
        if not (0.0 <= self.discount < 1.0):
            raise ValueError(f"discount {self.discount} outside [0, 1)")
        widths = {len(row) for row in self.road_map}
        if len(widths) != 1:
            raise ValueError("road map rows have different widths")
        for r in ROAD_TYPES:
            for name, values in (("rate", self.true_rate), ("accident", self.true_accident)):
                if r not in values:
                    raise ValueError(f"missing true {name} for road type {r}")
            if self.true_rate[r] <= 0:
                raise ValueError(f"rate for {r} must be positive")
            if not (0.0 < self.true_accident[r] < 1.0):
                raise ValueError(f"accident probability for {r} must lie in (0, 1)")
            if not np.isclose(self.rate_values(r), self.true_rate[r]).any():
                raise ValueError(f"true rate of {r} is not on its grid")
            if not np.isclose(self.accident_values(r), self.true_accident[r]).any():
                raise ValueError(f"true accident probability of {r} is not on its grid")
        return self

    @property
    def height(self) -> int:
        return len(self.road_map)

    @property
    def width(self) -> int:
        return len(self.road_map[0])

    @property
    def goal_cell(self) -> tuple[int, int]:
        return self.goal if self.goal is not None else (self.height - 1, self.width - 1)

    def rate_values(self, road: str) -> np.ndarray:
        return np.array(sorted(self.rate_grid.get(road, [self.true_rate[road]])), dtype=float)

    def accident_values(self, road: str) -> np.ndarray:
        return np.array(
            sorted(self.accident_grid.get(road, [self.true_accident[road]])), dtype=float
        )

    def reference(self, road: str) -> float:
        return self.reference_rate.get(road, self.true_rate[road])


def travel_time_bins(rate: float, bins: int) -> tuple[np.ndarray, np.ndarray]:
    """
    Equal-probability bin edges under an exponential rate and the conditional
    mean travel time inside each bin.
    """
    scale = 1.0 / rate
    edges = stats.expon.ppf(np.linspace(0.0, 1.0, bins + 1), scale=scale)
    lo, hi = edges[:-1], edges[1:]
    sf_lo = stats.expon.sf(lo, scale=scale)
    sf_hi = stats.expon.sf(hi, scale=scale)
    # sf is 0 on the open last bin, so its upper term vanishes
    finite_hi = np.where(np.isinf(hi), 0.0, hi)
    means = ((lo + scale) * sf_lo - (finite_hi + scale) * sf_hi) / (sf_lo - sf_hi)
    return edges, means


def bin_probabilities(edges: np.ndarray, rates: np.ndarray) -> np.ndarray:
    """(len(rates), bins) probability of each travel-time bin under each rate."""
    cdf = stats.expon.cdf(edges[None, :], scale=1.0 / np.asarray(rates)[:, None])
    return np.diff(cdf, axis=1)


@dataclass(eq=False)
class PathPlanningEnv(Environment):
    config: PathPlanningConfig = field(default_factory=PathPlanningConfig)
    cells: list[tuple[int, int]] = field(default_factory=list)
    edges: dict[str, np.ndarray] = field(default_factory=dict)

    def road_of(self, cell: tuple[int, int]) -> str:
        return self.config.road_map[cell[0]][cell[1]]

    def sample_dataset(self, n: int, seed) -> pd.DataFrame:
        rng = _seed(seed)
        cfg = self.config
        roads = np.array(ROAD_TYPES)[rng.integers(0, len(ROAD_TYPES), size=n)]
        rate = np.array([cfg.true_rate[r] for r in roads])
        accident = np.array([cfg.true_accident[r] for r in roads])
        return pd.DataFrame(
            {
                "road": roads.astype(str),
                "accident": (rng.random(n) < accident).astype(int),
                "time": rng.exponential(1.0 / rate),
            },
            columns=list(self.columns),
        )

    def block_log_likelihood(self, dataset: pd.DataFrame) -> list[np.ndarray]:
        cfg = self.config
        out = []
        for b, road in enumerate(ROAD_TYPES):
            values = self.spec.params.thetas[:, 2 * b : 2 * b + 2]
            block = np.unique(values, axis=0)
            rows = dataset[dataset["road"] == road]
            if rows.empty:
                out.append(np.zeros(len(block)))
                continue
            hits = rows["accident"].to_numpy().astype(bool)
            bins = np.clip(
                np.searchsorted(self.edges[road], rows["time"].to_numpy(), side="right") - 1,
                0,
                cfg.bins - 1,
            )
            probs = bin_probabilities(self.edges[road], block[:, 0])
            with np.errstate(divide="ignore"):
                ll = hits.sum() * np.log(block[:, 1]) + (~hits).sum() * np.log1p(-block[:, 1])
                ll = ll + np.log(probs[:, bins]).sum(axis=1)
            out.append(ll)
        return out


def _road_cells(cfg: PathPlanningConfig) -> list[tuple[int, int]]:
    """Road cells reachable from the start, in row-major order."""
    start = cfg.start
    if not (0 <= start[0] < cfg.height and 0 <= start[1] < cfg.width):
        raise ConfigError(f"start {start} is off the map")
    if cfg.road_map[start[0]][start[1]] not in ROAD_TYPES:
        raise ConfigError(f"start {start} is not a road cell")
    seen = {start}
    queue = deque([start])
    while queue:
        r, c = queue.popleft()
        for dr, dc in MOVES:
            nxt = (r + dr, c + dc)
            if nxt in seen or not (0 <= nxt[0] < cfg.height and 0 <= nxt[1] < cfg.width):
                continue
            if cfg.road_map[nxt[0]][nxt[1]] in ROAD_TYPES:
                seen.add(nxt)
                queue.append(nxt)
    return sorted(seen)


def build_path_planning(cfg: PathPlanningConfig | None = None) -> PathPlanningEnv:
    cfg = cfg or PathPlanningConfig()
    cells = _road_cells(cfg)
    goal = cfg.goal_cell
    if goal not in cells:
        raise ConfigError(f"goal {goal} is not reachable from start {cfg.start}")
    if len(cells) > cfg.max_states:
        raise ConfigError(f"{len(cells)} road cells exceed max_states={cfg.max_states}")
    index = {cell: i for i, cell in enumerate(cells)}

    blocks = [
        ParamBlock(
            name=road,
            names=(f"rate_{road}", f"accident_{road}"),
            values=np.array(
                [(r, p) for r in cfg.rate_values(road) for p in cfg.accident_values(road)]
            ),
        )
        for road in ROAD_TYPES
    ]
    params = ParamSpace.product(blocks)
    m = cfg.bins
    n_xi = 2 * m

    edges: dict[str, np.ndarray] = {}
    means: dict[str, np.ndarray] = {}
    likelihood = np.zeros((len(ROAD_TYPES) + 1, n_xi, params.size))
    for b, road in enumerate(ROAD_TYPES):
        edges[road], means[road] = travel_time_bins(cfg.reference(road), m)
        rate = params.thetas[:, 2 * b]
        accident = params.thetas[:, 2 * b + 1]
        probs = bin_probabilities(edges[road], rate).T
        likelihood[b, :m] = probs * (1.0 - accident)[None, :]
        likelihood[b, m:] = probs * accident[None, :]
    likelihood[GOAL_CHANNEL, 0] = 1.0

    n_states = len(cells)
    admissible = np.zeros((n_states, len(MOVE_LABELS)), dtype=bool)
    next_state = np.repeat(np.arange(n_states)[:, None, None], len(MOVE_LABELS), axis=1)
    next_state = np.repeat(next_state, n_xi, axis=2)
    cost = np.zeros((n_states, len(MOVE_LABELS), n_xi))
    channel = np.zeros((n_states, len(MOVE_LABELS)), dtype=int)
    for s, (r, c) in enumerate(cells):
        if (r, c) == goal:
            admissible[s, STAY] = True
            channel[s, STAY] = GOAL_CHANNEL
            continue
        for a, (dr, dc) in enumerate(MOVES):
            dest = index.get((r + dr, c + dc))
            if dest is None:
                continue
            road = cfg.road_map[r + dr][c + dc]
            admissible[s, a] = True
            channel[s, a] = ROAD_TYPES.index(road)
            next_state[s, a, :m] = dest
            cost[s, a, :m] = means[road]
            cost[s, a, m:] = cfg.accident_delay

    spec = ModelSpec(
        params=params,
        admissible=admissible,
        next_state=next_state,
        cost=cost,
        likelihood=likelihood,
        discount=cfg.discount,
        channel=channel,
        name=f"pathplanning-{cfg.height}x{cfg.width}",
        state_labels=tuple(f"r{r}c{c}" for r, c in cells),
        action_labels=MOVE_LABELS,
        xi_labels=tuple(f"{'accident' if x >= m else 'clear'}-bin{x % m}" for x in range(n_xi)),
    )
    true_point = [v for road in ROAD_TYPES for v in (cfg.true_rate[road], cfg.true_accident[road])]
    logger.info(
        f"Path planning model: {n_states} states, {params.size} parameter points, {n_xi} outcomes"
    )
    return PathPlanningEnv(
        name="pathplanning",
        spec=spec,
        initial_state=index[cfg.start],
        true_index=params.index_of(true_point),
        columns=("road", "accident", "time"),
        config=cfg,
        cells=cells,
        edges=edges,
    )


# ---------------------------------------------------------------------------- #
# Inventory
# ---------------------------------------------------------------------------- #


class InventoryConfig(BaseModel):
    items: int = 2
    capacity: list[int] = [6, 6]
    true_rate: list[float] = [2.0, 3.0]
    rate_grid: list[float] = [1.0, 2.0, 3.0, 4.0, 5.0]
    holding_cost: list[float] = [2.0, 3.0]
    penalty_cost: list[float] = [4.0, 5.0]
    truncation: int | None = None
    discount: float = 0.95
    max_states: int = 5000
    max_table_entries: int = 5_000_000

    @model_validator(mode="after")
    def _check(self):
        for name in ("capacity", "true_rate", "holding_cost", "penalty_cost"):
            if len(getattr(self, name)) != self.items:
                raise ValueError(f"{name} needs {self.items} entries")
        if min(self.capacity) < 0:
            raise ValueError("capacities must be non-negative")
        if not (0.0 <= self.discount < 1.0):
            raise ValueError(f"discount {self.discount} outside [0, 1)")
        if self.truncation is not None and self.truncation < max(self.capacity):
            raise ValueError("demand truncation must be at least the largest capacity")
        for rate in self.true_rate:
            if not np.isclose(self.rate_grid, rate).any():
                raise ValueError(f"true rate {rate} is not on the rate grid")
        if min(self.rate_grid) <= 0:
            raise ValueError("demand rates must be positive")
        return self

    @property
    def demand_cap(self) -> int:
        return max(self.capacity) if self.truncation is None else self.truncation


def truncated_poisson(rates: np.ndarray, cap: int) -> np.ndarray:
    """(cap + 1, len(rates)) pmf with the tail mass folded into `cap`."""
    k = np.arange(cap + 1)[:, None]
    rates = np.asarray(rates, dtype=float)[None, :]
    pmf = stats.poisson.pmf(k, rates)
    pmf[-1] = stats.poisson.sf(cap - 1, rates[0])
    return pmf


@dataclass(eq=False)
class InventoryEnv(Environment):
    config: InventoryConfig = field(default_factory=InventoryConfig)

    def sample_dataset(self, n: int, seed) -> pd.DataFrame:
        rng = _seed(seed)
        draws = rng.poisson(self.config.true_rate, size=(n, self.config.items))
        return pd.DataFrame(draws, columns=list(self.columns))

    def block_log_likelihood(self, dataset: pd.DataFrame) -> list[np.ndarray]:
        cfg = self.config
        grid = np.array(sorted(cfg.rate_grid))
        pmf = truncated_poisson(grid, cfg.demand_cap)
        out = []
        for column in self.columns:
            demand = np.minimum(dataset[column].to_numpy().astype(int), cfg.demand_cap)
            with np.errstate(divide="ignore"):
                out.append(np.log(pmf[demand]).sum(axis=0))
        return out


def build_inventory(cfg: InventoryConfig | None = None) -> InventoryEnv:
    cfg = cfg or InventoryConfig()
    dims = tuple(c + 1 for c in cfg.capacity)
    n_states = math.prod(dims)
    cap = cfg.demand_cap
    n_xi = (cap + 1) ** cfg.items
    if n_states > cfg.max_states or n_states * n_states * n_xi > cfg.max_table_entries:
        raise ConfigError(
            f"inventory model too large ({n_states} states, {n_xi} demand outcomes); "
            "reduce the number of items or the capacities"
        )

    grid = np.array(sorted(cfg.rate_grid))
    blocks = [
        ParamBlock(name=f"item{i}", names=(f"rate_{i}",), values=grid) for i in range(cfg.items)
    ]
    params = ParamSpace.product(blocks)

    levels = np.array(np.unravel_index(np.arange(n_states), dims)).T
    demands = np.array(np.unravel_index(np.arange(n_xi), (cap + 1,) * cfg.items)).T
    post = levels[:, None, :] + levels[None, :, :]
    capacity = np.array(cfg.capacity)
    admissible = np.all(post <= capacity, axis=2)
    left = post[:, :, None, :] - demands[None, None, :, :]
    stock = np.minimum(np.maximum(left, 0), capacity)
    cost = (
        np.maximum(left, 0) @ np.array(cfg.holding_cost)
        + np.maximum(-left, 0) @ np.array(cfg.penalty_cost)
    )
    next_state = np.ravel_multi_index(tuple(np.moveaxis(stock, -1, 0)), dims)
    same = np.broadcast_to(np.arange(n_states)[:, None, None], next_state.shape)
    next_state = np.where(admissible[:, :, None], next_state, same)
    cost = np.where(admissible[:, :, None], cost, 0.0)

    pmf = truncated_poisson(grid, cap)
    per_item = [pmf[demands[:, i]][:, params.block_index[:, i]] for i in range(cfg.items)]
    likelihood = np.prod(per_item, axis=0)

    spec = ModelSpec(
        params=params,
        admissible=admissible,
        next_state=next_state,
        cost=cost,
        likelihood=likelihood,
        discount=cfg.discount,
        name=f"inventory-{cfg.items}x{'x'.join(map(str, cfg.capacity))}",
        state_labels=tuple("/".join(map(str, lv)) for lv in levels),
        action_labels=tuple("+" + "/".join(map(str, lv)) for lv in levels),
        xi_labels=tuple("d" + "/".join(map(str, d)) for d in demands),
    )
    logger.info(
        f"Inventory model: {n_states} states, {params.size} parameter points, {n_xi} outcomes"
    )
    return InventoryEnv(
        name="inventory",
        spec=spec,
        initial_state=0,
        true_index=params.index_of(cfg.true_rate),
        columns=tuple(f"demand_{i}" for i in range(cfg.items)),
        config=cfg,
    )


def build_environment(
    kind: Literal["pathplanning", "inventory"], config: dict | None = None
) -> Environment:
    config = config or {}
    if kind == "pathplanning":
        return build_path_planning(PathPlanningConfig.model_validate(config))
    if kind == "inventory":
        return build_inventory(InventoryConfig.model_validate(config))
    raise ConfigError(f"unknown environment {kind!r}")


# ---------------------------------------------------------------------------- #
# Synthetic instances
# ---------------------------------------------------------------------------- #


def build_random_instance(
    rng: np.random.Generator,
    n_states: int = 3,
    n_actions: int = 2,
    n_xi: int = 3,
    n_thetas: int = 2,
    discount: float = 0.9,
) -> ModelSpec:
    """Fully admissible random model with Dirichlet likelihoods and uniform costs."""
    return ModelSpec(
        params=ParamSpace(thetas=np.arange(n_thetas, dtype=float)),
        admissible=np.ones((n_states, n_actions), dtype=bool),
        next_state=rng.integers(0, n_states, size=(n_states, n_actions, n_xi)),
        cost=rng.uniform(0.0, 1.0, size=(n_states, n_actions, n_xi)),
        likelihood=rng.dirichlet(np.ones(n_xi), size=n_thetas).T,
        discount=discount,
        name="random",
    )


def build_closed_instance(
    rng: np.random.Generator,
    n_states: int = 3,
    n_actions: int = 2,
    n_thetas: int = 2,
    discount: float = 0.9,
) -> ModelSpec:
    """
    Random model whose reachable beliefs stay finite: outcome 0 is equally
    likely under every theta, outcome 1 + t happens only under theta_t.
    """
    n_xi = n_thetas + 1
    stay = rng.uniform(0.2, 0.8)
    likelihood = np.zeros((n_xi, n_thetas))
    likelihood[0] = stay
    likelihood[1:] = np.eye(n_thetas) * (1.0 - stay)
    return ModelSpec(
        params=ParamSpace(thetas=np.arange(n_thetas, dtype=float)),
        admissible=np.ones((n_states, n_actions), dtype=bool),
        next_state=rng.integers(0, n_states, size=(n_states, n_actions, n_xi)),
        cost=rng.uniform(0.0, 1.0, size=(n_states, n_actions, n_xi)),
        likelihood=likelihood,
        discount=discount,
        name="closed",
    )


def build_revealing_toy(discount: float = 0.5) -> ModelSpec:
    """One state, one action; the first outcome reveals theta and costs theta."""
    return ModelSpec(
        params=ParamSpace(thetas=np.array([1.0, 2.0])),
        admissible=np.ones((1, 1), dtype=bool),
        next_state=np.zeros((1, 1, 2), dtype=int),
        cost=np.array([[[1.0, 2.0]]]),
        likelihood=np.eye(2),
        discount=discount,
        name="revealing",
    )
