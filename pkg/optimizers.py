"""
Search strategies over the (sigma, eta) lattice.
Grid search, an evolutionary algorithm, TPE-style sequential model-based
optimization, and surrogate-guided reinforcement learning, all maximizing the
trial reward under a shared Budget.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import stats

from dpsgd_engine import (
    SurrogateFitConfig,
    surrogate_fit,
    surrogate_init,
    surrogate_mse,
    surrogate_predict_grid,
)
from objective import Evaluator, TrialRecord
from scheduler import Budget, TrialScheduler
from search_space import (
    Dimension,
    HyperParams,
    SearchSpace,
    enumerate_grid,
    mutate,
    quantize,
    sample_uniform,
)

logger = logging.getLogger(__name__)

STRATEGIES = ("grid", "evolutionary", "bayesian", "rl")
ALIASES = {"tpe": "bayesian", "evo": "evolutionary"}
BANDWIDTH_RULES = ("adjacent_gap", "scott")

# The surrogate network is seeded away from the trial seeds.
SURROGATE_SEED_OFFSET = 10 ** 6


class UnknownStrategyError(ValueError):
    pass


class SearchFailedError(RuntimeError):
    pass


class GridConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    per_dim: Tuple[int, int] = (10, 10)


class EvoConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    population_size: int = Field(10, ge=2)
    generations: int = Field(10, ge=1)
    elite_fraction: float = Field(0.2, gt=0, lt=1)
    crossover_rate: float = Field(0.5, ge=0, le=1)
    mutation_strength: float = Field(0.1, ge=0, le=1)
    tournament_size: int = Field(2, ge=1)

    @property
    def elite_count(self) -> int:
        return min(max(1, round(self.elite_fraction * self.population_size)), self.population_size)


class TpeConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_startup: int = Field(10, ge=1)
    gamma: float = Field(0.25, gt=0, lt=1)
    n_candidates: int = Field(24, ge=1)
    bandwidth_rule: str = "adjacent_gap"

    @model_validator(mode="after")
    def _known_rule(self):
        if self.bandwidth_rule not in BANDWIDTH_RULES:
            raise ValueError(f"bandwidth_rule must be one of {BANDWIDTH_RULES}")
        return self


class RlConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    episodes: int = Field(10, ge=1)
    trials_per_episode: int = Field(10, ge=1)
    eps0: float = Field(1.0, ge=0, le=1)
    eps_decay: float = Field(0.8, gt=0, le=1)
    top_fraction: float = Field(0.1, gt=0, le=1)
    mutation_strength: float = Field(0.1, ge=0, le=1)
    surrogate: SurrogateFitConfig = Field(default_factory=SurrogateFitConfig)


@dataclass
class SearchResult:
    strategy: str
    seed: int
    records: List[TrialRecord]
    best: Optional[TrialRecord]
    heatmaps: List[np.ndarray] = field(default_factory=list)
    surrogate_mse: List[float] = field(default_factory=list)
    heatmap_episodes: List[int] = field(default_factory=list)

    def require_best(self) -> TrialRecord:
        if self.best is None:
            raise SearchFailedError(
                f"{self.strategy} search produced no successful trial out of {len(self.records)}"
            )
        return self.best


def best_record(records: Sequence[TrialRecord]) -> Optional[TrialRecord]:
    """Highest-reward ok record; ties go to the earlier trial."""
    best = None
    for record in records:
        if record.ok and (best is None or record.reward > best.reward):
            best = record
    return best


def run_grid(space: SearchSpace, per_dim: Sequence[int], budget: Budget,
             evaluate: Evaluator, jobs: int = 1) -> List[TrialRecord]:
    """Evaluate the grid in enumeration order until the budget runs out."""
    scheduler = TrialScheduler(evaluate, budget, jobs)
    points = enumerate_grid(space, per_dim)
    if len(points) > budget.max_trials:
        logger.info(f"Grid of {len(points)} points truncated to {budget.max_trials} trials")
    scheduler.run(points)
    return scheduler.records


def crossover(a: HyperParams, b: HyperParams, rate: float, rng: np.random.Generator) -> HyperParams:
    """Per-gene uniform crossover: each gene comes from `a` with probability `rate`."""
    genes = [ga if rng.random() < rate else gb for ga, gb in zip(a.as_tuple(), b.as_tuple())]
    return HyperParams(*genes)


def tournament(fitness: Sequence[float], rng: np.random.Generator, size: int = 2) -> int:
    """Index of the fittest of `size` members drawn with replacement."""
    contenders = rng.integers(0, len(fitness), size=size)
    return int(max(contenders, key=lambda i: (fitness[i], -i)))


def run_evolutionary(space: SearchSpace, cfg: EvoConfig, budget: Budget, evaluate: Evaluator,
                     rng: np.random.Generator, jobs: int = 1) -> List[TrialRecord]:
    """
    Generational GA. Elites carry over with their recorded fitness; the rest
    of each generation are mutated crossover children of tournament winners.
    """
    scheduler = TrialScheduler(evaluate, budget, jobs)
    initial = [sample_uniform(space, rng) for _ in range(cfg.population_size)]
    population = [(r.hyperparams, r.reward) for r in scheduler.run(initial)]

    for generation in range(1, cfg.generations):
        if scheduler.exhausted() or not population:
            break
        ranked = sorted(population, key=lambda member: -member[1])
        elites = ranked[:cfg.elite_count]
        fitness = [f for _, f in population]
        children = []
        for _ in range(cfg.population_size - len(elites)):
            parent_a = population[tournament(fitness, rng, cfg.tournament_size)][0]
            parent_b = population[tournament(fitness, rng, cfg.tournament_size)][0]
            child = crossover(parent_a, parent_b, cfg.crossover_rate, rng)
            children.append(mutate(space, child, cfg.mutation_strength, rng))
        evaluated = scheduler.run(children)
        population = elites + [(r.hyperparams, r.reward) for r in evaluated]
        logger.debug(f"generation {generation}: best fitness {max(f for _, f in population):.6f}")
    return scheduler.records


def parzen_bandwidths(centers: np.ndarray, dim: Dimension, rule: str = "adjacent_gap") -> np.ndarray:
    """
    Kernel standard deviations in the dimension's working domain, floored at
    one lattice cell (range / lattice size) and capped at the full range.
    """
    span = dim.u_hi - dim.u_lo
    floor = span / dim.size
    if span == 0:
        return np.ones_like(centers)
    if rule == "scott":
        spread = float(np.std(centers)) if centers.size > 1 else 0.0
        bw = np.full_like(centers, 1.06 * spread * centers.size ** (-0.2))
    else:
        order = np.argsort(centers, kind="stable")
        padded = np.concatenate([[dim.u_lo], centers[order], [dim.u_hi]])
        gaps = np.maximum(padded[1:-1] - padded[:-2], padded[2:] - padded[1:-1])
        bw = np.empty_like(centers)
        bw[order] = gaps
    return np.clip(bw, floor, span)


class ParzenDensity:
    """Equal-weight mixture of Gaussians truncated to [lo, hi] in one dimension."""

    def __init__(self, centers: np.ndarray, bandwidths: np.ndarray, lo: float, hi: float):
        self.centers = np.asarray(centers, dtype=np.float64)
        self.bandwidths = np.asarray(bandwidths, dtype=np.float64)
        self.lo = lo
        self.hi = hi

    @property
    def flat(self) -> bool:
        return self.centers.size == 0 or self.hi == self.lo

    def _bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        return (self.lo - self.centers) / self.bandwidths, (self.hi - self.centers) / self.bandwidths

    def logpdf(self, u: np.ndarray) -> np.ndarray:
        # Lattice endpoints can overshoot [lo, hi] by float round-off.
        u = np.clip(np.atleast_1d(np.asarray(u, dtype=np.float64)), self.lo, self.hi)
        if self.flat:
            span = self.hi - self.lo
            return np.full(u.shape, -math.log(span) if span > 0 else 0.0)
        a, b = self._bounds()
        per_kernel = stats.truncnorm.logpdf(
            u[:, None], a[None, :], b[None, :], loc=self.centers[None, :], scale=self.bandwidths[None, :]
        )
        return np.logaddexp.reduce(per_kernel, axis=1) - math.log(self.centers.size)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.flat:
            return rng.uniform(self.lo, self.hi, size=n) if self.hi > self.lo else np.full(n, self.lo)
        a, b = self._bounds()
        which = rng.integers(0, self.centers.size, size=n)
        return stats.truncnorm.rvs(a[which], b[which], loc=self.centers[which],
                                   scale=self.bandwidths[which], random_state=rng)


class TpeSuggester:
    """
    Tree-structured Parzen estimator over the lattice. After the startup
    phase it splits history at the gamma quantile of reward, models good (l)
    and bad (g) points per dimension, and proposes the sampled candidate
    with the highest l/g.
    """

    def __init__(self, space: SearchSpace, cfg: TpeConfig, rng: np.random.Generator):
        self.space = space
        self.cfg = cfg
        self.rng = rng
        self.last_candidates: List[HyperParams] = []
        self.last_scores: Optional[np.ndarray] = None

    def split(self, history: Sequence[Tuple[HyperParams, float]]):
        ranked = sorted(range(len(history)), key=lambda i: -history[i][1])
        n_good = max(1, math.ceil(self.cfg.gamma * len(history)))
        good = [history[i][0] for i in ranked[:n_good]]
        bad = [history[i][0] for i in ranked[n_good:]]
        return good, bad

    def densities(self, points: Sequence[HyperParams]) -> List[ParzenDensity]:
        out = []
        for d, dim in enumerate(self.space.dims):
            centers = np.array([dim.to_unit(p.as_tuple()[d]) for p in points])
            bws = parzen_bandwidths(centers, dim, self.cfg.bandwidth_rule) if centers.size else centers
            out.append(ParzenDensity(centers, bws, dim.u_lo, dim.u_hi))
        return out

    def log_ratio(self, candidates: Sequence[HyperParams], good: List[ParzenDensity],
                  bad: List[ParzenDensity]) -> np.ndarray:
        score = np.zeros(len(candidates))
        for d, dim in enumerate(self.space.dims):
            u = np.array([dim.to_unit(c.as_tuple()[d]) for c in candidates])
            score += good[d].logpdf(u) - bad[d].logpdf(u)
        return score

    def suggest(self, history: Sequence[Tuple[HyperParams, float]]) -> HyperParams:
        self.last_candidates, self.last_scores = [], None
        if len(history) < self.cfg.n_startup:
            return sample_uniform(self.space, self.rng)
        rewards = [r for _, r in history]
        if max(rewards) == min(rewards):
            logger.debug("flat reward history; falling back to a uniform draw")
            return sample_uniform(self.space, self.rng)

        good_points, bad_points = self.split(history)
        good, bad = self.densities(good_points), self.densities(bad_points)
        draws = [density.sample(self.cfg.n_candidates, self.rng) for density in good]
        candidates = []
        for k in range(self.cfg.n_candidates):
            raw = [10.0 ** draws[d][k] if dim.scale == "log" else draws[d][k]
                   for d, dim in enumerate(self.space.dims)]
            # Kernels are truncated to [lo, hi] > 0, so raw values are valid HyperParams.
            candidates.append(quantize(self.space, HyperParams(*raw)))
        scores = self.log_ratio(candidates, good, bad)
        self.last_candidates, self.last_scores = candidates, scores
        return candidates[int(np.argmax(scores))]


def run_tpe(space: SearchSpace, cfg: TpeConfig, budget: Budget, evaluate: Evaluator,
            rng: np.random.Generator) -> List[TrialRecord]:
    """Sequential TPE: one suggestion, one evaluation, repeat until the budget ends."""
    scheduler = TrialScheduler(evaluate, budget, jobs=1)
    suggester = TpeSuggester(space, cfg, rng)
    while not scheduler.exhausted():
        history = [(r.hyperparams, r.reward) for r in scheduler.records]
        scheduler.run_one(suggester.suggest(history))
    return scheduler.records


def epsilon_schedule(cfg: RlConfig, episode: int) -> float:
    """Exploration probability at an episode: eps0 * eps_decay ** episode."""
    return cfg.eps0 * cfg.eps_decay ** episode


def top_points(space: SearchSpace, estimates: np.ndarray, fraction: float) -> List[HyperParams]:
    """Lattice points with the highest predicted reward, best first."""
    count = max(1, math.ceil(fraction * estimates.size))
    flat = np.argsort(-estimates.ravel(), kind="stable")[:count]
    return [space.point_at(*np.unravel_index(k, estimates.shape)) for k in flat]


@dataclass
class RlOutcome:
    records: List[TrialRecord]
    heatmaps: List[np.ndarray]
    surrogate_mse: List[float]
    heatmap_episodes: List[int]


def run_rl(space: SearchSpace, cfg: RlConfig, budget: Budget, evaluate: Evaluator,
           rng: np.random.Generator, surrogate_seed: int = SURROGATE_SEED_OFFSET,
           jobs: int = 1) -> RlOutcome:
    """
    Episodic search guided by a reward-regression network. Episode 0 is
    random; afterwards each trial explores uniformly with probability eps_k
    and otherwise mutates one of the top predicted lattice points. The
    surrogate is refit on all ok trials after every episode and its lattice
    predictions are kept per episode.
    """
    scheduler = TrialScheduler(evaluate, budget, jobs)
    net = surrogate_init(cfg.surrogate.hidden, seed=surrogate_seed)
    fit_cfg = cfg.surrogate.model_copy(update={"seed": surrogate_seed})
    heatmaps: List[np.ndarray] = []
    fitted: List[int] = []
    mse: List[float] = []
    favourites: List[HyperParams] = []

    for episode in range(cfg.episodes):
        if scheduler.exhausted():
            break
        eps = epsilon_schedule(cfg, episode)
        points = []
        for _ in range(cfg.trials_per_episode):
            if episode == 0 or not favourites or rng.random() < eps:
                points.append(sample_uniform(space, rng))
            else:
                anchor = favourites[int(rng.integers(0, len(favourites)))]
                points.append(mutate(space, anchor, cfg.mutation_strength, rng))
        scheduler.run(points)

        ok = [r for r in scheduler.records if r.ok]
        if not ok:
            logger.warning(f"episode {episode}: no successful trials to fit the surrogate on")
            continue
        inputs = np.array([space.normalize(r.hyperparams) for r in ok])
        targets = np.array([r.reward for r in ok])
        net = surrogate_fit(net, inputs, targets, fit_cfg)
        mse.append(surrogate_mse(net, inputs, targets))
        estimates = surrogate_predict_grid(net, space)
        heatmaps.append(estimates)
        fitted.append(episode)
        favourites = top_points(space, estimates, cfg.top_fraction)
        logger.info(
            f"RL episode {episode}: eps={eps:.4f} surrogate mse={mse[-1]:.3g} "
            f"predicted best sigma={favourites[0].sigma:.4g} eta={favourites[0].eta:.4g}"
        )
    return RlOutcome(scheduler.records, heatmaps, mse, fitted)


def _settings(name: str, settings, default_cls):
    if settings is None:
        return default_cls()
    if not isinstance(settings, default_cls):
        raise TypeError(f"{name} expects {default_cls.__name__}, got {type(settings).__name__}")
    return settings


def run_strategy(name: str, space: SearchSpace, settings, budget: Budget, evaluate: Evaluator,
                 seed: int = 0, jobs: int = 1) -> SearchResult:
    """Dispatch a named strategy and pick its best record."""
    strategy = ALIASES.get(name, name)
    if strategy not in STRATEGIES:
        raise UnknownStrategyError(f"unknown strategy {name!r}; choose from {', '.join(STRATEGIES)}")
    rng = np.random.default_rng(seed)
    heatmaps: List[np.ndarray] = []
    episodes: List[int] = []
    mse: List[float] = []

    if strategy == "grid":
        records = run_grid(space, _settings(name, settings, GridConfig).per_dim, budget, evaluate, jobs)
    elif strategy == "evolutionary":
        records = run_evolutionary(space, _settings(name, settings, EvoConfig), budget, evaluate, rng, jobs)
    elif strategy == "bayesian":
        records = run_tpe(space, _settings(name, settings, TpeConfig), budget, evaluate, rng)
    else:
        outcome = run_rl(space, _settings(name, settings, RlConfig), budget, evaluate, rng,
                         surrogate_seed=seed + SURROGATE_SEED_OFFSET, jobs=jobs)
        records, heatmaps, mse = outcome.records, outcome.heatmaps, outcome.surrogate_mse
        episodes = outcome.heatmap_episodes

    records = [replace(r, strategy=strategy) for r in records]
    best = best_record(records)
    if best is not None:
        logger.info(
            f"{strategy}: best reward {best.reward:.6f} at trial {best.trial_index} "
            f"(sigma={best.sigma:.4g}, eta={best.eta:.4g}) over {len(records)} trials"
        )
    else:
        logger.warning(f"{strategy}: no successful trials in {len(records)} evaluations")
    return SearchResult(strategy, seed, records, best, heatmaps, mse, episodes)
