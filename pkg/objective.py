"""
Trial objective.
Scores a (sigma, eta) point by training with DPSGD and combining validation
loss and privacy loss into the single reward every strategy maximizes.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from data_collector import Dataset
from dpsgd_engine import PROFILES, TrainConfig, TrainingDivergedError, init_mlp, train
from privacy_accountant import DEFAULT_DELTA
from search_space import HyperParams

OK = "ok"
FAILED = "failed"
# Strictly below the smallest valid reward (0), so a failed trial never wins.
FAILED_REWARD = -1.0


class NoValidTrialsError(ValueError):
    pass


@dataclass(frozen=True)
class RewardWeights:
    alpha_u: float = 0.5
    alpha_p: float = 0.5

    def __post_init__(self):
        for name in ("alpha_u", "alpha_p"):
            value = getattr(self, name)
            if not 0 <= value <= 1:
                raise ValueError(f"{name} must be in [0, 1], got {value}")

    @property
    def total(self) -> float:
        return self.alpha_u + self.alpha_p


def reward(val_loss: float, epsilon: float, w: RewardWeights) -> float:
    """alpha_u * exp(-val_loss) + alpha_p * exp(-epsilon)."""
    if not (math.isfinite(val_loss) and math.isfinite(epsilon)):
        raise ValueError(f"reward needs finite inputs, got val_loss={val_loss}, epsilon={epsilon}")
    if val_loss < 0 or epsilon < 0:
        raise ValueError("val_loss and epsilon must be >= 0")
    return w.alpha_u * math.exp(-val_loss) + w.alpha_p * math.exp(-epsilon)


def reward_percent(value: float, w: RewardWeights) -> float:
    """Reward as a percentage of its ceiling alpha_u + alpha_p."""
    return 100.0 * value / w.total if w.total > 0 else 0.0


@dataclass(frozen=True)
class TrialCost:
    steps: int
    sample_visits: int
    wall_seconds: float = field(default=0.0, compare=False)


@dataclass(frozen=True)
class TrialRecord:
    """
    One evaluated point. Equality ignores wall-clock time and the per-sample
    visit increments, which travel with the record for the ledger.
    """
    trial_index: int
    hyperparams: HyperParams
    val_loss: float
    val_accuracy: float
    epsilon: float
    reward: float
    status: str
    cost: TrialCost
    strategy: str = ""
    seed: int = 0
    visits: Optional[np.ndarray] = field(default=None, compare=False, repr=False)

    @property
    def ok(self) -> bool:
        return self.status == OK

    @property
    def sigma(self) -> float:
        return self.hyperparams.sigma

    @property
    def eta(self) -> float:
        return self.hyperparams.eta


@dataclass(frozen=True)
class TrainTemplate:
    """Per-run training settings shared by every trial; sigma and eta come from the search."""
    epochs: int = 3
    batch_size: int = 100
    clip_norm: float = 1.0
    delta: float = DEFAULT_DELTA
    hidden: Optional[Sequence[int]] = None
    activation: str = "tanh"


@dataclass
class TrialContext:
    train: Dataset
    valid: Dataset
    template: TrainTemplate
    weights: RewardWeights
    base_seed: int = 0
    step_log_dir: Optional[str] = None

    @property
    def sampling_rate(self) -> float:
        return self.template.batch_size / len(self.train)

    def layer_sizes(self):
        hidden = self.template.hidden
        if hidden is None:
            hidden = PROFILES.get(self.train.name.split("-")[0], PROFILES["synthetic"])
        return (self.train.dim, *hidden, self.train.num_classes)


def evaluate_trial(hp: HyperParams, context: TrialContext, trial_index: int) -> TrialRecord:
    """Train at (sigma, eta) with seed base_seed + trial_index and score the outcome."""
    seed = context.base_seed + trial_index
    t = context.template
    step_log = None
    if context.step_log_dir:
        step_log = f"{context.step_log_dir}/steps_trial{trial_index}.csv"
    cfg = TrainConfig(
        epochs=t.epochs,
        batch_size=t.batch_size,
        clip_norm=t.clip_norm,
        sigma=hp.sigma,
        eta=hp.eta,
        seed=seed,
        delta=t.delta,
        step_log=step_log,
    )
    model = init_mlp(context.layer_sizes(), activation=t.activation,
                     rng=np.random.default_rng([seed, 1]))

    started = time.perf_counter()
    try:
        outcome = train(model, context.train, context.valid, cfg)
    except TrainingDivergedError as e:
        return TrialRecord(
            trial_index=trial_index,
            hyperparams=hp,
            val_loss=math.nan,
            val_accuracy=math.nan,
            epsilon=math.nan,
            reward=FAILED_REWARD,
            status=FAILED,
            cost=TrialCost(e.steps_taken, e.visits.total, time.perf_counter() - started),
            seed=seed,
            visits=e.visits.counts,
        )

    value = reward(outcome.val_loss, outcome.epsilon.epsilon, context.weights)
    return TrialRecord(
        trial_index=trial_index,
        hyperparams=hp,
        val_loss=outcome.val_loss,
        val_accuracy=outcome.val_accuracy,
        epsilon=outcome.epsilon.epsilon,
        reward=value,
        status=OK,
        cost=TrialCost(outcome.steps_taken, outcome.samples_visited, time.perf_counter() - started),
        seed=seed,
        visits=outcome.visits.counts,
    )


Evaluator = Callable[[HyperParams, int], TrialRecord]


class TrialEvaluator:
    """Evaluates trials against one training context, logging each result."""

    def __init__(self, context: TrialContext):
        self.context = context
        self.logger = logging.getLogger(__name__)

    def __call__(self, hp: HyperParams, trial_index: int) -> TrialRecord:
        self.logger.info(f"Trial {trial_index}: sigma={hp.sigma:.6g} eta={hp.eta:.6g}")
        record = evaluate_trial(hp, self.context, trial_index)
        if record.ok:
            self.logger.info(
                f"Trial {trial_index} done: reward={record.reward:.6f} "
                f"val_loss={record.val_loss:.4f} eps={record.epsilon:.4f}"
            )
        else:
            self.logger.warning(f"Trial {trial_index} diverged after {record.cost.steps} steps")
        return record


class SurfaceEvaluator:
    """
    Analytic stand-in for training: val_loss and epsilon come from closed-form
    functions of (sigma, eta), so strategies can be studied in milliseconds.
    Each trial is charged `epochs` visits of every one of `n_samples` samples.
    """

    def __init__(self, val_loss_fn: Callable[[float, float], float],
                 epsilon_fn: Callable[[float, float], float],
                 weights: RewardWeights = RewardWeights(), n_samples: int = 100,
                 epochs: int = 1, base_seed: int = 0):
        self.val_loss_fn = val_loss_fn
        self.epsilon_fn = epsilon_fn
        self.weights = weights
        self.n_samples = n_samples
        self.epochs = epochs
        self.base_seed = base_seed

    def reward_at(self, hp: HyperParams) -> float:
        return reward(self.val_loss_fn(hp.sigma, hp.eta), self.epsilon_fn(hp.sigma, hp.eta), self.weights)

    def __call__(self, hp: HyperParams, trial_index: int) -> TrialRecord:
        val_loss = self.val_loss_fn(hp.sigma, hp.eta)
        epsilon = self.epsilon_fn(hp.sigma, hp.eta)
        return TrialRecord(
            trial_index=trial_index,
            hyperparams=hp,
            val_loss=val_loss,
            val_accuracy=math.exp(-val_loss),
            epsilon=epsilon,
            reward=reward(val_loss, epsilon, self.weights),
            status=OK,
            cost=TrialCost(self.epochs, self.epochs * self.n_samples),
            seed=self.base_seed + trial_index,
            visits=np.full(self.n_samples, self.epochs, dtype=np.int64),
        )


def baseline_reward(records: Iterable[TrialRecord]) -> float:
    """Highest reward among the ok grid-search records."""
    rewards = [r.reward for r in records if r.ok]
    if not rewards:
        raise NoValidTrialsError("no ok records to take a baseline from")
    return max(rewards)
