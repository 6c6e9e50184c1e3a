"""
Trial scheduler for hyperparameter searches.
Hands trial batches to the evaluator, serially or on a worker pool, keeps
results in trial-index order, and stops the search when a budget runs out.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Sequence

from pydantic import BaseModel, ConfigDict, Field

from objective import Evaluator, TrialRecord
from search_space import HyperParams


class Budget(BaseModel):
    """Search limits; whichever runs out first stops the search."""
    model_config = ConfigDict(extra="forbid")

    max_trials: int = Field(100, ge=1)
    max_sample_visits: Optional[int] = Field(None, ge=1)
    wall_limit: Optional[float] = Field(None, gt=0)


class BudgetTracker:
    """Running totals charged against a Budget."""

    def __init__(self, budget: Budget):
        self.budget = budget
        self.trials = 0
        self.sample_visits = 0
        self.started = time.perf_counter()

    @property
    def elapsed(self) -> float:
        return time.perf_counter() - self.started

    @property
    def remaining_trials(self) -> int:
        return max(self.budget.max_trials - self.trials, 0)

    def charge(self, record: TrialRecord):
        self.trials += 1
        self.sample_visits += record.cost.sample_visits

    def exhausted(self) -> Optional[str]:
        """Name of the first exhausted limit, or None."""
        if self.trials >= self.budget.max_trials:
            return "max_trials"
        if self.budget.max_sample_visits is not None and self.sample_visits >= self.budget.max_sample_visits:
            return "max_sample_visits"
        if self.budget.wall_limit is not None and self.elapsed >= self.budget.wall_limit:
            return "wall_limit"
        return None


class TrialScheduler:
    """
    Runs trials for one search and owns its dense trial index.

    With jobs > 1 a batch is evaluated on a thread pool; the trial ceiling
    stays exact while visit and wall limits are checked between batches.
    """

    def __init__(self, evaluate: Evaluator, budget: Budget, jobs: int = 1):
        if jobs < 1:
            raise ValueError("jobs must be >= 1")
        self.evaluate = evaluate
        self.tracker = BudgetTracker(budget)
        self.jobs = jobs
        self.records: List[TrialRecord] = []
        self.logger = logging.getLogger(__name__)
        self._stop_logged = False

    @property
    def next_index(self) -> int:
        return len(self.records)

    def exhausted(self) -> bool:
        reason = self.tracker.exhausted()
        if reason and not self._stop_logged:
            self.logger.info(f"Budget exhausted ({reason}) after {self.tracker.trials} trials")
            self._stop_logged = True
        return reason is not None

    def run(self, points: Sequence[HyperParams]) -> List[TrialRecord]:
        """Evaluate as many of `points` as the budget allows; returns the new records."""
        if self.exhausted():
            return []
        points = list(points)[:self.tracker.remaining_trials]
        start = self.next_index
        if self.jobs == 1 or len(points) == 1:
            batch = []
            for offset, hp in enumerate(points):
                if offset and self.exhausted():
                    break
                record = self.evaluate(hp, start + offset)
                self._accept(record)
                batch.append(record)
            return batch

        with ThreadPoolExecutor(max_workers=self.jobs) as pool:
            futures = [pool.submit(self.evaluate, hp, start + offset) for offset, hp in enumerate(points)]
            batch = [f.result() for f in futures]
        batch.sort(key=lambda r: r.trial_index)
        for record in batch:
            self._accept(record)
        return batch

    def run_one(self, hp: HyperParams) -> Optional[TrialRecord]:
        batch = self.run([hp])
        return batch[0] if batch else None

    def _accept(self, record: TrialRecord):
        self.records.append(record)
        self.tracker.charge(record)
