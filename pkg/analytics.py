"""
Comparison metrics for DPSGD tuning runs.
Budget-to-baseline cost, per-sample visits before the best trial,
best-so-far traces, and the cross-strategy comparison report.
"""

import math
from dataclasses import asdict, dataclass, fields
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

import optimizers
from data_collector import VisitCounter, merge_counters
from objective import NoValidTrialsError, TrialRecord, reward_percent

if TYPE_CHECKING:
    from ledger import Ledger

Records = Union["Ledger", Sequence[TrialRecord]]


class BaselineUnavailableError(ValueError):
    def __init__(self, detail: str = ""):
        super().__init__("baseline unavailable" + (f": {detail}" if detail else ""))


def _records(source: Records) -> Sequence[TrialRecord]:
    return getattr(source, "records", source)


def best_record(records: Records) -> Optional[TrialRecord]:
    return optimizers.best_record(_records(records))


@dataclass(frozen=True)
class CostToBaseline:
    trials: int
    sample_visits: int
    wall_seconds: float


def budget_to_baseline(records: Records, baseline: float) -> Optional[CostToBaseline]:
    """
    Cumulative cost up to and including the first trial whose reward reaches
    the baseline, or None when no trial does.
    """
    visits = 0
    wall = 0.0
    for position, record in enumerate(_records(records)):
        visits += record.cost.sample_visits
        wall += record.cost.wall_seconds
        if record.ok and record.reward >= baseline:
            return CostToBaseline(position + 1, visits, wall)
    return None


def visits_before_best(ledger: "Ledger") -> VisitCounter:
    """Per-sample visits summed over trials 0..best inclusive."""
    best = best_record(ledger)
    if best is None:
        raise NoValidTrialsError("no ok trial to measure visits against")
    if not ledger.has_increments:
        if ledger.stored_visits_before_best is None:
            raise ValueError(f"ledger {ledger.run_id} carries no per-trial visit increments")
        return ledger.stored_visits_before_best.copy()
    shards = [
        VisitCounter(r.visits, ledger.visits.sample_ids)
        for r in ledger.records[:best.trial_index + 1]
    ]
    return merge_counters(shards)


def visit_histogram(counter: VisitCounter) -> Dict[str, List[int]]:
    """How many samples were visited exactly k times, for each observed k."""
    values, samples = np.unique(counter.counts, return_counts=True)
    return {"visits": values.tolist(), "samples": samples.tolist()}


def best_so_far_trace(ledger: Records) -> pd.DataFrame:
    """Best reward seen against cumulative trials, sample visits and wall time."""
    rows = []
    best = -math.inf
    visits = 0
    wall = 0.0
    for position, record in enumerate(_records(ledger)):
        visits += record.cost.sample_visits
        wall += record.cost.wall_seconds
        if record.ok:
            best = max(best, record.reward)
        rows.append({
            "trial_index": record.trial_index,
            "reward": record.reward,
            "best_reward": best if math.isfinite(best) else math.nan,
            "cum_trials": position + 1,
            "cum_sample_visits": visits,
            "cum_wall_seconds": wall,
        })
    columns = ["trial_index", "reward", "best_reward", "cum_trials", "cum_sample_visits", "cum_wall_seconds"]
    return pd.DataFrame(rows, columns=columns)


@dataclass
class ComparisonRow:
    run_id: str
    strategy: str
    seed: Optional[int]
    status: str
    n_trials: int
    baseline_reward: float
    best_reward: Optional[float] = None
    best_reward_percent: Optional[float] = None
    best_accuracy: Optional[float] = None
    best_epsilon: Optional[float] = None
    best_sigma: Optional[float] = None
    best_eta: Optional[float] = None
    best_trial_index: Optional[int] = None
    reached: bool = False
    trials_to_baseline: Optional[int] = None
    visits_to_baseline: Optional[int] = None
    wall_to_baseline: Optional[float] = None
    total_visits_to_best: Optional[int] = None


ROW_COLUMNS = [f.name for f in fields(ComparisonRow)]
MEDIAN_FIELDS = [
    "best_reward", "best_reward_percent", "best_accuracy", "best_epsilon",
    "trials_to_baseline", "visits_to_baseline", "wall_to_baseline", "total_visits_to_best",
]


@dataclass
class ComparisonReport:
    rows: List[ComparisonRow]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.rows], columns=ROW_COLUMNS)

    def to_dict(self) -> Dict:
        return {"rows": [asdict(r) for r in self.rows]}

    def ledger_rows(self) -> List[ComparisonRow]:
        return [r for r in self.rows if r.run_id != "median"]


class LedgerAnalytics:
    """Metrics for one run ledger."""

    def __init__(self, ledger: "Ledger"):
        self.ledger = ledger

    def get_best(self) -> Optional[TrialRecord]:
        return best_record(self.ledger)

    def get_cost_to_baseline(self, baseline: float) -> Optional[CostToBaseline]:
        return budget_to_baseline(self.ledger, baseline)

    def get_visits_before_best(self) -> VisitCounter:
        return visits_before_best(self.ledger)

    def get_visit_metrics(self) -> Dict:
        """Totals and histogram of the visits before the best trial; {} without one."""
        if self.get_best() is None:
            return {}
        snapshot = self.get_visits_before_best()
        return {
            "total": snapshot.total,
            "max": int(snapshot.counts.max()) if len(snapshot) else 0,
            "mean": float(snapshot.counts.mean()) if len(snapshot) else 0.0,
            "histogram": visit_histogram(snapshot),
        }

    def get_trace(self) -> pd.DataFrame:
        return best_so_far_trace(self.ledger)

    def get_comparison_row(self, baseline: float) -> ComparisonRow:
        """The ledger's comparison row against a baseline reward."""
        ledger = self.ledger
        row = ComparisonRow(
            run_id=ledger.run_id,
            strategy=ledger.strategy,
            seed=ledger.seed,
            status="failed",
            n_trials=len(ledger.records),
            baseline_reward=baseline,
        )
        best = self.get_best()
        if best is None:
            return row
        row.status = "ok"
        row.best_reward = best.reward
        row.best_reward_percent = reward_percent(best.reward, ledger.weights)
        row.best_accuracy = best.val_accuracy
        row.best_epsilon = best.epsilon
        row.best_sigma = best.sigma
        row.best_eta = best.eta
        row.best_trial_index = best.trial_index
        row.total_visits_to_best = self.get_visits_before_best().total
        cost = self.get_cost_to_baseline(baseline)
        if cost is not None:
            row.reached = True
            row.trials_to_baseline = cost.trials
            row.visits_to_baseline = cost.sample_visits
            row.wall_to_baseline = cost.wall_seconds
        return row


def _grid_baselines(ledgers: Sequence["Ledger"]) -> Dict[int, float]:
    baselines = {}
    for ledger in ledgers:
        if ledger.strategy != "grid":
            continue
        best = best_record(ledger)
        if best is not None and ledger.seed not in baselines:
            baselines[ledger.seed] = best.reward
    return baselines


def median_by_strategy(rows: Sequence[ComparisonRow]) -> List[ComparisonRow]:
    """
    One `median` row per strategy over its per-seed rows. Unreached and failed
    rows are left out of each field's median; a field with no values is None.
    """
    out = []
    for strategy in dict.fromkeys(r.strategy for r in rows):
        group = [r for r in rows if r.strategy == strategy and r.run_id != "median"]
        median = ComparisonRow(
            run_id="median",
            strategy=strategy,
            seed=None,
            status="ok" if any(r.status == "ok" for r in group) else "failed",
            n_trials=int(np.median([r.n_trials for r in group])),
            baseline_reward=float(np.median([r.baseline_reward for r in group])),
            reached=sum(r.reached for r in group) * 2 > len(group),
        )
        for name in MEDIAN_FIELDS:
            values = [getattr(r, name) for r in group if getattr(r, name) is not None]
            setattr(median, name, float(np.median(values)) if values else None)
        out.append(median)
    return out


def compare(ledgers: Sequence["Ledger"]) -> ComparisonReport:
    """
    One row per ledger plus per-strategy median rows. Each ledger is measured
    against the grid baseline of its own seed, or the lowest-seed grid run.
    """
    if not ledgers:
        raise BaselineUnavailableError("no ledgers given")
    baselines = _grid_baselines(ledgers)
    if not baselines:
        raise BaselineUnavailableError("no grid ledger with a successful trial")
    fallback = baselines[min(baselines)]

    rows = [
        LedgerAnalytics(ledger).get_comparison_row(baselines.get(ledger.seed, fallback))
        for ledger in ledgers
    ]
    return ComparisonReport(rows + median_by_strategy(rows))
