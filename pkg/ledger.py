"""
Run ledger for DPSGD tuning searches.
Holds one search's trial history and visit counters, and exports/imports it
as flat files: trials.csv, summary.json, visits.csv, visits_before_best.csv,
trace.csv and the per-episode RL heatmaps.
"""

import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
import pandas as pd

import analytics
from data_collector import VisitCounter, merge_counters
from objective import RewardWeights, TrialCost, TrialRecord, reward_percent
from optimizers import SearchResult
from search_space import HyperParams

PathLike = Union[str, Path]

TRIAL_COLUMNS = [
    "trial_index", "strategy", "seed", "sigma", "eta", "val_loss", "val_accuracy",
    "epsilon", "reward", "status", "steps", "sample_visits", "wall_seconds",
]
FLOAT_FORMAT = "%.17g"
HEATMAP_PATTERN = re.compile(r"rl_heatmap_ep(\d+)\.tsv$")


class LedgerError(OSError):
    pass


@dataclass
class Ledger:
    """
    One search's history. `visits` is the merged counter over all trials; a
    ledger read back from disk has no per-trial increments, so it carries
    the exported visits-before-best snapshot instead.
    """
    run_id: str
    strategy: str
    seed: int
    config: Dict[str, Any]
    records: List[TrialRecord]
    visits: VisitCounter
    weights: RewardWeights = field(default_factory=RewardWeights)
    heatmaps: List[np.ndarray] = field(default_factory=list)
    surrogate_mse: List[float] = field(default_factory=list)
    accountant_audit: Dict[str, Any] = field(default_factory=dict)
    stored_visits_before_best: Optional[VisitCounter] = None
    heatmap_episodes: List[int] = field(default_factory=list)

    def __post_init__(self):
        for position, record in enumerate(self.records):
            if record.trial_index != position:
                raise ValueError(f"trial indices must be dense: position {position} holds {record.trial_index}")
        if not self.heatmap_episodes:
            self.heatmap_episodes = list(range(len(self.heatmaps)))
        if len(self.heatmap_episodes) != len(self.heatmaps):
            raise ValueError(
                f"{len(self.heatmaps)} heatmaps but {len(self.heatmap_episodes)} episode numbers"
            )

    @classmethod
    def from_result(cls, result: SearchResult, run_id: str, config: Dict[str, Any],
                    sample_ids: Optional[np.ndarray] = None,
                    weights: Optional[RewardWeights] = None,
                    accountant_audit: Optional[Dict[str, Any]] = None) -> "Ledger":
        shards = [VisitCounter(r.visits, sample_ids) for r in result.records if r.visits is not None]
        if shards:
            visits = merge_counters(shards)
        else:
            visits = VisitCounter.zeros(0 if sample_ids is None else len(sample_ids), sample_ids)
        return cls(
            run_id=run_id,
            strategy=result.strategy,
            seed=result.seed,
            config=config,
            records=list(result.records),
            visits=visits,
            weights=weights or RewardWeights(),
            heatmaps=list(result.heatmaps),
            surrogate_mse=list(result.surrogate_mse),
            accountant_audit=accountant_audit or {},
            heatmap_episodes=list(result.heatmap_episodes),
        )

    @property
    def best(self) -> Optional[TrialRecord]:
        return analytics.best_record(self.records)

    @property
    def metrics(self) -> analytics.LedgerAnalytics:
        return analytics.LedgerAnalytics(self)

    @property
    def has_increments(self) -> bool:
        return bool(self.records) and all(r.visits is not None for r in self.records)


def _jsonable(value):
    """Plain JSON types; non-finite floats become null."""
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


def records_frame(records: List[TrialRecord]) -> pd.DataFrame:
    rows = [{
        "trial_index": r.trial_index,
        "strategy": r.strategy,
        "seed": r.seed,
        "sigma": r.sigma,
        "eta": r.eta,
        "val_loss": r.val_loss,
        "val_accuracy": r.val_accuracy,
        "epsilon": r.epsilon,
        "reward": r.reward,
        "status": r.status,
        "steps": r.cost.steps,
        "sample_visits": r.cost.sample_visits,
        "wall_seconds": r.cost.wall_seconds,
    } for r in records]
    return pd.DataFrame(rows, columns=TRIAL_COLUMNS)


def _best_summary(record: Optional[TrialRecord], weights: RewardWeights) -> Optional[Dict[str, Any]]:
    if record is None:
        return None
    return {
        "trial_index": record.trial_index,
        "sigma": record.sigma,
        "eta": record.eta,
        "val_loss": record.val_loss,
        "val_accuracy": record.val_accuracy,
        "epsilon": record.epsilon,
        "reward": record.reward,
        "reward_percent": reward_percent(record.reward, weights),
    }


def summary(ledger: Ledger) -> Dict[str, Any]:
    """The summary.json payload."""
    best = ledger.best
    payload: Dict[str, Any] = {
        "run_id": ledger.run_id,
        "strategy": ledger.strategy,
        "seed": ledger.seed,
        "weights": {"alpha_u": ledger.weights.alpha_u, "alpha_p": ledger.weights.alpha_p},
        "n_trials": len(ledger.records),
        "n_ok": sum(r.ok for r in ledger.records),
        "best": _best_summary(best, ledger.weights),
        "total_sample_visits": ledger.visits.total,
        "total_wall_seconds": sum(r.cost.wall_seconds for r in ledger.records),
        "surrogate_mse": ledger.surrogate_mse,
        "heatmap_episodes": ledger.heatmap_episodes,
        "config": ledger.config,
        "accountant_audit": ledger.accountant_audit,
    }
    visit_metrics = ledger.metrics.get_visit_metrics()
    if visit_metrics:
        payload["visits_before_best"] = visit_metrics
    return payload


def _write_counter(counter: VisitCounter, path: Path):
    frame = pd.DataFrame({"sample_id": counter.sample_ids, "count": counter.counts})
    frame.to_csv(path, index=False)


def export(ledger: Ledger, out_dir: PathLike) -> List[Path]:
    """Write the ledger files into out_dir; returns the written paths."""
    out = Path(out_dir)
    written: List[Path] = []
    logger = logging.getLogger(__name__)
    try:
        out.mkdir(parents=True, exist_ok=True)

        path = out / "trials.csv"
        records_frame(ledger.records).to_csv(path, index=False, float_format=FLOAT_FORMAT)
        written.append(path)

        path = out / "summary.json"
        text = json.dumps(_jsonable(summary(ledger)), indent=2, allow_nan=False)
        path.write_text(text + "\n", encoding="utf-8")
        written.append(path)

        path = out / "visits.csv"
        _write_counter(ledger.visits, path)
        written.append(path)

        if ledger.best is not None:
            path = out / "visits_before_best.csv"
            _write_counter(ledger.metrics.get_visits_before_best(), path)
            written.append(path)

        path = out / "trace.csv"
        ledger.metrics.get_trace().to_csv(path, index=False, float_format=FLOAT_FORMAT)
        written.append(path)

        for episode, matrix in zip(ledger.heatmap_episodes, ledger.heatmaps):
            path = out / f"rl_heatmap_ep{episode}.tsv"
            np.savetxt(path, np.atleast_2d(matrix), fmt=FLOAT_FORMAT, delimiter="\t")
            written.append(path)
    except OSError as e:
        raise LedgerError(f"cannot export ledger to {out}: {e}") from e

    logger.info(f"Ledger {ledger.run_id} exported to {out} ({len(written)} files)")
    return written


def _read_counter(path: Path) -> VisitCounter:
    frame = pd.read_csv(path)
    return VisitCounter(frame["count"].to_numpy(dtype=np.int64), frame["sample_id"].to_numpy(dtype=np.int64))


def _text(value) -> str:
    return value if isinstance(value, str) else ""


def parse_records(frame: pd.DataFrame) -> List[TrialRecord]:
    missing = [c for c in TRIAL_COLUMNS if c not in frame.columns]
    if missing:
        raise ValueError(f"missing columns: {', '.join(missing)}")
    records = []
    for row in frame.itertuples(index=False):
        records.append(TrialRecord(
            trial_index=int(row.trial_index),
            hyperparams=HyperParams(float(row.sigma), float(row.eta)),
            val_loss=float(row.val_loss),
            val_accuracy=float(row.val_accuracy),
            epsilon=float(row.epsilon),
            reward=float(row.reward),
            status=_text(row.status),
            cost=TrialCost(int(row.steps), int(row.sample_visits), float(row.wall_seconds)),
            strategy=_text(row.strategy),
            seed=int(row.seed),
        ))
    return records


def load_ledger(run_dir: PathLike) -> Ledger:
    """Read an exported ledger back; per-trial visit increments are not restored."""
    run_dir = Path(run_dir)
    try:
        frame = pd.read_csv(run_dir / "trials.csv", float_precision="round_trip")
        records = parse_records(frame)
        meta = json.loads((run_dir / "summary.json").read_text(encoding="utf-8"))
        visits = _read_counter(run_dir / "visits.csv")
        before_best = None
        if (run_dir / "visits_before_best.csv").exists():
            before_best = _read_counter(run_dir / "visits_before_best.csv")
        elif any(r.ok for r in records):
            raise LedgerError("visits_before_best.csv is missing")
        heatmap_files = sorted(
            (int(m.group(1)), p) for p in run_dir.iterdir() if (m := HEATMAP_PATTERN.search(p.name))
        )
        heatmaps = [np.atleast_2d(np.loadtxt(p, delimiter="\t")) for _, p in heatmap_files]
        weights = meta.get("weights") or {}
        return Ledger(
            run_id=meta.get("run_id", run_dir.name),
            strategy=meta.get("strategy", ""),
            seed=int(meta.get("seed", 0)),
            config=meta.get("config") or {},
            records=records,
            visits=visits,
            weights=RewardWeights(weights.get("alpha_u", 0.5), weights.get("alpha_p", 0.5)),
            heatmaps=heatmaps,
            surrogate_mse=[float(v) for v in meta.get("surrogate_mse") or []],
            accountant_audit=meta.get("accountant_audit") or {},
            stored_visits_before_best=before_best,
            heatmap_episodes=[episode for episode, _ in heatmap_files],
        )
    except OSError as e:
        raise LedgerError(f"cannot read ledger in {run_dir}: {e}") from e
    except (ValueError, KeyError, TypeError) as e:
        raise LedgerError(f"malformed ledger in {run_dir}: {e}") from e
