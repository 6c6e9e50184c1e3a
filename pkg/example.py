"""
Example script: tune sigma and eta with every strategy on synthetic data
and compare them against the grid baseline.
"""

import logging
from pathlib import Path

from analytics import compare
from data_collector import DataCollector
from ledger import Ledger, export
from objective import RewardWeights, TrainTemplate, TrialContext, TrialEvaluator
from optimizers import EvoConfig, GridConfig, RlConfig, TpeConfig, run_strategy
from scheduler import Budget
from search_space import SearchSpace


def main():
    logging.basicConfig(level=logging.WARNING)
    print("DPSGD Tuning Example")
    print("=" * 50)

    out_dir = Path("example_runs")
    seed = 0

    print("1. Building a synthetic dataset...")
    train, valid = DataCollector("synthetic", n_train=400, n_valid=100, seed=seed,
                                 synthetic_n=600, synthetic_d=10).collect()
    print(f"   {len(train)} train / {len(valid)} validation samples, {train.num_classes} classes")
    print()

    context = TrialContext(
        train=train,
        valid=valid,
        template=TrainTemplate(epochs=1, batch_size=50),
        weights=RewardWeights(0.5, 0.5),
        base_seed=seed,
    )
    evaluator = TrialEvaluator(context)
    space = SearchSpace.default()
    budget = Budget(max_trials=16)
    strategies = {
        "grid": GridConfig(per_dim=(4, 4)),
        "evolutionary": EvoConfig(population_size=4, generations=4),
        "bayesian": TpeConfig(n_startup=4),
        "rl": RlConfig(episodes=4, trials_per_episode=4),
    }

    print("2. Running searches (16 trials each)...")
    ledgers = []
    for name, settings in strategies.items():
        result = run_strategy(name, space, settings, budget, evaluator, seed=seed)
        ledger = Ledger.from_result(result, f"{name}-seed{seed}", {"example": True},
                                    sample_ids=train.sample_ids, weights=context.weights)
        export(ledger, out_dir / ledger.run_id)
        ledgers.append(ledger)
        best = result.best
        if best:
            print(f"   {name:>12}: reward {best.reward:.4f} "
                  f"(sigma={best.sigma:.2f}, eta={best.eta:.4f}, eps={best.epsilon:.3f})")
        else:
            print(f"   {name:>12}: no successful trials")
    print()

    print("3. Comparing against the grid baseline...")
    report = compare(ledgers)
    for row in report.ledger_rows():
        reached = f"after {row.trials_to_baseline} trials" if row.reached else "unreached"
        print(f"   {row.strategy:>12}: baseline {reached}, "
              f"{row.total_visits_to_best} sample visits before best")
    print()

    print("Done! Ledgers written under:")
    print(f"   - {out_dir}/")
    print("Compare them from the command line with:")
    print(f"   dp-tune compare {out_dir}/* --out {out_dir}/report")


if __name__ == "__main__":
    main()
