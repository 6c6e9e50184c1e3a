import os
import unittest

from analytics import budget_to_baseline, compare, median_by_strategy
from data_collector import DataCollector
from ledger import Ledger
from objective import RewardWeights, TrainTemplate, TrialContext, TrialEvaluator
from optimizers import GridConfig, run_strategy
from scheduler import Budget
from search_space import LINEAR, LOG, Dimension, SearchSpace

SEEDS = (0, 1, 2)
ADAPTIVE = ("evolutionary", "bayesian", "rl")
BUDGET = Budget(max_trials=60)

# Half-unit sigma rows and half-decade eta columns: 10 x 7 points.
COARSE_SPACE = SearchSpace((
    Dimension("sigma", 0.5, 5.0, 0.5, LINEAR),
    Dimension("eta", 1e-3, 1.0, 0.5, LOG),
))
# Privacy-leaning weights: the epsilon gap between neighbouring sigma rows
# outweighs any utility difference, so the grid's best lies in the last row it reaches.
WEIGHTS = RewardWeights(0.02, 1.0)


def run_study(collect, template: TrainTemplate):
    """Grid plus the three adaptive strategies for every seed, as ledgers."""
    ledgers = []
    for seed in SEEDS:
        train, valid = collect(seed)
        context = TrialContext(train, valid, template, WEIGHTS, base_seed=seed)
        evaluator = TrialEvaluator(context)
        for name in ("grid",) + ADAPTIVE:
            settings = GridConfig(per_dim=COARSE_SPACE.shape) if name == "grid" else None
            result = run_strategy(name, COARSE_SPACE, settings, BUDGET, evaluator, seed=seed)
            ledgers.append(Ledger.from_result(result, f"{name}-seed{seed}", {},
                                              sample_ids=train.sample_ids, weights=WEIGHTS))
    return ledgers


class StudyAssertions:
    ledgers = []

    def _medians(self):
        report = compare(self.ledgers)
        return {row.strategy: row for row in median_by_strategy(report.ledger_rows())}

    def test_every_run_has_a_successful_trial(self):
        for ledger in self.ledgers:
            self.assertIsNotNone(ledger.best, ledger.run_id)
            self.assertEqual(len(ledger.records), 60, ledger.run_id)

    def test_adaptive_strategies_revisit_no_more_before_best(self):
        medians = self._medians()
        for name in ADAPTIVE:
            self.assertLessEqual(medians[name].total_visits_to_best, medians["grid"].total_visits_to_best, name)

    def test_adaptive_strategies_reach_baseline_with_fewer_visits(self):
        medians = self._medians()
        grid = medians["grid"]
        for name in ADAPTIVE:
            self.assertTrue(medians[name].reached, name)
            self.assertLess(medians[name].visits_to_baseline, grid.visits_to_baseline, name)

    def test_cost_to_baseline_matches_report(self):
        report = compare(self.ledgers)
        by_id = {ledger.run_id: ledger for ledger in self.ledgers}
        for row in report.ledger_rows():
            cost = budget_to_baseline(by_id[row.run_id], row.baseline_reward)
            if cost is None:
                self.assertFalse(row.reached)
            else:
                self.assertEqual(cost.sample_visits, row.visits_to_baseline)


class SyntheticStudyTests(StudyAssertions, unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        def collect(seed):
            return DataCollector("synthetic", n_train=600, n_valid=200, seed=seed,
                                 synthetic_n=1000, synthetic_d=10).collect()

        cls.ledgers = run_study(collect, TrainTemplate(epochs=3, batch_size=60, hidden=(16,)))

    def test_visits_per_trial_are_full_epochs(self):
        for ledger in self.ledgers:
            for record in ledger.records:
                self.assertEqual(record.cost.sample_visits, 3 * 600)


@unittest.skipUnless(os.environ.get("DP_TUNE_MNIST_DIR"), "set DP_TUNE_MNIST_DIR to the raw MNIST files")
class MnistStudyTests(StudyAssertions, unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        root = os.environ["DP_TUNE_MNIST_DIR"]

        def collect(seed):
            return DataCollector(
                "mnist", n_train=2000, n_valid=500, seed=seed,
                mnist_images=os.path.join(root, "train-images-idx3-ubyte"),
                mnist_labels=os.path.join(root, "train-labels-idx1-ubyte"),
            ).collect()

        cls.ledgers = run_study(collect, TrainTemplate(epochs=3, batch_size=100))


if __name__ == "__main__":
    unittest.main()
