import contextlib
import io
import json
import logging
import os
import tempfile
import unittest

import numpy as np
import pandas as pd

from data_collector import VisitCounter
from ledger import Ledger, export
from main import EXIT_CONFIG, EXIT_DATASET, EXIT_OK, EXIT_SEARCH, main
from objective import OK, RewardWeights, TrialCost, TrialRecord
from privacy_accountant import find_noise_multiplier
from search_space import HyperParams

SMALL_RUN = {
    "dataset": {"source": "synthetic", "n_train": 60, "n_valid": 20, "synthetic": {"n": 100, "d": 5}},
    "train": {"epochs": 1, "batch_size": 20},
    "strategy": {"name": "grid", "grid": {"per_dim": [2, 2]}},
    "budget": {"max_trials": 4},
}


def fixture_ledger(strategy="grid", rewards=(0.25, 0.5, 0.375)):
    records = [
        TrialRecord(
            trial_index=i,
            hyperparams=HyperParams(1.0 + i, 0.01),
            val_loss=0.25,
            val_accuracy=0.75,
            epsilon=2.0,
            reward=value,
            status=OK,
            cost=TrialCost(4, 6, 1.0),
            strategy=strategy,
            seed=0,
            visits=np.ones(6, dtype=np.int64),
        )
        for i, value in enumerate(rewards)
    ]
    return Ledger(f"{strategy}-seed0", strategy, 0, {}, records,
                  VisitCounter(np.full(6, len(records))), RewardWeights(0.5, 0.5))


class CliTests(unittest.TestCase):
    def setUp(self):
        self.temp_dir = tempfile.TemporaryDirectory()

    def tearDown(self):
        root = logging.getLogger()
        for handler in list(root.handlers):
            handler.close()
            root.removeHandler(handler)
        self.temp_dir.cleanup()

    def _path(self, *parts):
        return os.path.join(self.temp_dir.name, *parts)

    def _config(self, payload, name="run.json"):
        path = self._path(name)
        with open(path, "w", encoding="utf-8") as f:
            f.write(payload if isinstance(payload, str) else json.dumps(payload))
        return path

    def _main(self, argv):
        out, err = io.StringIO(), io.StringIO()
        with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
            code = main(argv)
        return code, out.getvalue(), err.getvalue()

    def test_malformed_config_creates_nothing(self):
        runs = self._path("runs")
        code, _, err = self._main(["run", "--config", self._config("{broken"), "--out", runs])
        self.assertEqual(code, EXIT_CONFIG)
        self.assertIn("error:", err)
        self.assertFalse(os.path.exists(runs))

    def test_unknown_key_exits_with_config_error(self):
        config = self._config({**SMALL_RUN, "dataset": {"bogus": 1}})
        code, _, err = self._main(["run", "--config", config, "--out", self._path("runs")])
        self.assertEqual(code, EXIT_CONFIG)
        self.assertIn("dataset.bogus", err)

    def test_synthetic_grid_run(self):
        runs = self._path("runs")
        code, out, _ = self._main(["run", "--config", self._config(SMALL_RUN), "--out", runs])
        self.assertEqual(code, EXIT_OK)
        self.assertIn("grid-seed0: best reward", out)

        run_dir = self._path("runs", "grid-seed0")
        trials = pd.read_csv(os.path.join(run_dir, "trials.csv"))
        self.assertEqual(len(trials), 4)
        for name in ("summary.json", "visits.csv", "trace.csv", "run.log"):
            self.assertTrue(os.path.exists(os.path.join(run_dir, name)), name)
        with open(os.path.join(run_dir, "summary.json"), encoding="utf-8") as f:
            summary = json.load(f)
        self.assertEqual(summary["accountant_audit"]["steps_per_trial"], 3)
        self.assertEqual(summary["config"]["budget"]["max_trials"], 4)

    def test_runs_are_deterministic(self):
        config = self._config(SMALL_RUN)
        frames = []
        for out in ("a", "b"):
            code, _, _ = self._main(["run", "--config", config, "--out", self._path(out), "--seed", "2"])
            self.assertEqual(code, EXIT_OK)
            frame = pd.read_csv(self._path(out, "grid-seed2", "trials.csv"), float_precision="round_trip")
            frames.append(frame.drop(columns=["wall_seconds"]))
        pd.testing.assert_frame_equal(frames[0], frames[1])

    def test_strategy_flag_overrides_config(self):
        code, _, _ = self._main(["run", "--config", self._config(SMALL_RUN), "--out", self._path("runs"),
                                 "--strategy", "tpe"])
        self.assertEqual(code, EXIT_OK)
        trials = pd.read_csv(self._path("runs", "bayesian-seed0", "trials.csv"))
        self.assertEqual(len(trials), 4)
        self.assertTrue((trials["strategy"] == "bayesian").all())

    def test_missing_mnist_files(self):
        config = self._config({
            **SMALL_RUN,
            "dataset": {"source": "mnist", "mnist_images": self._path("no-images"),
                        "mnist_labels": self._path("no-labels"), "n_train": 60, "n_valid": 20},
        })
        code, _, err = self._main(["run", "--config", config, "--out", self._path("runs")])
        self.assertEqual(code, EXIT_DATASET)
        self.assertIn("dataset", err)

    def test_compare(self):
        export(fixture_ledger("grid"), self._path("grid-seed0"))
        export(fixture_ledger("rl", (0.125, 0.625)), self._path("rl-seed0"))
        code, _, _ = self._main(["compare", self._path("grid-seed0"), self._path("rl-seed0"),
                                 "--out", self._path("report")])
        self.assertEqual(code, EXIT_OK)
        frame = pd.read_csv(self._path("report", "comparison.csv"))
        self.assertEqual(list(frame["run_id"]), ["grid-seed0", "rl-seed0", "median", "median"])
        rl = frame[frame["run_id"] == "rl-seed0"].iloc[0]
        self.assertEqual(rl["baseline_reward"], 0.5)
        self.assertEqual(rl["trials_to_baseline"], 2)
        with open(self._path("report", "comparison.json"), encoding="utf-8") as f:
            self.assertEqual(len(json.load(f)["rows"]), 4)

    def test_compare_without_grid(self):
        export(fixture_ledger("bayesian"), self._path("bayesian-seed0"))
        code, _, err = self._main(["compare", self._path("bayesian-seed0"), "--out", self._path("report")])
        self.assertEqual(code, EXIT_SEARCH)
        self.assertIn("baseline unavailable", err)

    def test_compare_unreadable_ledger(self):
        code, _, _ = self._main(["compare", self._path("nowhere"), "--out", self._path("report")])
        self.assertEqual(code, EXIT_DATASET)

    def test_report_golden(self):
        export(fixture_ledger(), self._path("grid-seed0"))
        code, out, _ = self._main(["report", self._path("grid-seed0"), "--baseline", "0.875"])
        self.assertEqual(code, EXIT_OK)
        self.assertEqual(out.splitlines(), [
            "run: grid-seed0",
            "strategy: grid",
            "seed: 0",
            "trials: 3 (3 ok)",
            "best trial: 1",
            "best reward: 0.5",
            "best reward percent: 50",
            "sigma: 2",
            "eta: 0.01",
            "epsilon: 2",
            "val_accuracy: 0.75",
            "val_loss: 0.25",
            "visits before best: total 12, max 2",
            "baseline: 0.875",
            "baseline unreached",
        ])

    def test_report_reached_baseline(self):
        export(fixture_ledger(), self._path("grid-seed0"))
        code, out, _ = self._main(["report", self._path("grid-seed0"), "--baseline", "0.375"])
        self.assertEqual(code, EXIT_OK)
        self.assertIn("trials to baseline: 2", out)
        self.assertIn("sample visits to baseline: 12", out)
        self.assertIn("wall seconds to baseline: 2", out)

    def test_report_without_visit_snapshot(self):
        export(fixture_ledger(), self._path("grid-seed0"))
        os.remove(self._path("grid-seed0", "visits_before_best.csv"))
        code, _, err = self._main(["report", self._path("grid-seed0")])
        self.assertEqual(code, EXIT_DATASET)
        self.assertIn("visits_before_best.csv", err)
        code, _, _ = self._main(["compare", self._path("grid-seed0"), "--out", self._path("report")])
        self.assertEqual(code, EXIT_DATASET)

    def test_report_sigma_for_target_epsilon(self):
        ledger = fixture_ledger()
        ledger.accountant_audit = {"sampling_rate": 0.1, "steps_per_trial": 30, "delta": 1e-5}
        export(ledger, self._path("grid-seed0"))
        code, out, _ = self._main(["report", self._path("grid-seed0"), "--target-epsilon", "2"])
        self.assertEqual(code, EXIT_OK)
        expected = find_noise_multiplier(0.1, 30, 1e-5, 2.0)
        self.assertIn(f"sigma for epsilon 2: {expected:.17g}", out.splitlines())

        code, out, _ = self._main(["report", self._path("grid-seed0"), "--target-epsilon", "0.01"])
        self.assertEqual(code, EXIT_OK)
        self.assertIn("sigma for epsilon 0.01: unreachable", out)

    def test_report_target_epsilon_without_audit(self):
        export(fixture_ledger(), self._path("grid-seed0"))
        code, out, _ = self._main(["report", self._path("grid-seed0"), "--target-epsilon", "2"])
        self.assertEqual(code, EXIT_OK)
        self.assertIn("sigma for epsilon 2: unavailable (no accountant audit)", out)

    def test_report_unreadable_dir(self):
        code, _, _ = self._main(["report", self._path("nowhere")])
        self.assertEqual(code, EXIT_DATASET)


if __name__ == "__main__":
    unittest.main()
