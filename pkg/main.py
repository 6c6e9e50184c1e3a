"""
Command-line entry point for DPSGD hyperparameter tuning.

    dp-tune run --config run.json [--strategy rl] [--seed 1] [--jobs 4] [--out runs] [--verbose]
    dp-tune compare runs/grid-seed0 runs/rl-seed0 --out report
    dp-tune report runs/rl-seed0 [--baseline 0.72] [--target-epsilon 2]
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from analytics import BaselineUnavailableError, compare
from config import ConfigError, RunConfig, load_run_config
from data_collector import DataCollector, DatasetError
from ledger import Ledger, LedgerError, export, load_ledger
from objective import TrialContext, TrialEvaluator, TrialRecord, reward_percent
from optimizers import SearchFailedError, SearchResult, UnknownStrategyError, run_strategy
from privacy_accountant import (
    DEFAULT_ORDERS,
    MechanismParams,
    find_noise_multiplier,
    rdp_of_run,
    steps_for,
    to_epsilon,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATASET = 3
EXIT_SEARCH = 4

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"


def configure_logging(log_file: Optional[Path] = None, verbose: bool = False):
    """Log to stderr and, for runs, to run.log in the run directory."""
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if log_file is not None:
        handlers.append(logging.FileHandler(log_file, encoding="utf-8"))
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format=LOG_FORMAT,
        handlers=handlers,
        force=True,
    )


def _fail(message: str, code: int) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def accountant_audit(cfg: RunConfig, n_train: int, best: Optional[TrialRecord]) -> dict:
    """Accountant inputs of every trial, plus the RDP curve behind the best trial's epsilon."""
    q = cfg.train.batch_size / n_train
    steps = steps_for(n_train, cfg.train.batch_size, cfg.train.epochs)
    audit = {
        "sampling_rate": q,
        "steps_per_trial": steps,
        "delta": cfg.train.delta,
        "orders": [DEFAULT_ORDERS[0], DEFAULT_ORDERS[-1]],
    }
    if best is not None:
        curve = rdp_of_run(MechanismParams(q, best.sigma, steps))
        spend = to_epsilon(curve, cfg.train.delta)
        audit["best_trial"] = {
            "sigma": best.sigma,
            "epsilon": spend.epsilon,
            "order": spend.order,
            "rdp": curve.to_dict(),
        }
    return audit


def execute_run(cfg: RunConfig, run_dir: Path) -> SearchResult:
    """Load data, run the configured search and export its ledger into run_dir."""
    logger = logging.getLogger(__name__)
    ds = cfg.dataset
    collector = DataCollector(
        source=ds.source,
        n_train=ds.n_train,
        n_valid=ds.n_valid,
        seed=cfg.seed,
        mnist_images=ds.mnist_images,
        mnist_labels=ds.mnist_labels,
        cifar_batches=ds.cifar_batches,
        synthetic_n=ds.synthetic.n,
        synthetic_d=ds.synthetic.d,
        synthetic_classes=ds.synthetic.classes,
        synthetic_separation=ds.synthetic.separation,
    )
    train, valid = collector.collect()

    step_log_dir = None
    if cfg.train.step_log:
        step_log_dir = run_dir / "steps"
        step_log_dir.mkdir(parents=True, exist_ok=True)
    context = TrialContext(
        train=train,
        valid=valid,
        template=cfg.train.to_template(),
        weights=cfg.reward.to_weights(),
        base_seed=cfg.seed,
        step_log_dir=str(step_log_dir) if step_log_dir else None,
    )
    space = cfg.search_space.to_space()
    logger.info(
        f"Starting {cfg.strategy.canonical} search over {space.shape[0]}x{space.shape[1]} lattice, "
        f"budget {cfg.budget.max_trials} trials, seed {cfg.seed}, jobs {cfg.jobs}"
    )
    result = run_strategy(
        cfg.strategy.canonical,
        space,
        cfg.strategy.settings(),
        cfg.budget,
        TrialEvaluator(context),
        seed=cfg.seed,
        jobs=cfg.jobs,
    )
    ledger = Ledger.from_result(
        result,
        run_id=cfg.run_id,
        config=cfg.model_dump(mode="json"),
        sample_ids=train.sample_ids,
        weights=context.weights,
        accountant_audit=accountant_audit(cfg, len(train), result.best),
    )
    export(ledger, run_dir)
    return result


def cmd_run(args: argparse.Namespace) -> int:
    overrides = {
        "strategy.name": args.strategy,
        "seed": args.seed,
        "jobs": args.jobs,
        "output_dir": args.out,
    }
    try:
        cfg = load_run_config(args.config, overrides)
    except ConfigError as e:
        return _fail(str(e), EXIT_CONFIG)

    run_dir = cfg.run_dir()
    try:
        run_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        return _fail(f"cannot create output directory {run_dir}: {e}", EXIT_CONFIG)
    configure_logging(run_dir / "run.log", args.verbose)

    try:
        result = execute_run(cfg, run_dir)
        best = result.require_best()
    except DatasetError as e:
        return _fail(f"dataset: {e}", EXIT_DATASET)
    except (UnknownStrategyError, SearchFailedError) as e:
        return _fail(f"search: {e}", EXIT_SEARCH)
    except LedgerError as e:
        return _fail(str(e), EXIT_SEARCH)

    print(f"{cfg.run_id}: best reward {best.reward:.17g} at trial {best.trial_index} "
          f"(sigma={best.sigma:.17g}, eta={best.eta:.17g}); ledger in {run_dir}")
    return EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    try:
        ledgers = [load_ledger(d) for d in args.dirs]
    except LedgerError as e:
        return _fail(str(e), EXIT_DATASET)
    try:
        report = compare(ledgers)
    except BaselineUnavailableError as e:
        return _fail(str(e), EXIT_SEARCH)

    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        report.to_frame().to_csv(out / "comparison.csv", index=False, float_format="%.17g")
        text = json.dumps(report.to_dict(), indent=2, allow_nan=False)
        (out / "comparison.json").write_text(text + "\n", encoding="utf-8")
    except (OSError, ValueError) as e:
        return _fail(f"cannot write comparison to {out}: {e}", EXIT_DATASET)
    logging.getLogger(__name__).info(f"Comparison of {len(ledgers)} ledgers written to {out}")
    return EXIT_OK


def sigma_for_target(ledger: Ledger, target_epsilon: float) -> str:
    """Smallest sigma meeting target_epsilon under the run's own sampling rate, steps and delta."""
    audit = ledger.accountant_audit
    if not all(key in audit for key in ("sampling_rate", "steps_per_trial", "delta")):
        return "unavailable (no accountant audit)"
    try:
        sigma = find_noise_multiplier(audit["sampling_rate"], int(audit["steps_per_trial"]),
                                      audit["delta"], target_epsilon)
    except ValueError as e:
        return f"unreachable ({e})"
    return f"{sigma:.17g}"


def format_report(ledger: Ledger, baseline: Optional[float] = None,
                  target_epsilon: Optional[float] = None) -> str:
    """Plain-text summary; numbers use 17 significant digits like trials.csv."""
    n_ok = sum(r.ok for r in ledger.records)
    lines = [
        f"run: {ledger.run_id}",
        f"strategy: {ledger.strategy}",
        f"seed: {ledger.seed}",
        f"trials: {len(ledger.records)} ({n_ok} ok)",
    ]
    if target_epsilon is not None:
        lines.append(f"sigma for epsilon {target_epsilon:.17g}: {sigma_for_target(ledger, target_epsilon)}")
    best = ledger.best
    if best is None:
        lines.append("best: none (no successful trials)")
        return "\n".join(lines) + "\n"

    visit_metrics = ledger.metrics.get_visit_metrics()
    lines += [
        f"best trial: {best.trial_index}",
        f"best reward: {best.reward:.17g}",
        f"best reward percent: {reward_percent(best.reward, ledger.weights):.17g}",
        f"sigma: {best.sigma:.17g}",
        f"eta: {best.eta:.17g}",
        f"epsilon: {best.epsilon:.17g}",
        f"val_accuracy: {best.val_accuracy:.17g}",
        f"val_loss: {best.val_loss:.17g}",
        f"visits before best: total {visit_metrics['total']}, max {visit_metrics['max']}",
    ]
    if baseline is not None:
        cost = ledger.metrics.get_cost_to_baseline(baseline)
        lines.append(f"baseline: {baseline:.17g}")
        if cost is None:
            lines.append("baseline unreached")
        else:
            lines += [
                f"trials to baseline: {cost.trials}",
                f"sample visits to baseline: {cost.sample_visits}",
                f"wall seconds to baseline: {cost.wall_seconds:.17g}",
            ]
    return "\n".join(lines) + "\n"


def cmd_report(args: argparse.Namespace) -> int:
    try:
        ledger = load_ledger(args.dir)
    except LedgerError as e:
        return _fail(str(e), EXIT_DATASET)
    sys.stdout.write(format_report(ledger, args.baseline, args.target_epsilon))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dp-tune", description="Tune DPSGD noise multiplier and learning rate.")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="run one search and export its ledger")
    run.add_argument("--config", required=True, help="JSON run config")
    run.add_argument("--strategy", help="grid, evolutionary, bayesian or rl")
    run.add_argument("--seed", type=int)
    run.add_argument("--jobs", type=int)
    run.add_argument("--out", help="output root (default $DP_TUNE_OUT or ./runs)")
    run.add_argument("--verbose", action="store_true", help="debug logging")
    run.set_defaults(handler=cmd_run)

    cmp = commands.add_parser("compare", help="compare exported ledgers against the grid baseline")
    cmp.add_argument("dirs", nargs="+", help="ledger directories")
    cmp.add_argument("--out", required=True, help="directory for comparison.csv and comparison.json")
    cmp.set_defaults(handler=cmd_compare)

    rep = commands.add_parser("report", help="print a ledger summary")
    rep.add_argument("dir", help="ledger directory")
    rep.add_argument("--baseline", type=float, help="reward threshold for the cost-to-baseline line")
    rep.add_argument("--target-epsilon", type=float,
                     help="also print the smallest sigma meeting this epsilon with the run's accountant inputs")
    rep.set_defaults(handler=cmd_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command != "run":
        configure_logging()
    return args.handler(args)


if __name__ == "__main__":
    sys.exit(main())
