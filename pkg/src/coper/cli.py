"""Command-line interface: train one run, run the comparison grid, gradcheck.

    coper train --model coper --removal 0.25 --seed 1 --data synthetic --out runs/demo
    coper grid --models coper,lstm,perceiver --removals 0,0.25,0.5,0.75 --seeds 1,2,3 --out runs/grid
    coper gradcheck

Exit status is nonzero when a run fails, a grid has failed cells, or a
gradient check exceeds its tolerance.
"""

from __future__ import annotations

import argparse
import sys

from .gradcheck import run_gradient_suite
from .harness import ExperimentConfig, TrainingDiverged, format_table, run_grid, train


def _add_common(parser):
    parser.add_argument("--data", default="synthetic",
                        help="'synthetic' or a path to an external dataset file")
    parser.add_argument("--lr", type=float, default=1e-4)
    parser.add_argument("--patience", type=int, default=10)
    parser.add_argument("--batch-size", type=int, default=64)
    parser.add_argument("--max-epochs", type=int, default=100)
    parser.add_argument("--dropout", type=float, default=0.5)
    parser.add_argument("--n-samples", type=int, default=1000,
                        help="synthetic dataset size")
    parser.add_argument("--features", type=int, default=76,
                        help="synthetic feature count")
    parser.add_argument("--noise-sd", type=float, default=0.3,
                        help="synthetic observation noise")
    parser.add_argument("--out", default=None, help="output directory")


def _config_from_args(args, model, removal, seed, out_dir):
    return ExperimentConfig(model=model, removal=removal, seed=seed, data=args.data,
                            lr=args.lr, max_epochs=args.max_epochs, patience=args.patience,
                            batch_size=args.batch_size, dropout=args.dropout,
                            n_samples=args.n_samples, features=args.features,
                            noise_sd=args.noise_sd, out_dir=out_dir)


def _cmd_train(args):
    config = _config_from_args(args, args.model, args.removal, args.seed, args.out)
    try:
        report = train(config)
    except TrainingDiverged as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 1
    print(f"model={config.model} removal={config.removal:g} seed={config.seed}")
    print(f"epochs={report.epochs_run} best_epoch={report.best_epoch} "
          f"val_auroc={max(report.val_auroc):.4f} test_auroc={report.test_auroc:.4f} "
          f"wall={report.wall_time_s:.1f}s")
    if config.out_dir:
        print(f"wrote {config.out_dir}/report.json and checkpoint.npz")
    return 0


def _cmd_grid(args):
    models = [m.strip() for m in args.models.split(",") if m.strip()]
    removals = [float(r) for r in args.removals.split(",")]
    seeds = [int(s) for s in args.seeds.split(",")]
    base = _config_from_args(args, models[0], removals[0], seeds[0], None)
    result = run_grid(models, removals, seeds, base, out_dir=args.out)
    print(format_table(result.rows))
    if args.out:
        print(f"wrote {args.out}/table.csv, table.txt, summary.json")
    if result.failures:
        for key, msg in result.failures.items():
            print(f"FAILED cell {key}: {msg}", file=sys.stderr)
        return 1
    return 0


def _cmd_gradcheck(args):
    results = run_gradient_suite(verbose=True)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} gradient checks passed")
    return 1 if failed else 0


def main(argv=None):
    parser = argparse.ArgumentParser(prog="coper",
                                     description="Continuous-time irregular series classification toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train one model configuration")
    p_train.add_argument("--model", required=True, choices=("coper", "lstm", "perceiver"))
    p_train.add_argument("--removal", type=float, default=0.0,
                         help="fraction of steps to remove: 0, 0.25, 0.5 or 0.75")
    p_train.add_argument("--seed", type=int, default=1)
    _add_common(p_train)
    p_train.set_defaults(func=_cmd_train)

    p_grid = sub.add_parser("grid", help="run the model x removal x seed comparison")
    p_grid.add_argument("--models", default="coper,lstm,perceiver")
    p_grid.add_argument("--removals", default="0,0.25,0.5,0.75")
    p_grid.add_argument("--seeds", default="1,2,3")
    _add_common(p_grid)
    p_grid.set_defaults(func=_cmd_grid)

    p_gc = sub.add_parser("gradcheck", help="run the finite-difference invariant suite")
    p_gc.set_defaults(func=_cmd_gradcheck)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
