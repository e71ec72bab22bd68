#!/usr/bin/env python3
"""
Command Line Interface for coordconv-lab

Subcommands:
    dataset   generate Not-so-Clevr, both splits and the split sum images
    train     train one model on one task and split
    sweep     run a hyperparameter grid and rank the results
    report    compare finished runs and render prediction images
    selftest  gradient checks, oracle equivalences and a short deterministic run

Exit codes: 0 ok, 1 unexpected failure, 2 usage, 3 divergence, 4 selftest failure,
130 interrupted (SIGINT or SIGTERM; partial artifacts may remain).
COORDCONV_LAB_THREADS caps the BLAS/OpenMP threads used by numpy kernels.
"""

import os

# must run before numpy is first imported
_threads = os.environ.get('COORDCONV_LAB_THREADS')
if _threads:
    for _var in ('OMP_NUM_THREADS', 'OPENBLAS_NUM_THREADS', 'MKL_NUM_THREADS'):
        os.environ[_var] = _threads

import argparse  # noqa: E402
import asyncio  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from typing import Any, Dict, List, Optional  # noqa: E402

from coordconv_lab import notsoclevr  # noqa: E402
from coordconv_lab.model_zoo import MODEL_NAMES  # noqa: E402
from coordconv_lab.report import RunReport  # noqa: E402
from coordconv_lab.selftest import SelfTest, passed  # noqa: E402
from coordconv_lab.train_eval import (FAMILIES, LOSSES, REGRESSION_INPUTS, TASKS, DivergenceError,  # noqa: E402
                                      TrainConfig, load_grid, run_training, summarize_sweep, sweep_async,
                                      write_results_csv)
from coordconv_lab.utils import load_config, section, setup_logging, setup_signal_handlers  # noqa: E402

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_DIVERGED = 3
EXIT_SELFTEST = 4
EXIT_INTERRUPTED = 130

logger = logging.getLogger('coordconv_lab.cli')


def parse_arguments(argv: Optional[List[str]] = None):
    """Parse command line arguments"""
    parser = argparse.ArgumentParser(description='coordconv-lab - CoordConv experiments on Not-so-Clevr')
    parser.add_argument('--config', default=None, help='Path to JSON configuration file')
    parser.add_argument('--verbose', '-v', action='store_true', help='Enable verbose output')
    parser.add_argument('--debug', action='store_true', help='Enable debug logging')
    commands = parser.add_subparsers(dest='command', required=True)

    dataset = commands.add_parser('dataset', help='Generate dataset, splits and sum images')
    dataset.add_argument('--out', default='data', help='Output directory (default: data)')
    dataset.add_argument('--split-seed', type=int, default=0, help='Seed of the uniform split (default: 0)')
    dataset.add_argument('--scale', type=int, default=4, help='PGM upscaling factor (default: 4)')

    train = commands.add_parser('train', help='Train one model')
    train.add_argument('task', choices=TASKS, help='cls, reg or ren')
    train.add_argument('model', choices=MODEL_NAMES, help='Architecture name')
    train.add_argument('split', choices=notsoclevr.SPLIT_KINDS, help='uniform or quadrant')
    train.add_argument('--lr', type=float, help='Learning rate (> 0)')
    train.add_argument('--wd', type=float, help='Decoupled weight decay (>= 0)')
    train.add_argument('--batch', type=int, help='Batch size (16 or 32)')
    train.add_argument('--epochs', type=int, help='Epochs (1..1000)')
    train.add_argument('--seed', type=int, help='Run seed')
    train.add_argument('--with-r', action='store_true', help='Add the radius channel to CoordConv layers')
    train.add_argument('--fs', type=int, help='Deconv filter size (2, 3 or 4)')
    train.add_argument('--c-mult', type=int, help='Deconv channel multiplier')
    train.add_argument('--loss', choices=LOSSES, help='Override the task loss')
    train.add_argument('--regression-input', choices=REGRESSION_INPUTS, help='Regression input map')
    train.add_argument('--train-limit', type=int, help='Use only the first N training examples')
    train.add_argument('--test-limit', type=int, help='Use only the first N test examples')
    train.add_argument('--eval-every', type=int, help='Evaluate every N epochs')
    train.add_argument('--out', help='Run directory (default: <output_dir>/<model>_<task>_<split>_s<seed>)')
    train.add_argument('--no-timing', action='store_true', help='Omit wall-clock column from metrics.csv')

    sweep = commands.add_parser('sweep', help='Run a hyperparameter grid')
    sweep.add_argument('task', choices=TASKS, help='cls, reg or ren')
    sweep.add_argument('family', choices=FAMILIES, help='Model family')
    sweep.add_argument('grid', help='Grid JSON file')
    sweep.add_argument('--jobs', type=int, help='Concurrent runs (default: 1)')
    sweep.add_argument('--out', help='Results CSV (default: <output_dir>/sweep_<task>_<family>.csv)')
    sweep.add_argument('--no-timing', action='store_true', help='Omit wall-clock column for reproducible CSVs')

    report = commands.add_parser('report', help='Compare finished runs')
    report.add_argument('run_dirs', nargs='*', help='Run directories')
    report.add_argument('--out', help='Report directory (default: <output_dir>/report)')
    report.add_argument('--window', help='Zoom window as ROWSxCOLS (default: 5x9)')
    report.add_argument('--examples', type=int, help='Test examples with logit maps (default: 3)')

    selftest = commands.add_parser('selftest', help='Run self-checks')
    selftest.add_argument('--seed', type=int, default=0, help='Seed (default: 0)')
    selftest.add_argument('--trials', type=int, default=100, help='Gradient-check trials per operation')
    selftest.add_argument('--out', help='Output directory (default: <output_dir>/selftest)')

    return parser.parse_args(argv)


def train_overrides(args) -> Dict[str, Any]:
    return {
        'lr': args.lr,
        'weight_decay': args.wd,
        'batch_size': args.batch,
        'epochs': args.epochs,
        'seed': args.seed,
        'loss': args.loss,
        'regression_input': args.regression_input,
        'train_limit': args.train_limit,
        'test_limit': args.test_limit,
        'eval_every': args.eval_every,
    }


async def cmd_dataset(config: Dict[str, Any], args) -> int:
    """Write the dataset file, both split files and the split sum images"""
    dataset = notsoclevr.generate_dataset()
    splits = [notsoclevr.make_split('uniform', args.split_seed), notsoclevr.make_split('quadrant')]
    dataset_path = os.path.join(args.out, 'notsoclevr.bin')
    notsoclevr.write_dataset(dataset_path, dataset)
    for split in splits:
        notsoclevr.write_split(os.path.join(args.out, f"{split.kind}.split"), split)
    images = notsoclevr.write_sum_images(args.out, dataset, splits, scale=args.scale)
    print(f"Dataset written to {dataset_path} ({len(dataset)} examples, hash {dataset.content_hash()[:12]}); "
          f"{len(images)} sum images in {args.out}")
    return EXIT_OK


async def cmd_train(config: Dict[str, Any], args, argv: Optional[List[str]] = None) -> int:
    """Train one model and write metrics, checkpoint and manifest"""
    values = section(config, 'train')
    values.update({key: value for key, value in train_overrides(args).items() if value is not None})
    train_config = TrainConfig.from_dict(values)
    out_dir = args.out or os.path.join(config.get('output_dir', 'runs'),
                                       f"{args.model}_{args.task}_{args.split}_s{train_config.seed}")
    hyper = {'fs': args.fs, 'c_mult': args.c_mult}
    manifest = run_training(args.task, args.model, args.split, train_config, out_dir, hyper=hyper,
                            with_r=args.with_r, include_timing=not args.no_timing, argv=argv)
    summary = manifest['summary']
    metric = summary['metric']
    print(f"Training completed: {args.model} on {args.task}/{args.split}, "
          f"final train {metric} {summary[f'final_train_{metric}']:.4f}, "
          f"test {metric} {summary[f'final_test_{metric}']:.4f}. Results saved to {out_dir}")
    return EXIT_OK


async def cmd_sweep(config: Dict[str, Any], args) -> int:
    """Run every grid point and write ranked results plus a best-per-family summary"""
    sweep_config = section(config, 'sweep', jobs=1, timing=True)
    jobs = args.jobs if args.jobs is not None else sweep_config['jobs']
    include_timing = sweep_config['timing'] and not args.no_timing
    grid = load_grid(args.grid)
    base = TrainConfig.from_dict(section(config, 'train'))
    results = await sweep_async(args.task, args.family, grid, base, jobs=jobs, include_timing=include_timing)

    out_path = args.out or os.path.join(config.get('output_dir', 'runs'), f"sweep_{args.task}_{args.family}.csv")
    write_results_csv(out_path, results)
    summary_path = os.path.splitext(out_path)[0] + '_best.csv'
    write_results_csv(summary_path, summarize_sweep(results))
    failed = int((results['status'] != 'success').sum())
    print(f"Sweep completed: {len(results)} runs ({failed} failed). Results saved to {out_path}")
    return EXIT_OK


def parse_window(text: Optional[str], default) -> tuple:
    if not text:
        return tuple(default)
    try:
        rows, cols = (int(v) for v in text.lower().split('x'))
    except ValueError:
        raise ValueError(f"--window must look like ROWSxCOLS, got {text!r}")
    if rows < 1 or cols < 1:
        raise ValueError(f"--window extents must be positive, got {text!r}")
    return rows, cols


async def cmd_report(config: Dict[str, Any], args) -> int:
    """Comparison table and prediction images for finished runs"""
    report_config = section(config, 'report', window=[5, 9], examples=3)
    report_config['window'] = parse_window(args.window, report_config['window'])
    if args.examples is not None:
        report_config['examples'] = args.examples
    out_dir = args.out or os.path.join(config.get('output_dir', 'runs'), 'report')
    table = RunReport(report_config).run(args.run_dirs, out_dir)
    print(f"Report completed for {len(table)} runs. Results saved to {out_dir}")
    return EXIT_OK


async def cmd_selftest(config: Dict[str, Any], args) -> int:
    """Run every self-check; exit 4 if any fails"""
    out_dir = args.out or os.path.join(config.get('output_dir', 'runs'), 'selftest')
    results = SelfTest({'seed': args.seed, 'trials': args.trials}).run(out_dir)
    for result in results:
        print(f"{result['status']:>8}  {result['check']}: {result['detail']}")
    if not passed(results):
        print(f"Selftest failed. Details in {out_dir}")
        return EXIT_SELFTEST
    print(f"Selftest passed. Results saved to {out_dir}")
    return EXIT_OK


async def run_command(config: Dict[str, Any], args, argv: Optional[List[str]] = None) -> int:
    """Dispatch a parsed command"""
    if args.command == 'dataset':
        return await cmd_dataset(config, args)
    elif args.command == 'train':
        return await cmd_train(config, args, argv)
    elif args.command == 'sweep':
        return await cmd_sweep(config, args)
    elif args.command == 'report':
        return await cmd_report(config, args)
    elif args.command == 'selftest':
        return await cmd_selftest(config, args)
    else:
        raise ValueError(f"Unknown command: {args.command}")


async def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point"""
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = parse_arguments(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE

    # Set up signal handlers for graceful shutdown
    setup_signal_handlers()

    # Load configuration
    try:
        config = load_config(args.config)
    except Exception as e:
        print(f"Failed to load configuration: {str(e)}")
        return EXIT_USAGE

    # Set up logging
    if args.debug:
        config.setdefault('logging', {})['level'] = 'DEBUG'
    elif args.verbose:
        config.setdefault('logging', {})['level'] = 'INFO'

    setup_logging(config)

    try:
        return await run_command(config, args, argv)
    except DivergenceError as e:
        print(f"Training diverged: {str(e)}")
        logger.error(f"Divergence with config {e.config}")
        return EXIT_DIVERGED
    except KeyboardInterrupt as e:
        logger.warning(f"{args.command} interrupted ({e}); outputs may be incomplete")
        print(f"{args.command} interrupted")
        return EXIT_INTERRUPTED
    except (ValueError, FileNotFoundError) as e:
        print(f"Error: {str(e)}")
        return EXIT_USAGE
    except Exception as e:
        logger.exception(f"Unexpected failure in {args.command}")
        print(f"{args.command} failed: {str(e)}")
        return EXIT_FAILURE


if __name__ == '__main__':
    sys.exit(asyncio.run(main()))
