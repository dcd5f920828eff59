"""
Command-line runner for the Robust Invisible Watermark Lab

Usage:
    python run.py train --config configs/toy.json
    python run.py all --seed 3 --jobs 4 --out runs/seed3
    python run.py eval --check
"""
import argparse
import sys

from app import create_lab
from config import ExperimentConfig
from stages.evaluation import run_eval, run_game_verb
from stages.pipeline import run_edit, run_extract, run_inject
from stages.training import run_training
from utils.errors import ConfigError, LabError

VERBS = ('train', 'inject', 'edit', 'extract', 'eval', 'game', 'all')
FILTERABLE = ('train', 'inject', 'edit', 'extract')


def parse_args(argv=None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="Robust invisible watermark experiments")
    parser.add_argument('verb', choices=VERBS, help="Stage to run ('all' runs train through eval)")
    parser.add_argument('--config', type=str, default=None, help="Path to a JSON experiment config")
    parser.add_argument('--seed', type=int, default=None, help="Global seed (overrides config and RIW_SEED)")
    parser.add_argument('--jobs', type=int, default=None, help="Worker threads for per-image work")
    parser.add_argument('--out', type=str, default=None, help="Output directory")
    parser.add_argument('--stage-filter', type=str, default=None,
                        help="Only run the named sub-stage (e.g. codec, ae, main, alpha, baselines)")
    parser.add_argument('--check', action='store_true', help="eval: fail with exit code 4 on acceptance failures")
    parser.add_argument('--debug', action='store_true', help="Verbose console logging, no log file")
    return parser.parse_args(argv)


def run(args: argparse.Namespace):
    if args.stage_filter is not None and args.verb not in FILTERABLE:
        raise ConfigError(f"--stage-filter applies to {', '.join(FILTERABLE)}, not {args.verb!r}")
    cfg = ExperimentConfig.load(args.config)
    cfg = cfg.with_overrides(seed=args.seed, out_dir=args.out, jobs=args.jobs).validate()
    lab = create_lab(cfg, debug=args.debug)

    if args.verb in ('train', 'all'):
        run_training(lab, args.stage_filter)
    if args.verb in ('inject', 'all'):
        run_inject(lab, args.stage_filter)
    if args.verb in ('edit', 'all'):
        run_edit(lab, args.stage_filter)
    if args.verb in ('extract', 'all'):
        run_extract(lab, args.stage_filter)
    if args.verb in ('eval', 'all'):
        run_eval(lab, check=args.check)
    if args.verb == 'game':
        run_game_verb(lab)


def main(argv=None) -> int:
    args = parse_args(argv)
    try:
        run(args)
    except LabError as e:
        print(f"Error: {e}", file=sys.stderr)
        return e.exit_code
    return 0


if __name__ == '__main__':
    sys.exit(main())
