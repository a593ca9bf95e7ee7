#!/usr/bin/env python3
"""
Semi-supervised domain adaptation experiment runner.
Subcommands: generate, train, eval, ablate, sweep-tau2, sweep-shots, gradcheck, pl-study
"""

import argparse
import logging
import os
import sys
from typing import List, Optional, Sequence

import orjson
from prometheus_client import start_http_server

import experiments
import gradcheck
from config import RunConfig, load_config
from data_bench import generate, write_csv
from errors import CheckpointError, ConfigError, DataFormatError, NumericalError
from trainer import CHECKPOINT_FILE, evaluate, load_split, train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERICAL = 2
EXIT_IO = 3


def configure_logging(level: str = 'INFO', log_file: Optional[str] = None):
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if log_file:
        handlers.append(logging.FileHandler(log_file, mode='a'))
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True,
    )


def _float_list(text: str) -> List[float]:
    return [float(v) for v in text.split(',') if v.strip()]


def _int_list(text: str) -> List[int]:
    return [int(v) for v in text.split(',') if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help="TOML config file")
    common.add_argument('--set', action='append', default=[], metavar='KEY=VALUE', help="override a config key")
    common.add_argument('--seed', type=int)
    common.add_argument('--out')
    common.add_argument('--steps', type=int)
    common.add_argument('--log-level', default=os.getenv('PROTOSHIFT_LOG_LEVEL', 'INFO'))
    common.add_argument('--log-file')
    common.add_argument('--metrics-port', type=int, help="serve Prometheus metrics on this port")

    parser = argparse.ArgumentParser(description=__doc__.strip().splitlines()[0])
    sub = parser.add_subparsers(dest='command', required=True)
    sub.add_parser('generate', parents=[common], help="write the synthetic split to <out>/dataset.csv")
    sub.add_parser('train', parents=[common], help="train one configuration")
    p = sub.add_parser('eval', parents=[common], help="evaluate a checkpoint on the unlabeled target pool")
    p.add_argument('--checkpoint', help="defaults to <out>/checkpoint.bin")

    seeds_help = "comma-separated seeds (default 0,1,2,3,4)"
    p = sub.add_parser('ablate', parents=[common], help="loss-component and prototype-branch ablation")
    p.add_argument('--seeds', type=_int_list, default=list(experiments.SUITE_SEEDS), help=seeds_help)
    p.add_argument('--no-prototype-rows', action='store_true')
    p = sub.add_parser('sweep-tau2', parents=[common], help="MCA against tau2")
    p.add_argument('--values', type=_float_list, default=list(experiments.DEFAULT_TAU2_VALUES))
    p.add_argument('--seeds', type=_int_list, default=list(experiments.SUITE_SEEDS), help=seeds_help)
    p = sub.add_parser('sweep-shots', parents=[common], help="accuracy against labeled shots per class")
    p.add_argument('--shots', type=_int_list, default=list(experiments.DEFAULT_SHOTS))
    p.add_argument('--seeds', type=_int_list, default=list(experiments.SUITE_SEEDS), help=seeds_help)
    p = sub.add_parser('pl-study', parents=[common], help="pseudo-label accuracy per labelling strategy")
    p.add_argument('--seeds', type=_int_list, default=list(experiments.SUITE_SEEDS), help=seeds_help)
    p = sub.add_parser('gradcheck', parents=[common], help="finite-difference check of the objective")
    p.add_argument('--seeds', type=int, default=20, help="number of seeds (0..N-1)")
    p.add_argument('--tolerance', type=float, default=gradcheck.TOLERANCE)
    return parser


def resolve_config(args) -> RunConfig:
    flags = {'seed': args.seed, 'out': args.out, 'steps': args.steps, 'metrics_port': args.metrics_port,
             'log_file': args.log_file}
    return load_config(args.config, args.set, flags)


def _print_json(payload):
    sys.stdout.write(orjson.dumps(payload, option=orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS).decode() + '\n')


def dispatch(args) -> int:
    if args.command == 'gradcheck':
        ok, rows = gradcheck.run_suite(range(args.seeds), tolerance=args.tolerance)
        for row in rows:
            if not row['ok']:
                logger.error(f"{row['term']} seed {row['seed']}: {row['worst']} {row['error']:.3e}")
        logger.info(f"Gradient check {'passed' if ok else 'failed'} over {len(rows)} cases")
        return EXIT_OK if ok else EXIT_NUMERICAL

    config = resolve_config(args)
    if config.metrics_port:
        start_http_server(config.metrics_port)
        logger.info(f"Metrics server listening on :{config.metrics_port}")

    if args.command == 'generate':
        if config.csv_path:
            raise ConfigError("generate builds the synthetic scenario; unset csv_path")
        path = write_csv(generate(config.scenario()), os.path.join(config.out, 'dataset.csv'))
        logger.info(f"Wrote {path}")
    elif args.command == 'train':
        _print_json(train(config).as_dict())
    elif args.command == 'eval':
        checkpoint = args.checkpoint or os.path.join(config.out, CHECKPOINT_FILE)
        _print_json(evaluate(checkpoint, load_split(config), config.t1).as_dict())
    elif args.command == 'ablate':
        result = experiments.ablation_suite(config, args.seeds, not args.no_prototype_rows)
        _print_json(result.summary)
    elif args.command == 'sweep-tau2':
        result = experiments.tau2_sweep(config, args.values, args.seeds)
        _print_json({'summary': result.summary, **result.extra})
    elif args.command == 'sweep-shots':
        result = experiments.shots_sweep(config, args.shots, args.seeds)
        _print_json({'summary': result.summary, **result.extra})
    elif args.command == 'pl-study':
        result = experiments.pl_study(config, args.seeds)
        _print_json({'summary': result.summary, **result.extra})
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level, args.log_file)
    try:
        return dispatch(args)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except NumericalError as e:
        where = f" (last good checkpoint: {e.checkpoint_path})" if e.checkpoint_path else ""
        logger.error(f"Numerical abort: {e}{where}")
        return EXIT_NUMERICAL
    except (DataFormatError, CheckpointError, OSError) as e:
        logger.error(f"I/O error: {e}")
        return EXIT_IO


if __name__ == '__main__':
    sys.exit(main())
